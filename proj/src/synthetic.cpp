#include "grouptr/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "config_parse.hpp"
#include "grouptr/errors.hpp"
#include "grouptr/parallel.hpp"

namespace grouptr {

namespace {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
double norm(Vec2 v) { return std::hypot(v.x, v.y); }

constexpr double kMargin = 0.05;
constexpr double kTopY = 0.25;  // walkable region starts below the horizon
constexpr double kOffsetJitter = 0.1;  // member offset drift, fraction of radius per frame

// Velocity random walk with reflection at the walkable region's borders.
std::vector<Vec2> walk(const GenConfig& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, c.speed_noise);
  const double x_lo = kMargin, x_hi = c.aspect - kMargin, y_lo = kTopY, y_hi = 1.0 - kMargin;
  Vec2 p{x_lo + (x_hi - x_lo) * u(rng), y_lo + (y_hi - y_lo) * u(rng)};
  const double heading = 2.0 * std::numbers::pi * u(rng);
  const double speed = c.walk_speed * (0.5 + u(rng));
  Vec2 v{speed * std::cos(heading), speed * std::sin(heading)};
  std::vector<Vec2> path;
  for (std::size_t t = 0; t < c.frames; ++t) {
    path.push_back(p);
    v.x += noise(rng);
    v.y += noise(rng);
    p = p + v;
    if (p.x < x_lo) { p.x = 2 * x_lo - p.x; v.x = -v.x; }
    if (p.x > x_hi) { p.x = 2 * x_hi - p.x; v.x = -v.x; }
    if (p.y < y_lo) { p.y = 2 * y_lo - p.y; v.y = -v.y; }
    if (p.y > y_hi) { p.y = 2 * y_hi - p.y; v.y = -v.y; }
  }
  return path;
}

// Offsets that drift but stay within [lo, hi] of the anchor.
std::vector<Vec2> drift(Vec2 start, double lo, double hi, double step, std::size_t frames,
                        std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, step);
  std::vector<Vec2> out;
  Vec2 o = start;
  for (std::size_t t = 0; t < frames; ++t) {
    out.push_back(o);
    o.x += noise(rng);
    o.y += noise(rng);
    const double r = norm(o);
    if (r > hi) o = {o.x * hi / r, o.y * hi / r};
    if (r < lo && r > 0.0) o = {o.x * lo / r, o.y * lo / r};
  }
  return out;
}

std::vector<double> random_unit(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::vector<double> v(dim);
  double s = 0.0;
  for (auto& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (auto& x : v) x /= std::sqrt(s);
  return v;
}

// Foot point to a normalized box; boxes grow toward the bottom of the frame.
BoundingBox box_at(Vec2 foot, const GenConfig& c) {
  const double h = c.box_height * (0.5 + foot.y);
  const double w = 0.4 * h;
  BoundingBox b{(foot.x - 0.5 * w) / c.aspect, foot.y - h, (foot.x + 0.5 * w) / c.aspect, foot.y};
  b.x0 = std::clamp(b.x0, 0.0, 1.0);
  b.x1 = std::clamp(b.x1, 0.0, 1.0);
  b.y0 = std::clamp(b.y0, 0.0, 1.0);
  b.y1 = std::clamp(b.y1, 0.0, 1.0);
  constexpr double kMinExtent = 1e-6;
  if (b.x1 - b.x0 < kMinExtent) {
    if (b.x0 >= 1.0 - kMinExtent) b.x0 = 1.0 - kMinExtent; else b.x1 = b.x0 + kMinExtent;
  }
  if (b.y1 - b.y0 < kMinExtent) {
    if (b.y0 >= 1.0 - kMinExtent) b.y0 = 1.0 - kMinExtent; else b.y1 = b.y0 + kMinExtent;
  }
  return b;
}

}  // namespace

void GenConfig::validate() const {
  if (group_size_min < 2 || group_size_max < group_size_min) {
    throw ValidationError("gen: group sizes need 2 <= group_size_min <= group_size_max");
  }
  if (n_groups + n_singletons == 0) throw ValidationError("gen: scene would have no persons");
  if (frames == 0) throw ValidationError("gen: frames must be positive");
  if (!(aspect > 2 * kMargin)) throw ValidationError("gen: aspect too small");
  if (!(walk_speed >= 0.0) || !(speed_noise >= 0.0)) throw ValidationError("gen: speeds must be non-negative");
  if (!(cohesion_radius > 0.0) || !(min_spacing >= 0.0)) throw ValidationError("gen: cohesion radius must be positive");
  if (!(box_height > 0.0 && box_height < 0.5)) throw ValidationError("gen: box_height must lie in (0, 0.5)");
  if (app_dim == 0) throw ValidationError("gen: app_dim must be positive");
  if (!(appearance_noise >= 0.0)) throw ValidationError("gen: appearance_noise must be non-negative");
  if (!(group_style >= 0.0 && group_style <= 1.0)) throw ValidationError("gen: group_style must lie in [0, 1]");
  if (!(parallel_fraction >= 0.0 && parallel_fraction <= 1.0)) throw ValidationError("gen: parallel_fraction must lie in [0, 1]");
  if (!(parallel_offset_min > 0.0 && parallel_offset_max >= parallel_offset_min)) {
    throw ValidationError("gen: need 0 < parallel_offset_min <= parallel_offset_max");
  }
  if (parallel_per_group == 0) throw ValidationError("gen: parallel_per_group must be positive");
  if (!(missed_detection_rate >= 0.0 && missed_detection_rate < 1.0)) {
    throw ValidationError("gen: missed_detection_rate must lie in [0, 1)");
  }
  if (!(occlusion_iou > 0.0 && occlusion_iou <= 1.0)) throw ValidationError("gen: occlusion_iou must lie in (0, 1]");
  if (!(occlusion_weight >= 0.0 && occlusion_weight <= 1.0)) throw ValidationError("gen: occlusion_weight must lie in [0, 1]");
  // members start evenly spaced on a circle of 0.6 * radius
  const double k = static_cast<double>(group_size_max);
  const double chord = 2.0 * 0.6 * cohesion_radius * std::sin(std::numbers::pi / k);
  if (n_groups > 0 && chord < min_spacing) {
    throw ValidationError("gen: cohesion radius " + std::to_string(cohesion_radius) +
                          " is too small for groups of " + std::to_string(group_size_max) +
                          " with spacing " + std::to_string(min_spacing));
  }
}

GenConfig GenConfig::parse(const std::string& text) {
  GenConfig c;
  for (const auto& [key, entry] : config::read_key_values(text)) {
    const config::Value r(key, entry);
    if (key == "n_groups") c.n_groups = r.count();
    else if (key == "group_size_min") c.group_size_min = r.count();
    else if (key == "group_size_max") c.group_size_max = r.count();
    else if (key == "n_singletons") c.n_singletons = r.count();
    else if (key == "parallel_fraction") c.parallel_fraction = r.real();
    else if (key == "parallel_offset_min") c.parallel_offset_min = r.real();
    else if (key == "parallel_offset_max") c.parallel_offset_max = r.real();
    else if (key == "parallel_per_group") c.parallel_per_group = r.count();
    else if (key == "frames") c.frames = r.count();
    else if (key == "aspect") c.aspect = r.real();
    else if (key == "walk_speed") c.walk_speed = r.real();
    else if (key == "speed_noise") c.speed_noise = r.real();
    else if (key == "cohesion_radius") c.cohesion_radius = r.real();
    else if (key == "min_spacing") c.min_spacing = r.real();
    else if (key == "box_height") c.box_height = r.real();
    else if (key == "app_dim") c.app_dim = r.count();
    else if (key == "appearance_noise") c.appearance_noise = r.real();
    else if (key == "group_style") c.group_style = r.real();
    else if (key == "occlusion_iou") c.occlusion_iou = r.real();
    else if (key == "occlusion_weight") c.occlusion_weight = r.real();
    else if (key == "missed_detection_rate") c.missed_detection_rate = r.real();
    else if (key == "seed") c.seed = r.count();
    else r.unknown();
  }
  c.validate();
  return c;
}

GenConfig GenConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse(buf.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

Scene generate_scene(const GenConfig& c, GenStats* stats) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> size_dist(c.group_size_min, c.group_size_max);

  std::vector<std::vector<Vec2>> paths;       // foot points per person
  std::vector<std::vector<double>> identity;  // unit embeddings
  std::vector<std::vector<std::size_t>> group_members;
  std::vector<std::vector<Vec2>> group_paths;
  std::vector<std::vector<double>> group_styles;

  auto embedding = [&](const std::vector<double>& style) {
    const auto own = random_unit(c.app_dim, rng);
    std::vector<double> e(c.app_dim);
    double s = 0.0;
    for (std::size_t d = 0; d < c.app_dim; ++d) {
      e[d] = c.group_style * style[d] + std::sqrt(1.0 - c.group_style * c.group_style) * own[d];
      s += e[d] * e[d];
    }
    for (auto& x : e) x /= std::sqrt(s);
    return e;
  };

  for (std::size_t g = 0; g < c.n_groups; ++g) {
    const std::size_t k = size_dist(rng);
    const auto centroid = walk(c, rng);
    const auto style = random_unit(c.app_dim, rng);
    const double phase = 2.0 * std::numbers::pi * u(rng);
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < k; ++i) {
      const double angle = phase + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(k);
      const Vec2 start{0.6 * c.cohesion_radius * std::cos(angle), 0.6 * c.cohesion_radius * std::sin(angle)};
      const auto offsets = drift(start, 0.0, c.cohesion_radius, kOffsetJitter * c.cohesion_radius * 0.3, c.frames, rng);
      std::vector<Vec2> path(c.frames);
      for (std::size_t t = 0; t < c.frames; ++t) path[t] = centroid[t] + offsets[t];
      members.push_back(paths.size());
      paths.push_back(std::move(path));
      identity.push_back(embedding(style));
    }
    group_members.push_back(std::move(members));
    group_paths.push_back(centroid);
    group_styles.push_back(style);
  }

  const auto n_parallel = c.n_groups > 0
      ? static_cast<std::size_t>(std::round(c.parallel_fraction * static_cast<double>(c.n_singletons)))
      : 0;
  std::vector<std::size_t> parallel_people;
  for (std::size_t s = 0; s < c.n_singletons; ++s) {
    std::vector<Vec2> path;
    if (s < n_parallel) {
      // alongside a group, just outside its cohesion radius
      const auto& anchor = group_paths[(s / c.parallel_per_group) % c.n_groups];
      const double angle = 2.0 * std::numbers::pi * u(rng);
      const double lo = c.parallel_offset_min * c.cohesion_radius;
      const double hi = c.parallel_offset_max * c.cohesion_radius;
      const double dist = lo + (hi - lo) * u(rng);
      const auto offsets = drift({dist * std::cos(angle), dist * std::sin(angle)}, lo, hi,
                                 kOffsetJitter * c.cohesion_radius * 0.3, c.frames, rng);
      for (std::size_t t = 0; t < c.frames; ++t) path.push_back(anchor[t] + offsets[t]);
      parallel_people.push_back(paths.size());
    } else {
      path = walk(c, rng);
    }
    paths.push_back(std::move(path));
    identity.push_back(embedding(random_unit(c.app_dim, rng)));
  }

  const std::size_t n = paths.size();
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);

  Scene scene;
  scene.frame_count = c.frames;
  scene.app_dim = c.app_dim;
  scene.persons.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = scene.persons[i];
    p.id = ids[i];
    p.boxes.resize(c.frames);
    p.appearance.resize(c.frames);
    for (std::size_t t = 0; t < c.frames; ++t) p.boxes[t] = box_at(paths[i][t], c);
  }

  std::normal_distribution<double> noise(0.0, c.appearance_noise);
  std::size_t occluded = 0;
  for (std::size_t t = 0; t < c.frames; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      // nearest-to-camera overlapping box with the largest IoU occludes person i
      std::size_t occluder = n;
      double best_iou = c.occlusion_iou;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const auto& bi = *scene.persons[i].boxes[t];
        const auto& bj = *scene.persons[j].boxes[t];
        if (!(bj.y1 > bi.y1)) continue;
        const double iou = box_iou(bi, bj);
        if (iou > best_iou) {
          best_iou = iou;
          occluder = j;
        }
      }
      std::vector<float> f(c.app_dim);
      for (std::size_t d = 0; d < c.app_dim; ++d) {
        double v = identity[i][d];
        if (occluder < n) v = (1.0 - c.occlusion_weight) * v + c.occlusion_weight * identity[occluder][d];
        f[d] = static_cast<float>(v + noise(rng));
      }
      occluded += occluder < n;
      scene.persons[i].appearance[t] = std::move(f);
    }
  }

  if (c.missed_detection_rate > 0.0) {
    std::uniform_int_distribution<std::size_t> frame_dist(0, c.frames - 1);
    for (auto& p : scene.persons) {
      const std::size_t kept = frame_dist(rng);
      for (std::size_t t = 0; t < c.frames; ++t) {
        if (u(rng) >= c.missed_detection_rate || t == kept) continue;
        p.boxes[t].reset();
        p.appearance[t].clear();
      }
    }
  }

  for (const auto& members : group_members) {
    Group g;
    for (std::size_t m : members) g.push_back(ids[m]);
    std::sort(g.begin(), g.end());
    scene.groups.push_back(std::move(g));
  }
  std::sort(scene.groups.begin(), scene.groups.end());
  std::vector<TrackedPerson> sorted = scene.persons;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  scene.persons = std::move(sorted);

  if (stats) {
    stats->occluded_frames = occluded;
    stats->parallel_singletons.clear();
    for (std::size_t i : parallel_people) stats->parallel_singletons.push_back(ids[i]);
    std::sort(stats->parallel_singletons.begin(), stats->parallel_singletons.end());
  }
  scene.validate(true);
  return scene;
}

std::uint64_t derive_seed(std::uint64_t master, std::size_t index) {
  // splitmix64 of (master, index)
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<CorpusFiles> generate_corpus(const GenConfig& config, std::size_t n_scenes,
                                         std::uint64_t seed, const std::filesystem::path& dir) {
  if (n_scenes == 0) throw ValidationError("gen: need at least one scene");
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  std::vector<CorpusFiles> files(n_scenes);
  for (std::size_t i = 0; i < n_scenes; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu", i);
    files[i] = {dir / (std::string(name) + ".json"), dir / (std::string(name) + ".gtft")};
  }
  parallel_for(n_scenes, [&](std::size_t i) {
    GenConfig c = config;
    c.seed = derive_seed(seed, i);
    const Scene scene = generate_scene(c);
    save_scene(scene, files[i].scene);
    save_features(scene, files[i].features);
  });
  std::ofstream manifest(dir / "manifest.txt", std::ios::binary);
  if (!manifest) throw IoError("cannot write manifest in " + dir.string());
  for (const auto& f : files) {
    manifest << f.scene.filename().string() << '\t' << f.features.filename().string() << '\n';
  }
  if (!manifest) throw IoError("failed writing manifest in " + dir.string());
  return files;
}

std::vector<CorpusFiles> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<CorpusFiles> files;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) +
                            ": expected scene path<TAB>feature path");
    }
    std::filesystem::path scene = line.substr(0, tab), features = line.substr(tab + 1);
    if (scene.is_relative()) scene = base / scene;
    if (features.is_relative()) features = base / features;
    files.push_back({scene, features});
  }
  if (files.empty()) throw ValidationError(path.string() + ": manifest lists no scenes");
  return files;
}

}  // namespace grouptr
