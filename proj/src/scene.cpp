#include "grouptr/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "binary_io.hpp"
#include "grouptr/errors.hpp"

namespace grouptr {

namespace {

using Json = nlohmann::ordered_json;

constexpr char kFeatureMagic[4] = {'G', 'T', 'F', 'T'};
constexpr std::uint32_t kFeatureVersion = 1;
constexpr double kMinExtent = 1e-6;

std::string person_label(int id) { return "person " + std::to_string(id); }

using binary::put_f32;
using binary::put_u32;

std::uint32_t get_u32(std::istream& in, const char* what) {
  return binary::get_u32(in, "feature file", what);
}

float get_f32(std::istream& in) { return binary::get_f32(in, "feature file", "feature values"); }

std::size_t line_of(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

template <typename T>
T field(const Json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw ValidationError(where + ": missing \"" + key + "\"");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(where + ": field \"" + key + "\" has the wrong type");
  }
}

BoundingBox repair(BoundingBox b) {
  auto fix = [](double& lo, double& hi) {
    lo = std::clamp(lo, 0.0, 1.0);
    hi = std::clamp(hi, 0.0, 1.0);
    if (lo > hi) std::swap(lo, hi);
    if (hi - lo < kMinExtent) {
      const double c = std::clamp(0.5 * (lo + hi), 0.5 * kMinExtent, 1.0 - 0.5 * kMinExtent);
      lo = c - 0.5 * kMinExtent;
      hi = c + 0.5 * kMinExtent;
    }
  };
  fix(b.x0, b.x1);
  fix(b.y0, b.y1);
  return b;
}

}  // namespace

bool BoundingBox::valid() const {
  return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) && 0.0 <= x0 &&
         x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.width() * a.height() + b.width() * b.height() - inter);
}

std::size_t TrackedPerson::visible_count() const {
  return static_cast<std::size_t>(std::count_if(boxes.begin(), boxes.end(), [](const auto& b) { return b.has_value(); }));
}

std::optional<std::size_t> Scene::index_of(int id) const {
  for (std::size_t i = 0; i < persons.size(); ++i) {
    if (persons[i].id == id) return i;
  }
  return std::nullopt;
}

bool Scene::has_features() const {
  return !persons.empty() && std::all_of(persons.begin(), persons.end(), [](const TrackedPerson& p) {
    return !p.appearance.empty();
  });
}

void Scene::validate(bool require_features) const {
  if (frame_count == 0) throw ValidationError("scene: frame_count must be positive");
  if (app_dim == 0) throw ValidationError("scene: app_dim must be positive");
  std::unordered_set<int> ids;
  for (const auto& p : persons) {
    if (p.id < 0) throw ValidationError(person_label(p.id) + ": ids must be non-negative");
    if (!ids.insert(p.id).second) throw ValidationError(person_label(p.id) + ": duplicate id");
    if (p.boxes.size() != frame_count) throw ValidationError(person_label(p.id) + ": box track length differs from frame_count");
    for (std::size_t t = 0; t < frame_count; ++t) {
      if (p.boxes[t] && !p.boxes[t]->valid()) {
        throw ValidationError(person_label(p.id) + ": invalid box at frame " + std::to_string(t));
      }
    }
    if (p.visible_count() == 0) throw ValidationError(person_label(p.id) + ": never visible");
    if (p.appearance.empty()) {
      if (require_features) throw ValidationError(person_label(p.id) + ": missing appearance features");
      continue;
    }
    if (p.appearance.size() != frame_count) throw ValidationError(person_label(p.id) + ": appearance track length differs from frame_count");
    for (std::size_t t = 0; t < frame_count; ++t) {
      const bool has = !p.appearance[t].empty();
      if (has != p.boxes[t].has_value()) {
        throw ValidationError(person_label(p.id) + ": appearance and box presence disagree at frame " + std::to_string(t));
      }
      if (has && p.appearance[t].size() != app_dim) {
        throw ValidationError(person_label(p.id) + ": appearance dimension differs from app_dim at frame " + std::to_string(t));
      }
    }
  }
  std::unordered_set<int> grouped;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const std::string label = "group " + std::to_string(g);
    if (groups[g].size() < 2) throw ValidationError(label + ": fewer than 2 members");
    for (int id : groups[g]) {
      if (!ids.count(id)) throw ValidationError(label + ": unknown " + person_label(id));
      if (!grouped.insert(id).second) throw ValidationError(label + ": " + person_label(id) + " belongs to more than one group");
    }
  }
}

// ---- JSON scene file ----

std::string scene_to_json(const Scene& scene) {
  Json root;
  root["frame_count"] = scene.frame_count;
  root["app_dim"] = scene.app_dim;
  Json persons = Json::array();
  for (const auto& p : scene.persons) {
    Json frames = Json::array();
    for (std::size_t t = 0; t < p.boxes.size(); ++t) {
      if (!p.boxes[t]) continue;
      const auto& b = *p.boxes[t];
      frames.push_back(Json{{"t", t}, {"box", {b.x0, b.y0, b.x1, b.y1}}});
    }
    persons.push_back(Json{{"id", p.id}, {"frames", std::move(frames)}});
  }
  root["persons"] = std::move(persons);
  Json groups = Json::array();
  for (const auto& g : scene.groups) groups.push_back(g);
  root["groups"] = std::move(groups);
  return root.dump() + "\n";
}

Scene scene_from_json(const std::string& text) {
  Json root;
  try {
    root = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("scene parse error at line " + std::to_string(line_of(text, e.byte)) + ": " + e.what());
  }
  Scene scene;
  const auto frame_count = field<long long>(root, "frame_count", "scene");
  const auto app_dim = field<long long>(root, "app_dim", "scene");
  if (frame_count <= 0) throw ValidationError("scene: frame_count must be positive");
  if (app_dim <= 0) throw ValidationError("scene: app_dim must be positive");
  scene.frame_count = static_cast<std::size_t>(frame_count);
  scene.app_dim = static_cast<std::size_t>(app_dim);

  const auto persons = field<Json>(root, "persons", "scene");
  if (!persons.is_array()) throw ValidationError("scene: \"persons\" must be an array");
  for (std::size_t i = 0; i < persons.size(); ++i) {
    const std::string where = "persons[" + std::to_string(i) + "]";
    TrackedPerson p;
    p.id = field<int>(persons[i], "id", where);
    p.boxes.assign(scene.frame_count, std::nullopt);
    const auto frames = field<Json>(persons[i], "frames", where);
    if (!frames.is_array()) throw ValidationError(where + ": \"frames\" must be an array");
    for (std::size_t k = 0; k < frames.size(); ++k) {
      const std::string fw = person_label(p.id) + " frames[" + std::to_string(k) + "]";
      const auto t = field<long long>(frames[k], "t", fw);
      const auto box = field<std::vector<double>>(frames[k], "box", fw);
      if (t < 0 || static_cast<std::size_t>(t) >= scene.frame_count) throw ValidationError(fw + ": frame index out of range");
      if (box.size() != 4) throw ValidationError(fw + ": box needs 4 coordinates");
      if (p.boxes[static_cast<std::size_t>(t)]) throw ValidationError(fw + ": duplicate frame " + std::to_string(t));
      BoundingBox b{box[0], box[1], box[2], box[3]};
      if (!b.valid()) throw ValidationError(person_label(p.id) + ": invalid box at frame " + std::to_string(t));
      p.boxes[static_cast<std::size_t>(t)] = b;
    }
    scene.persons.push_back(std::move(p));
  }
  const auto groups = field<Json>(root, "groups", "scene");
  if (!groups.is_array()) throw ValidationError("scene: \"groups\" must be an array");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    try {
      scene.groups.push_back(groups[g].get<Group>());
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("group " + std::to_string(g) + ": members must be integer ids");
    }
  }
  scene.validate();
  return scene;
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open scene file " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return scene_from_json(buffer.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void save_scene(const Scene& scene, const std::filesystem::path& path) {
  scene.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write scene file " + path.string());
  out << scene_to_json(scene);
  if (!out) throw IoError("failed writing scene file " + path.string());
}

// ---- GTFT feature file ----

void save_features(const Scene& scene, const std::filesystem::path& path) {
  scene.validate(true);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature file " + path.string());
  out.write(kFeatureMagic, 4);
  put_u32(out, kFeatureVersion);
  put_u32(out, static_cast<std::uint32_t>(scene.persons.size()));
  for (const auto& p : scene.persons) {
    put_u32(out, static_cast<std::uint32_t>(p.id));
    put_u32(out, static_cast<std::uint32_t>(p.visible_count()));
    put_u32(out, static_cast<std::uint32_t>(scene.app_dim));
    for (std::size_t t = 0; t < scene.frame_count; ++t) {
      if (!p.boxes[t]) continue;
      put_u32(out, static_cast<std::uint32_t>(t));
      for (float v : p.appearance[t]) put_f32(out, v);
    }
  }
  if (!out) throw IoError("failed writing feature file " + path.string());
}

void load_features(Scene& scene, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file " + path.string());
  const std::string where = path.string() + ": ";
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kFeatureMagic, 4) != 0) throw ValidationError(where + "bad magic, expected GTFT");
  const auto version = get_u32(in, "version");
  if (version != kFeatureVersion) throw ValidationError(where + "unsupported version " + std::to_string(version));
  const auto count = get_u32(in, "person count");
  std::unordered_set<int> seen;
  for (auto& p : scene.persons) p.appearance.clear();
  for (std::uint32_t k = 0; k < count; ++k) {
    const int id = static_cast<int>(get_u32(in, "person id"));
    const auto frames = get_u32(in, "frame count");
    const auto dim = get_u32(in, "feature dimension");
    const auto idx = scene.index_of(id);
    if (!idx) throw ValidationError(where + person_label(id) + " is not in the scene");
    if (!seen.insert(id).second) throw ValidationError(where + person_label(id) + " appears twice");
    if (dim != scene.app_dim) throw ValidationError(where + person_label(id) + ": dimension " + std::to_string(dim) + " differs from app_dim");
    auto& person = scene.persons[*idx];
    person.appearance.assign(scene.frame_count, {});
    long long last = -1;
    for (std::uint32_t f = 0; f < frames; ++f) {
      const auto t = get_u32(in, "frame index");
      if (static_cast<long long>(t) <= last) throw ValidationError(where + person_label(id) + ": frame order must be strictly increasing");
      if (t >= scene.frame_count) throw ValidationError(where + person_label(id) + ": frame " + std::to_string(t) + " out of range");
      last = t;
      std::vector<float> values(dim);
      for (auto& v : values) v = get_f32(in);
      person.appearance[t] = std::move(values);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError(where + "trailing bytes after last record");
  try {
    scene.validate(true);
  } catch (const ValidationError& e) {
    throw ValidationError(where + e.what());
  }
}

Scene load_scene_with_features(const std::filesystem::path& scene_path, const std::filesystem::path& feature_path) {
  Scene scene = load_scene(scene_path);
  load_features(scene, feature_path);
  return scene;
}

// ---- features ----

TrajectoryFeature build_trajectory_features(const TrackedPerson& person, std::size_t start, std::size_t length) {
  if (length == 0 || start + length > person.boxes.size()) {
    throw std::out_of_range("trajectory window exceeds the scene");
  }
  TrajectoryFeature f;
  f.length = length;
  f.values.assign(kTrajectoryChannels * length, 0.0);
  for (std::size_t t = 0; t < length; ++t) {
    const auto& box = person.boxes[start + t];
    if (!box) continue;
    f.any_visible = true;
    f.values[0 * length + t] = box->center_x();
    f.values[1 * length + t] = box->center_y();
    f.values[2 * length + t] = box->width();
    f.values[3 * length + t] = box->height();
    f.values[4 * length + t] = 1.0;
  }
  return f;
}

// ---- perturbations ----

Scene perturb_boxes(const Scene& scene, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("perturb_boxes: sigma must be non-negative");
  Scene out = scene;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (auto& p : out.persons) {
    for (auto& slot : p.boxes) {
      if (!slot) continue;
      const double w = slot->width(), h = slot->height();
      BoundingBox b = *slot;
      b.x0 += sigma * w * unit(rng);
      b.y0 += sigma * h * unit(rng);
      b.x1 += sigma * w * unit(rng);
      b.y1 += sigma * h * unit(rng);
      slot = repair(b);
    }
  }
  return out;
}

Scene drop_detections(const Scene& scene, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("drop_detections: rate must be in [0, 1)");
  Scene out;
  out.frame_count = scene.frame_count;
  out.app_dim = scene.app_dim;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::unordered_set<int> removed;
  for (const auto& src : scene.persons) {
    TrackedPerson p = src;
    for (std::size_t t = 0; t < p.boxes.size(); ++t) {
      if (!p.boxes[t]) continue;
      if (uniform(rng) < rate) {
        p.boxes[t].reset();
        if (!p.appearance.empty()) p.appearance[t].clear();
      }
    }
    if (p.visible_count() == 0) {
      removed.insert(p.id);
      continue;
    }
    out.persons.push_back(std::move(p));
  }
  for (const auto& g : scene.groups) {
    Group kept;
    for (int id : g) {
      if (!removed.count(id)) kept.push_back(id);
    }
    if (kept.size() >= 2) out.groups.push_back(std::move(kept));
  }
  return out;
}

FrameWindow sample_window(const Scene& scene, std::size_t length, std::mt19937_64& rng) {
  if (length == 0 || length > scene.frame_count) {
    throw std::invalid_argument("window length " + std::to_string(length) + " exceeds frame_count " +
                                std::to_string(scene.frame_count));
  }
  std::uniform_int_distribution<std::size_t> start(0, scene.frame_count - length);
  return {start(rng), length};
}

}  // namespace grouptr
