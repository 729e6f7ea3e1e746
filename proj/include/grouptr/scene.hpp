#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace grouptr {

/// Axis-aligned box in coordinates normalized by frame width and height.
struct BoundingBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double center_x() const { return 0.5 * (x0 + x1); }
  double center_y() const { return 0.5 * (y0 + y1); }
  bool valid() const;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

double box_iou(const BoundingBox& a, const BoundingBox& b);

struct TrackedPerson {
  int id = 0;
  // One entry per scene frame; nullopt where the person is not visible.
  std::vector<std::optional<BoundingBox>> boxes;
  // One entry per scene frame; empty where the person is not visible.
  std::vector<std::vector<float>> appearance;

  bool visible(std::size_t t) const { return t < boxes.size() && boxes[t].has_value(); }
  std::size_t visible_count() const;

  friend bool operator==(const TrackedPerson&, const TrackedPerson&) = default;
};

using Group = std::vector<int>;

struct Scene {
  std::size_t frame_count = 0;
  std::size_t app_dim = 0;
  std::vector<TrackedPerson> persons;
  std::vector<Group> groups;

  // Index into `persons`, or nullopt.
  std::optional<std::size_t> index_of(int id) const;
  bool has_features() const;

  // Throws ValidationError naming the offending person or group.
  void validate(bool require_features = false) const;

  friend bool operator==(const Scene&, const Scene&) = default;
};

// ---- files -----------------------------------------------------------------------

Scene load_scene(const std::filesystem::path& path);
void save_scene(const Scene& scene, const std::filesystem::path& path);
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);

// Attaches per-frame appearance vectors from a "GTFT" feature file.
void load_features(Scene& scene, const std::filesystem::path& path);
void save_features(const Scene& scene, const std::filesystem::path& path);

// Scene file plus its feature file.
Scene load_scene_with_features(const std::filesystem::path& scene_path,
                               const std::filesystem::path& feature_path);

// ---- features -----------------------------------------------------------------------

inline constexpr std::size_t kTrajectoryChannels = 5;

/// Rows (cx, cy, w, h, visible) over a window, row-major [5, length].
struct TrajectoryFeature {
  std::size_t length = 0;
  std::vector<double> values;
  bool any_visible = false;

  double at(std::size_t channel, std::size_t t) const { return values[channel * length + t]; }
};

TrajectoryFeature build_trajectory_features(const TrackedPerson& person, std::size_t start,
                                            std::size_t length);

// ---- perturbations ---------------------------------------------------------------------

// Gaussian corner noise with std sigma*w (x) and sigma*h (y); boxes clamped and re-ordered.
Scene perturb_boxes(const Scene& scene, double sigma, std::uint64_t seed);

// Removes each visible (person, frame) with probability `rate`; persons left
// invisible are removed along with their group memberships.
Scene drop_detections(const Scene& scene, double rate, std::uint64_t seed);

struct FrameWindow {
  std::size_t start = 0;
  std::size_t length = 0;
};

FrameWindow sample_window(const Scene& scene, std::size_t length, std::mt19937_64& rng);

}  // namespace grouptr
