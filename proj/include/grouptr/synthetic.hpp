#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "grouptr/scene.hpp"

namespace grouptr {

/// Parameters of the synthetic crowd generator. Distances are in units of
/// frame height; x spans [0, aspect].
struct GenConfig {
  std::size_t n_groups = 6;
  std::size_t group_size_min = 2;
  std::size_t group_size_max = 4;
  std::size_t n_singletons = 12;
  // Fraction of singletons that walk alongside a group.
  double parallel_fraction = 0.5;
  // Distance of a parallel walker from its group's centroid, in cohesion radii.
  double parallel_offset_min = 0.8;
  double parallel_offset_max = 1.6;
  // Consecutive parallel walkers that share one group.
  std::size_t parallel_per_group = 1;
  std::size_t frames = 16;
  double aspect = 16.0 / 9.0;
  double walk_speed = 0.01;    // mean speed per frame
  double speed_noise = 0.002;  // velocity random-walk step (std)
  double cohesion_radius = 0.05;
  double min_spacing = 0.02;   // between members of one group
  double box_height = 0.08;    // at the top of the frame; grows with depth
  std::size_t app_dim = 64;
  double appearance_noise = 0.05;
  // Weight of the style component shared by a group's identity embeddings.
  double group_style = 0.6;
  double occlusion_iou = 0.3;
  double occlusion_weight = 0.7;
  // Probability that a detection is missing; every person keeps one frame.
  double missed_detection_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  // Same "key = value" syntax as the pipeline config.
  static GenConfig parse(const std::string& text);
  static GenConfig load(const std::filesystem::path& path);
};

struct GenStats {
  std::size_t occluded_frames = 0;  // (person, frame) records corrupted by an occluder
  std::vector<int> parallel_singletons;
};

// Scene with boxes, appearance features and ground-truth groups.
Scene generate_scene(const GenConfig& config, GenStats* stats = nullptr);

std::uint64_t derive_seed(std::uint64_t master, std::size_t index);

struct CorpusFiles {
  std::filesystem::path scene;
  std::filesystem::path features;
};

// Writes scene_NNN.json / scene_NNN.gtft for scene i generated with
// derive_seed(seed, i), plus manifest.txt ("scene<TAB>features" per line).
std::vector<CorpusFiles> generate_corpus(const GenConfig& config, std::size_t n_scenes,
                                         std::uint64_t seed, const std::filesystem::path& dir);

// Manifest paths are resolved relative to the manifest's directory.
std::vector<CorpusFiles> read_manifest(const std::filesystem::path& path);

}  // namespace grouptr
