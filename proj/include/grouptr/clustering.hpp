#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace grouptr {

/// Dense symmetric matrix of pairwise scores in [0, 1].
struct AffinityMatrix {
  std::size_t size = 0;
  std::vector<double> values;  // row-major size*size

  static AffinityMatrix zeros(std::size_t n) { return {n, std::vector<double>(n * n, 0.0)}; }
  double at(std::size_t i, std::size_t j) const { return values[i * size + j]; }
  double& at(std::size_t i, std::size_t j) { return values[i * size + j]; }

  friend bool operator==(const AffinityMatrix&, const AffinityMatrix&) = default;
};

// One row per line, values in round-trip precision separated by spaces.
std::string affinity_to_text(const AffinityMatrix& a);

// One label per node; equal labels mean the same cluster.
using Labeling = std::vector<int>;

struct LabelPropagationOptions {
  int max_iters = 100;
  std::uint64_t seed = 0;
  // Only entries above this count as edges.
  double edge_threshold = 0.5;
};

// Nodes start with their own index as label and repeatedly adopt the label
// with the largest summed affinity among their neighbors (ties go to the
// smaller label), visiting nodes in a seeded random order each sweep.
Labeling label_propagation(const AffinityMatrix& a, const LabelPropagationOptions& options = {});

struct SpectralOptions {
  std::optional<std::size_t> clusters;  // chosen by eigengap when absent
  std::uint64_t seed = 0;
  int max_iters = 300;
  std::size_t max_eigengap_candidates = 10;
};

// Normalized-affinity embedding plus k-means. Zero-degree nodes become
// singletons. Throws ValidationError when clusters > size.
Labeling spectral_clustering(const AffinityMatrix& a, const SpectralOptions& options = {});

// Clusters with at least two members as sorted node-index lists, ordered by
// their smallest member.
std::vector<std::vector<std::size_t>> extract_groups(const Labeling& labels);

}  // namespace grouptr
