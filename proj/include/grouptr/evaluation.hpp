#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "grouptr/scene.hpp"

namespace grouptr {

// |det ∩ gt| / max(|det|, |gt|)
double overlap_ratio(const Group& det, const Group& gt);

// Strictly more than half of the larger group is shared.
bool half_match(const Group& det, const Group& gt);

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> matches;  // (det index, gt index)
  std::size_t detected = 0;
  std::size_t ground_truth = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Greedy one-to-one matching over half-matching pairs by descending overlap
// ratio (ties: smaller detection index, then smaller ground-truth index).
MatchResult score_groups(const std::vector<Group>& detected, const std::vector<Group>& ground_truth);

// Precision/recall/F1 from counts with the empty-set conventions of score_groups.
MatchResult metrics_from_counts(std::size_t matches, std::size_t detected, std::size_t ground_truth);

struct SceneReport {
  std::string id;
  MatchResult result;
};

// One "scene=<id> P=.. R=.. F1=.." line per scene, then an "aggregate" line
// computed from the pooled match counts.
std::string format_report(const std::vector<SceneReport>& scenes);

// Groups file: one group per line, ids separated by spaces in ascending order.
std::vector<Group> load_groups(const std::filesystem::path& path);
void save_groups(const std::vector<Group>& groups, const std::filesystem::path& path);
std::string groups_to_text(std::vector<Group> groups);

}  // namespace grouptr
