#include "grouptr/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include "grouptr/errors.hpp"

namespace grouptr {

double overlap_ratio(const Group& det, const Group& gt) {
  if (det.empty() || gt.empty()) return 0.0;
  const std::unordered_set<int> members(gt.begin(), gt.end());
  std::size_t shared = 0;
  for (int id : std::set<int>(det.begin(), det.end())) shared += members.count(id);
  return static_cast<double>(shared) / static_cast<double>(std::max(det.size(), gt.size()));
}

bool half_match(const Group& det, const Group& gt) { return overlap_ratio(det, gt) > 0.5; }

MatchResult metrics_from_counts(std::size_t matches, std::size_t detected, std::size_t ground_truth) {
  MatchResult r;
  r.detected = detected;
  r.ground_truth = ground_truth;
  if (detected == 0 && ground_truth == 0) {
    r.precision = r.recall = r.f1 = 1.0;
    return r;
  }
  r.precision = detected ? static_cast<double>(matches) / static_cast<double>(detected) : 0.0;
  r.recall = ground_truth ? static_cast<double>(matches) / static_cast<double>(ground_truth) : 0.0;
  const double s = r.precision + r.recall;
  r.f1 = s > 0.0 ? 2.0 * r.precision * r.recall / s : 0.0;
  return r;
}

MatchResult score_groups(const std::vector<Group>& detected, const std::vector<Group>& ground_truth) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> candidates;
  for (std::size_t d = 0; d < detected.size(); ++d) {
    for (std::size_t g = 0; g < ground_truth.size(); ++g) {
      const double ratio = overlap_ratio(detected[d], ground_truth[g]);
      if (ratio > 0.5) candidates.emplace_back(ratio, d, g);
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
    return std::get<2>(a) < std::get<2>(b);
  });
  std::vector<bool> det_used(detected.size(), false), gt_used(ground_truth.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> matches;
  for (const auto& [ratio, d, g] : candidates) {
    if (det_used[d] || gt_used[g]) continue;
    det_used[d] = gt_used[g] = true;
    matches.emplace_back(d, g);
  }
  MatchResult r = metrics_from_counts(matches.size(), detected.size(), ground_truth.size());
  r.matches = std::move(matches);
  return r;
}

namespace {

std::string metric_line(const std::string& label, const MatchResult& r) {
  char buf[96];
  std::snprintf(buf, sizeof buf, " P=%.4f R=%.4f F1=%.4f\n", r.precision, r.recall, r.f1);
  return label + buf;
}

}  // namespace

std::string format_report(const std::vector<SceneReport>& scenes) {
  std::string out;
  std::size_t matches = 0, detected = 0, truth = 0;
  for (const auto& s : scenes) {
    out += metric_line("scene=" + s.id, s.result);
    matches += s.result.matches.size();
    detected += s.result.detected;
    truth += s.result.ground_truth;
  }
  out += metric_line("aggregate", metrics_from_counts(matches, detected, truth));
  return out;
}

std::string groups_to_text(std::vector<Group> groups) {
  for (auto& g : groups) std::sort(g.begin(), g.end());
  std::sort(groups.begin(), groups.end());
  std::string out;
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(g[i]);
    }
    out += '\n';
  }
  return out;
}

void save_groups(const std::vector<Group>& groups, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write groups file " + path.string());
  out << groups_to_text(groups);
  if (!out) throw IoError("failed writing groups file " + path.string());
}

std::vector<Group> load_groups(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open groups file " + path.string());
  std::vector<Group> groups;
  std::set<int> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream fields(line);
    Group g;
    std::string token;
    while (fields >> token) {
      std::size_t used = 0;
      int id = 0;
      try {
        id = std::stoi(token, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != token.size()) {
        throw ValidationError(path.string() + ": line " + std::to_string(line_no) + ": invalid id \"" + token + "\"");
      }
      if (!seen.insert(id).second) {
        throw ValidationError(path.string() + ": line " + std::to_string(line_no) + ": person " + std::to_string(id) + " appears in more than one group");
      }
      g.push_back(id);
    }
    std::sort(g.begin(), g.end());
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace grouptr
