#include "grouptr/evaluation.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "grouptr/errors.hpp"

namespace grouptr {
namespace {

TEST(HalfMatch, Examples) {
  EXPECT_TRUE(half_match({1, 2, 3}, {1, 2, 3, 4}));
  EXPECT_DOUBLE_EQ(overlap_ratio({1, 2, 3}, {1, 2, 3, 4}), 0.75);
  EXPECT_TRUE(half_match({4, 5}, {4, 5}));
  EXPECT_FALSE(half_match({1, 5}, {1, 2, 3}));
  // exactly half is not enough
  EXPECT_FALSE(half_match({1, 2}, {1, 3}));
  EXPECT_FALSE(half_match({1, 2}, {1, 2, 3, 4}));
}

TEST(HalfMatch, AgreesWithIntegerInequality) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> size(1, 8), id(0, 14);
  for (int trial = 0; trial < 10000; ++trial) {
    std::set<int> a, b;
    const int na = size(rng), nb = size(rng);
    while (static_cast<int>(a.size()) < na) a.insert(id(rng));
    while (static_cast<int>(b.size()) < nb) b.insert(id(rng));
    std::vector<int> shared;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(shared));
    const bool direct = 2 * shared.size() > std::max(a.size(), b.size());
    EXPECT_EQ(half_match(Group(a.begin(), a.end()), Group(b.begin(), b.end())), direct);
  }
}

TEST(ScoreGroups, HandArithmetic) {
  const std::vector<Group> dets{{1, 2}, {3, 4, 5}, {9, 10}};
  const std::vector<Group> gts{{1, 2}, {3, 4, 5, 6}, {7, 8}, {11, 12}};
  const auto r = score_groups(dets, gts);
  EXPECT_EQ(r.matches.size(), 2u);
  EXPECT_NEAR(r.precision, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.recall, 0.5, 1e-12);
  EXPECT_NEAR(r.f1, 4.0 / 7.0, 1e-12);
}

TEST(ScoreGroups, IdenticalAndDisjoint) {
  const std::vector<Group> g{{1, 2}, {3, 4, 5}};
  const auto same = score_groups(g, g);
  EXPECT_EQ(same.precision, 1.0);
  EXPECT_EQ(same.recall, 1.0);
  EXPECT_EQ(same.f1, 1.0);
  const auto disjoint = score_groups(g, {{6, 7}, {8, 9}});
  EXPECT_EQ(disjoint.precision, 0.0);
  EXPECT_EQ(disjoint.recall, 0.0);
  EXPECT_EQ(disjoint.f1, 0.0);
}

TEST(ScoreGroups, EmptyConventions) {
  const auto both = score_groups({}, {});
  EXPECT_EQ(both.precision, 1.0);
  EXPECT_EQ(both.recall, 1.0);
  EXPECT_EQ(both.f1, 1.0);
  const auto no_dets = score_groups({}, {{1, 2}});
  EXPECT_EQ(no_dets.precision, 0.0);
  EXPECT_EQ(no_dets.recall, 0.0);
  EXPECT_EQ(no_dets.f1, 0.0);
  const auto no_gts = score_groups({{1, 2}}, {});
  EXPECT_EQ(no_gts.precision, 0.0);
  EXPECT_EQ(no_gts.f1, 0.0);
}

// Disjoint groups of size >= 2 drawn from persons 0..persons-1.
std::vector<Group> random_groups(std::mt19937_64& rng, int persons, int max_groups) {
  std::vector<int> ids(persons);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  const int count = std::uniform_int_distribution<int>(0, max_groups)(rng);
  std::vector<Group> groups;
  std::size_t next = 0;
  for (int g = 0; g < count; ++g) {
    const std::size_t size = std::uniform_int_distribution<std::size_t>(2, 5)(rng);
    if (next + size > ids.size()) break;
    groups.emplace_back(ids.begin() + next, ids.begin() + next + size);
    next += size;
  }
  return groups;
}

// Maximum number of disjoint half-matching pairs, by exhaustive search over
// subsets of matched ground-truth groups.
std::size_t optimal_matches(const std::vector<Group>& dets, const std::vector<Group>& gts) {
  std::vector<int> best(1u << gts.size(), -1);
  best[0] = 0;
  for (const auto& d : dets) {
    auto next = best;
    for (std::size_t mask = 0; mask < best.size(); ++mask) {
      if (best[mask] < 0) continue;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (mask & (1u << g)) continue;
        const auto& t = gts[g];
        std::set<int> a(d.begin(), d.end());
        std::size_t shared = 0;
        for (int id : t) shared += a.count(id);
        if (2 * shared > std::max(d.size(), t.size())) {
          next[mask | (1u << g)] = std::max(next[mask | (1u << g)], best[mask] + 1);
        }
      }
    }
    best = std::move(next);
  }
  return static_cast<std::size_t>(*std::max_element(best.begin(), best.end()));
}

TEST(ScoreGroups, GreedyEqualsExhaustiveMatching) {
  std::mt19937_64 rng(2);
  int conflicts = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto dets = random_groups(rng, 20, 8);
    const auto gts = random_groups(rng, 20, 8);
    const auto r = score_groups(dets, gts);
    conflicts += r.matches.size() != optimal_matches(dets, gts);
  }
  EXPECT_EQ(conflicts, 0);
}

TEST(ScoreGroups, InvariantToRelabelingAndOrder) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto dets = random_groups(rng, 20, 8);
    auto gts = random_groups(rng, 20, 8);
    const auto base = score_groups(dets, gts);
    std::vector<int> relabel(20);
    std::iota(relabel.begin(), relabel.end(), 100);
    std::shuffle(relabel.begin(), relabel.end(), rng);
    for (auto* side : {&dets, &gts}) {
      for (auto& g : *side) {
        for (auto& id : g) id = relabel[id];
      }
      std::shuffle(side->begin(), side->end(), rng);
    }
    const auto r = score_groups(dets, gts);
    EXPECT_EQ(r.precision, base.precision);
    EXPECT_EQ(r.recall, base.recall);
    EXPECT_GE(r.f1, 0.0);
    EXPECT_LE(r.f1, 1.0);
  }
}

TEST(Report, FormatsFourDecimals) {
  std::vector<SceneReport> scenes;
  scenes.push_back({"a", score_groups({{1, 2}, {3, 4, 5}, {9, 10}}, {{1, 2}, {3, 4, 5, 6}, {7, 8}, {11, 12}})});
  scenes.push_back({"b", score_groups({{1, 2}}, {{1, 2}})});
  EXPECT_EQ(format_report(scenes),
            "scene=a P=0.6667 R=0.5000 F1=0.5714\n"
            "scene=b P=1.0000 R=1.0000 F1=1.0000\n"
            "aggregate P=0.7500 R=0.6000 F1=0.6667\n");
}

TEST(GroupsFile, RoundTripAndCanonicalOrder) {
  const auto path = std::filesystem::temp_directory_path() / "grouptr_groups_test.txt";
  save_groups({{9, 3}, {2, 7, 1}}, path);
  std::ifstream in(path);
  const std::string text{std::istreambuf_iterator<char>(in), {}};
  EXPECT_EQ(text, "1 2 7\n3 9\n");
  EXPECT_EQ(load_groups(path), (std::vector<Group>{{1, 2, 7}, {3, 9}}));
  {
    std::ofstream out(path);
    out << "1 2\n2 3\n";
  }
  EXPECT_THROW(load_groups(path), ValidationError);
  {
    std::ofstream out(path);
    out << "1 x\n";
  }
  EXPECT_THROW(load_groups(path), ValidationError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_groups(path), IoError);
}

}  // namespace
}  // namespace grouptr
