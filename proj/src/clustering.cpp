#include "grouptr/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "grouptr/errors.hpp"

namespace grouptr {

std::string affinity_to_text(const AffinityMatrix& a) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < a.size; ++i) {
    for (std::size_t j = 0; j < a.size; ++j) {
      std::snprintf(buf, sizeof buf, j ? " %.17g" : "%.17g", a.at(i, j));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

Labeling label_propagation(const AffinityMatrix& a, const LabelPropagationOptions& options) {
  const std::size_t n = a.size;
  Labeling labels(n);
  std::iota(labels.begin(), labels.end(), 0);
  std::vector<std::vector<std::size_t>> neighbors(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && a.at(i, j) > options.edge_threshold) neighbors[i].push_back(j);
    }
  }
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::map<int, double> mass;
  for (int iter = 0; iter < options.max_iters; ++iter) {
    std::shuffle(order.begin(), order.end(), rng);
    bool changed = false;
    for (std::size_t u : order) {
      if (neighbors[u].empty()) continue;
      mass.clear();
      for (std::size_t v : neighbors[u]) mass[labels[v]] += a.at(u, v);
      // map iterates in ascending label order, so strict > keeps the smallest on ties
      int best = labels[u];
      double best_mass = -1.0;
      for (const auto& [label, m] : mass) {
        if (m > best_mass) {
          best = label;
          best_mass = m;
        }
      }
      if (best != labels[u]) {
        labels[u] = best;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return labels;
}

namespace {

// Farthest-first seeding then Lloyd iterations on the rows of x.
std::vector<int> kmeans(const Eigen::MatrixXd& x, std::size_t k, std::uint64_t seed, int max_iters) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> seeds{std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)};
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (seeds.size() < k) {
    const auto& c = x.row(static_cast<Eigen::Index>(seeds.back()));
    std::size_t far = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], (x.row(static_cast<Eigen::Index>(i)) - c).squaredNorm());
      if (nearest[i] > nearest[far]) far = i;
    }
    seeds.push_back(far);
  }
  Eigen::MatrixXd centers(k, x.cols());
  for (std::size_t c = 0; c < k; ++c) centers.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(seeds[c]));
  std::vector<int> assign(n, -1);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = (x.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(c))).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), x.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(assign[i]) += x.row(static_cast<Eigen::Index>(i));
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    for (std::size_t c = 0; c < k; ++c) {
      // an emptied cluster keeps its previous center
      if (counts[c] > 0) centers.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
    }
  }
  return assign;
}

}  // namespace

Labeling spectral_clustering(const AffinityMatrix& a, const SpectralOptions& options) {
  const std::size_t n = a.size;
  if (options.clusters && (*options.clusters == 0 || *options.clusters > n)) {
    throw ValidationError("spectral clustering: cannot form " + std::to_string(*options.clusters) +
                          " clusters from " + std::to_string(n) + " nodes");
  }
  Labeling labels(n, -1);
  std::vector<std::size_t> active;
  std::vector<double> degree(n, 0.0);
  int next_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) degree[i] += a.at(i, j);
    if (degree[i] > 0.0) {
      active.push_back(i);
    } else {
      labels[i] = next_label++;
    }
  }
  const std::size_t m = active.size();
  if (m == 0) return labels;

  std::size_t k = 0;
  if (options.clusters) {
    const std::size_t isolated = n - m;
    k = *options.clusters > isolated ? *options.clusters - isolated : 1;
    k = std::min(k, m);
  }
  if (k == m) {
    for (std::size_t i : active) labels[i] = next_label++;
    return labels;
  }

  Eigen::MatrixXd norm(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < m; ++c) {
      norm(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          a.at(active[r], active[c]) / std::sqrt(degree[active[r]] * degree[active[c]]);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(norm);
  // ascending order from Eigen; reverse to descending
  const Eigen::VectorXd values = solver.eigenvalues().reverse();
  const Eigen::MatrixXd vectors = solver.eigenvectors().rowwise().reverse();
  if (k == 0) {
    const std::size_t candidates = std::min(m, options.max_eigengap_candidates);
    k = 1;
    double best_gap = -1.0;
    for (std::size_t i = 0; i + 1 < candidates; ++i) {
      const double gap = values(static_cast<Eigen::Index>(i)) - values(static_cast<Eigen::Index>(i + 1));
      if (gap > best_gap) {
        best_gap = gap;
        k = i + 1;
      }
    }
  }
  Eigen::MatrixXd embed = vectors.leftCols(static_cast<Eigen::Index>(k));
  for (Eigen::Index r = 0; r < embed.rows(); ++r) {
    const double len = embed.row(r).norm();
    if (len > 0.0) embed.row(r) /= len;
  }
  const auto assign = kmeans(embed, k, options.seed, options.max_iters);
  for (std::size_t r = 0; r < m; ++r) labels[active[r]] = next_label + assign[r];
  return labels;
}

std::vector<std::vector<std::size_t>> extract_groups(const Labeling& labels) {
  std::map<int, std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < labels.size(); ++i) clusters[labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [label, members] : clusters) {
    if (members.size() >= 2) groups.push_back(std::move(members));
  }
  std::sort(groups.begin(), groups.end());
  return groups;
}

}  // namespace grouptr
