#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "grouptr/model.hpp"

namespace grouptr {

inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kModelGradTolerance = 1e-3;

struct GradCheckResult {
  std::string name;
  std::size_t seed = 0;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return error < tolerance; }
};

// D_app 8, conv channels 4/4/8, width 8, two heads.
ModelConfig tiny_model_config();

// Central-difference checks of every differentiable op and of the composed
// model (N=3, T=4), each over `seeds` seeds. `report` sees each result as it
// completes.
std::vector<GradCheckResult> run_gradcheck_suite(
    std::size_t seeds, const std::function<void(const GradCheckResult&)>& report = {});

}  // namespace grouptr
