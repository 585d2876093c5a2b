#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "maso/config.hpp"
#include "maso/policy.hpp"
#include "maso/rng.hpp"

namespace maso::testing {

inline std::string config_path(const std::string& name) {
  return std::string(MASO_CONFIG_DIR) + "/" + name;
}

inline RunConfig load_config(const std::string& name) { return load_run_config(config_path(name)); }

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("maso_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline void randomize(Params& p, Rng& rng, double scale) {
  for (double& x : p.policy) x = scale * (2.0 * rng.uniform() - 1.0);
  for (double& x : p.value) x = scale * (2.0 * rng.uniform() - 1.0);
}

// |a - b| relative to the larger magnitude. Pairs that are both below `floor`
// are compared absolutely against it, so exact zeros compare as equal.
inline double relative_error(double a, double b, double floor = 1e-9) {
  return std::abs(a - b) / std::max({floor, std::abs(a), std::abs(b)});
}

}  // namespace maso::testing
