#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace maso {

inline constexpr std::string_view kVersion = "0.1.0";

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;
using RoleId = std::string;
using ModelId = std::string;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed run configuration, graph, or mapping.
struct ConfigError : Error {
  using Error::Error;
};

// A fragment reached a buffer that does not serve its role.
struct RoutingError : Error {
  using Error::Error;
};

// Caller broke an operation precondition.
struct ContractError : Error {
  using Error::Error;
};

// Non-finite values in parameters, logits or losses.
struct DivergenceError : Error {
  using Error::Error;
};

// A tool node failed while executing a trajectory.
struct ToolError : Error {
  using Error::Error;
};

// Quality scores (answer F1, verifier pass rates) are kept on a 2^-40 grid.
// Differences of grid values and sums of those differences are then exact in
// double precision, so delta rewards telescope bit for bit.
inline double canonical_score(double x) { return std::ldexp(std::nearbyint(std::ldexp(x, 40)), -40); }

// 64-bit FNV-1a over token ids, stable across platforms.
inline std::uint64_t digest(const Tokens& tokens) {
  std::uint64_t h = 1469598103934665603ull;
  for (TokenId t : tokens) {
    for (int b = 0; b < 4; ++b) {
      h ^= (t >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace maso
