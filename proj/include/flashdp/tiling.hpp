#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "flashdp/errors.hpp"
#include "flashdp/memmodel.hpp"
#include "json.hpp"

namespace flashdp {

/// Linear layer extents: batch, sequence, input features, output features.
struct LayerDims {
  std::size_t B = 1;
  std::size_t T = 1;
  std::size_t P = 1;
  std::size_t D = 1;

  void validate() const {
    if (B == 0 || T == 0 || P == 0 || D == 0) {
      throw UsageError("layer dims must all be >= 1");
    }
  }

  bool operator==(const LayerDims&) const = default;
};

inline constexpr std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Tile extents of one FlashDP block plus the number of tiles per axis.
struct BlockPlan {
  std::size_t b = 1, t = 1, d = 1, p = 1;
  std::size_t n_b = 1, n_t = 1, n_d = 1, n_p = 1;

  /// Number of (i_p, i_d, i_b) kernel blocks. t-tiles are iterated inside a block.
  std::size_t block_count() const { return n_b * n_d * n_p; }

  bool operator==(const BlockPlan&) const = default;
};

/// Resident elements of one block: X tile, dY tile, per-sample gradient
/// tile and the b norm-square accumulators.
inline constexpr std::size_t footprint(std::size_t b, std::size_t t, std::size_t d, std::size_t p) {
  return b * t * p + b * t * d + b * d * p + b;
}

inline std::size_t footprint(const BlockPlan& plan) {
  return footprint(plan.b, plan.t, plan.d, plan.p);
}

/// Plan with explicit tile extents; counts derived from `dims`.
inline BlockPlan make_plan(const LayerDims& dims, std::size_t b, std::size_t t, std::size_t d,
                           std::size_t p) {
  dims.validate();
  if (b < 1 || b > dims.B || t < 1 || t > dims.T || d < 1 || d > dims.D || p < 1 || p > dims.P) {
    throw UsageError("tile extents (" + std::to_string(b) + "," + std::to_string(t) + "," +
                     std::to_string(d) + "," + std::to_string(p) +
                     ") out of range for layer dims (B=" + std::to_string(dims.B) +
                     ",T=" + std::to_string(dims.T) + ",P=" + std::to_string(dims.P) +
                     ",D=" + std::to_string(dims.D) + ")");
  }
  return BlockPlan{b, t, d, p, ceil_div(dims.B, b), ceil_div(dims.T, t), ceil_div(dims.D, d),
                   ceil_div(dims.P, p)};
}

/// True when the plan's extents are in range for `dims`, its counts match,
/// and its block footprint fits the scratchpad.
inline bool plan_is_valid(const BlockPlan& plan, const LayerDims& dims, const MemSpec& spec) {
  if (plan.b < 1 || plan.b > dims.B || plan.t < 1 || plan.t > dims.T || plan.d < 1 ||
      plan.d > dims.D || plan.p < 1 || plan.p > dims.P) {
    return false;
  }
  if (plan.n_b != ceil_div(dims.B, plan.b) || plan.n_t != ceil_div(dims.T, plan.t) ||
      plan.n_d != ceil_div(dims.D, plan.d) || plan.n_p != ceil_div(dims.P, plan.p)) {
    return false;
  }
  return footprint(plan) * spec.dtype_width_bytes <= spec.scratchpad_capacity_bytes;
}

namespace detail {

// One step of the halving chain. Each of the three tile addends names the
// dims it contains; the dim to halve is taken from the largest addend(s),
// skipping extents already at 1, preferring t, then d, then p, then b.
inline bool halve_once(std::size_t& b, std::size_t& t, std::size_t& d, std::size_t& p) {
  const std::size_t x_tile = b * t * p;
  const std::size_t dy_tile = b * t * d;
  const std::size_t g_tile = b * d * p;
  const std::size_t largest = std::max({x_tile, dy_tile, g_tile});

  // Membership flags in preference order t, d, p, b.
  std::array<bool, 4> eligible{false, false, false, false};
  auto mark = [&](bool has_t, bool has_d, bool has_p) {
    eligible[0] = eligible[0] || has_t;
    eligible[1] = eligible[1] || has_d;
    eligible[2] = eligible[2] || has_p;
    eligible[3] = true;
  };
  if (x_tile == largest) mark(true, false, true);
  if (dy_tile == largest) mark(true, true, false);
  if (g_tile == largest) mark(false, true, true);

  std::array<std::size_t*, 4> dims{&t, &d, &p, &b};
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (eligible[i] && *dims[i] > 1) {
      *dims[i] = ceil_div(*dims[i], 2);
      return true;
    }
  }
  // Only reachable at (1,1,1,1): the largest addend always contains b.
  return false;
}

}  // namespace detail

/// Deterministic block plan: starts from the whole layer and ceiling-halves
/// one tile dimension at a time until the block footprint fits the scratchpad.
inline BlockPlan plan_blocks(const LayerDims& dims, const MemSpec& spec) {
  dims.validate();
  spec.validate();
  const std::size_t width = spec.dtype_width_bytes;
  const std::size_t capacity = spec.scratchpad_capacity_bytes;
  if (footprint(1, 1, 1, 1) * width > capacity) {
    throw InfeasiblePlan("scratchpad of " + std::to_string(capacity) +
                         " bytes cannot hold the minimal block footprint of " +
                         std::to_string(footprint(1, 1, 1, 1) * width) + " bytes");
  }
  std::size_t b = dims.B, t = dims.T, d = dims.D, p = dims.P;
  while (footprint(b, t, d, p) * width > capacity) {
    if (!detail::halve_once(b, t, d, p)) break;
  }
  BlockPlan plan = make_plan(dims, b, t, d, p);
  if (footprint(plan) * width > capacity) {
    throw InfeasiblePlan("plan_blocks failed to reach a feasible plan");
  }
  return plan;
}

inline nlohmann::ordered_json to_json(const BlockPlan& plan) {
  nlohmann::ordered_json j;
  j["b"] = plan.b;
  j["t"] = plan.t;
  j["d"] = plan.d;
  j["p"] = plan.p;
  j["n_b"] = plan.n_b;
  j["n_t"] = plan.n_t;
  j["n_d"] = plan.n_d;
  j["n_p"] = plan.n_p;
  return j;
}

}  // namespace flashdp
