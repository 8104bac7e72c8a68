#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flashdp/dpcore.hpp"
#include "flashdp/errors.hpp"
#include "flashdp/memmodel.hpp"
#include "flashdp/tensor.hpp"
#include "flashdp/tiling.hpp"

namespace flashdp {

enum class WorkflowKind { non_dp, explicit_dp, implicit_dp, flashdp };

inline constexpr WorkflowKind kAllWorkflows[] = {WorkflowKind::non_dp, WorkflowKind::explicit_dp,
                                                 WorkflowKind::implicit_dp, WorkflowKind::flashdp};

inline const char* to_string(WorkflowKind kind) {
  switch (kind) {
    case WorkflowKind::non_dp: return "non_dp";
    case WorkflowKind::explicit_dp: return "explicit_dp";
    case WorkflowKind::implicit_dp: return "implicit_dp";
    case WorkflowKind::flashdp: return "flashdp";
  }
  return "?";
}

inline std::optional<WorkflowKind> parse_workflow(std::string_view name) {
  for (auto kind : kAllWorkflows) {
    if (name == to_string(kind)) return kind;
  }
  return std::nullopt;
}

inline bool is_private(WorkflowKind kind) { return kind != WorkflowKind::non_dp; }

struct BackwardResult {
  Tensor grad_w;
  TrafficReport report;
  std::vector<double> per_sample_norms_sq;  // empty for non_dp
  std::uint64_t input_bytes_loaded = 0;     // bytes loaded from X and dY only
};

namespace detail {

inline LayerDims layer_dims_of(const Tensor& x, const Tensor& dy) {
  if (x.rank() != 3 || dy.rank() != 3) {
    throw ShapeError("backward expects X (BxTxP) and dY (BxTxD), got " + shape_str(x.shape()) +
                     " and " + shape_str(dy.shape()));
  }
  if (x.extent(0) != dy.extent(0) || x.extent(1) != dy.extent(1)) {
    throw ShapeError("backward: X " + shape_str(x.shape()) + " and dY " + shape_str(dy.shape()) +
                     " disagree on B or T");
  }
  return LayerDims{x.extent(0), x.extent(1), x.extent(2), dy.extent(2)};
}

// Main-memory image of one backward pass: the two inputs and the output.
struct LayerRegions {
  RegionId x, dy, grad_w;
};

inline LayerRegions upload_layer(MemSim& sim, const Tensor& x, const Tensor& dy,
                                 const LayerDims& dims) {
  return {sim.upload_main(x.data()), sim.upload_main(dy.data()), sim.alloc_main(dims.D * dims.P)};
}

// Streams the T rows of sample b through scratch and accumulates
// g[d][p] += dY[t][d] * X[t][p], t ascending.
inline void accumulate_sample_rows(MemSim& sim, const LayerRegions& io, const LayerDims& dims,
                                   std::size_t b, RegionId g, bool redundant) {
  for (std::size_t t = 0; t < dims.T; ++t) {
    const std::size_t row = b * dims.T + t;
    const RegionId xr = sim.load_to_scratch(io.x, dims.P, row * dims.P);
    const RegionId yr = sim.load_to_scratch(io.dy, dims.D, row * dims.D);
    auto xs = sim.scratch(xr);
    auto ys = sim.scratch(yr);
    auto acc = sim.scratch(g);
    for (std::size_t d = 0; d < dims.D; ++d)
      for (std::size_t p = 0; p < dims.P; ++p) acc[d * dims.P + p] += ys[d] * xs[p];
    sim.free_scratch(xr);
    sim.free_scratch(yr);
  }
  sim.record_flops(2 * dims.T * dims.D * dims.P, redundant);
}

inline BackwardResult collect(const MemSim& sim, const LayerRegions& io, const LayerDims& dims) {
  BackwardResult out;
  const auto w = sim.main_data(io.grad_w);
  out.grad_w = Tensor({dims.D, dims.P}, std::vector<double>(w.begin(), w.end()));
  out.report = sim.report();
  out.input_bytes_loaded = sim.bytes_loaded_from(io.x) + sim.bytes_loaded_from(io.dy);
  return out;
}

}  // namespace detail

/// Non-private weight gradient: one kernel streams every (b, t) row once and
/// accumulates dY^T X into a resident DxP tile. No per-sample state.
inline BackwardResult backward_nondp(const Tensor& x, const Tensor& dy, const MemSpec& spec) {
  const LayerDims dims = detail::layer_dims_of(x, dy);
  MemSim sim(spec);
  const auto io = detail::upload_layer(sim, x, dy, dims);
  {
    auto kernel = sim.begin_kernel();
    const RegionId acc = sim.alloc_scratch(dims.D * dims.P);
    for (std::size_t b = 0; b < dims.B; ++b) detail::accumulate_sample_rows(sim, io, dims, b, acc, false);
    sim.store_to_main(acc, io.grad_w, dims.D * dims.P, StoreTag::plain);
  }
  return detail::collect(sim, io, dims);
}

/// Materializing DP workflow in four kernels:
///   1. per-sample gradients G -> main memory
///   2. G -> per-sample squared norms -> main memory
///   3. G + norms -> clipped G' -> main memory
///   4. G' -> sum, noise -> grad_w
inline BackwardResult backward_explicit(const Tensor& x, const Tensor& dy, const DPConfig& cfg,
                                        const MemSpec& spec) {
  cfg.validate();
  const LayerDims dims = detail::layer_dims_of(x, dy);
  const std::size_t dp = dims.D * dims.P;
  MemSim sim(spec);
  const auto io = detail::upload_layer(sim, x, dy, dims);
  const RegionId grads = sim.alloc_main(dims.B * dp);
  const RegionId clipped = sim.alloc_main(dims.B * dp);
  const RegionId norms = sim.alloc_main(dims.B);

  {
    auto kernel = sim.begin_kernel();
    for (std::size_t b = 0; b < dims.B; ++b) {
      const RegionId g = sim.alloc_scratch(dp);
      detail::accumulate_sample_rows(sim, io, dims, b, g, false);
      sim.store_to_main(g, grads, dp, StoreTag::per_sample_grad, b * dp);
      sim.free_scratch(g);
    }
  }
  {
    auto kernel = sim.begin_kernel();
    const RegionId ns = sim.alloc_scratch(dims.B);
    for (std::size_t b = 0; b < dims.B; ++b) {
      double acc = 0.0;
      for (std::size_t d = 0; d < dims.D; ++d) {
        const RegionId row = sim.load_to_scratch(grads, dims.P, b * dp + d * dims.P);
        for (double v : sim.scratch(row)) acc += v * v;
        sim.free_scratch(row);
      }
      sim.scratch(ns)[b] = acc;
      sim.record_flops(2 * dp);
    }
    sim.store_to_main(ns, norms, dims.B, StoreTag::plain);
  }
  {
    auto kernel = sim.begin_kernel();
    const RegionId ns = sim.load_to_scratch(norms, dims.B);
    for (std::size_t b = 0; b < dims.B; ++b) {
      const double factor = clip_factor(sim.scratch(ns)[b], cfg.clip_C);
      for (std::size_t d = 0; d < dims.D; ++d) {
        const std::size_t offset = b * dp + d * dims.P;
        const RegionId row = sim.load_to_scratch(grads, dims.P, offset);
        for (double& v : sim.scratch(row)) v = factor * v;
        sim.store_to_main(row, clipped, dims.P, StoreTag::per_sample_grad, offset);
        sim.free_scratch(row);
      }
      sim.record_flops(dp);
    }
  }
  {
    auto kernel = sim.begin_kernel();
    const RegionId acc = sim.alloc_scratch(dp);
    for (std::size_t b = 0; b < dims.B; ++b) {
      for (std::size_t d = 0; d < dims.D; ++d) {
        const RegionId row = sim.load_to_scratch(clipped, dims.P, b * dp + d * dims.P);
        auto src = sim.scratch(row);
        auto dst = sim.scratch(acc);
        for (std::size_t p = 0; p < dims.P; ++p) dst[d * dims.P + p] += src[p];
        sim.free_scratch(row);
      }
      sim.record_flops(dp);
    }
    finalize_span(sim.scratch(acc), 0, dims.B, cfg);
    sim.record_flops(dp);
    sim.store_to_main(acc, io.grad_w, dp, StoreTag::plain);
  }

  auto out = detail::collect(sim, io, dims);
  const auto n = sim.main_data(norms);
  out.per_sample_norms_sq.assign(n.begin(), n.end());
  return out;
}

/// Recomputation-based DP workflow (ghost clipping) in two kernels:
///   1. per-sample gradient built on chip, reduced to its squared norm and
///      discarded; norms -> main memory
///   2. per-sample gradient recomputed from X and dY, clipped, summed, noised
inline BackwardResult backward_implicit(const Tensor& x, const Tensor& dy, const DPConfig& cfg,
                                        const MemSpec& spec) {
  cfg.validate();
  const LayerDims dims = detail::layer_dims_of(x, dy);
  const std::size_t dp = dims.D * dims.P;
  MemSim sim(spec);
  const auto io = detail::upload_layer(sim, x, dy, dims);
  const RegionId norms = sim.alloc_main(dims.B);

  {
    auto kernel = sim.begin_kernel();
    const RegionId ns = sim.alloc_scratch(dims.B);
    for (std::size_t b = 0; b < dims.B; ++b) {
      const RegionId g = sim.alloc_scratch(dp);
      detail::accumulate_sample_rows(sim, io, dims, b, g, false);
      sim.scratch(ns)[b] = frob_norm_sq(sim.scratch(g));
      sim.record_flops(2 * dp);
      sim.free_scratch(g);
    }
    sim.store_to_main(ns, norms, dims.B, StoreTag::plain);
  }
  {
    auto kernel = sim.begin_kernel();
    const RegionId ns = sim.load_to_scratch(norms, dims.B);
    const RegionId acc = sim.alloc_scratch(dp);
    for (std::size_t b = 0; b < dims.B; ++b) {
      const RegionId g = sim.alloc_scratch(dp);
      detail::accumulate_sample_rows(sim, io, dims, b, g, /*redundant=*/true);
      const double factor = clip_factor(sim.scratch(ns)[b], cfg.clip_C);
      auto src = sim.scratch(g);
      auto dst = sim.scratch(acc);
      for (std::size_t i = 0; i < dp; ++i) dst[i] += factor * src[i];
      sim.record_flops(2 * dp);
      sim.free_scratch(g);
    }
    finalize_span(sim.scratch(acc), 0, dims.B, cfg);
    sim.record_flops(dp);
    sim.store_to_main(acc, io.grad_w, dp, StoreTag::plain);
  }

  auto out = detail::collect(sim, io, dims);
  const auto n = sim.main_data(norms);
  out.per_sample_norms_sq.assign(n.begin(), n.end());
  return out;
}

/// Fault-injection switches for regression tests of the fused kernel.
struct FlashDpOptions {
  bool skip_norm_barrier = false;
};

/// Fused block-wise all-reduce workflow.
///
/// One kernel per batch chunk i_b. Every (i_p, i_d) block of the chunk builds
/// its per-sample gradient tile on chip (accumulating over t-tiles), reduces
/// it to b partial squared norms, and adds them atomically into a main-memory
/// norm accumulator. After the barrier each block reloads the complete
/// squared norms, clips its still-resident tile, sums it over the chunk's
/// samples and atomically adds the result into the grad_w accumulator. The
/// last kernel synchronizes once more and applies the per-layer noise while
/// streaming the accumulator out. X and dY tiles are read once per block, so
/// the inputs are read exactly once whenever n_d == n_p == 1.
inline BackwardResult backward_flashdp(const Tensor& x, const Tensor& dy, const DPConfig& cfg,
                                       const BlockPlan& plan, const MemSpec& spec,
                                       FlashDpOptions options = {}) {
  cfg.validate();
  const LayerDims dims = detail::layer_dims_of(x, dy);
  if (plan.b < 1 || plan.b > dims.B || plan.t < 1 || plan.t > dims.T || plan.d < 1 ||
      plan.d > dims.D || plan.p < 1 || plan.p > dims.P || plan.n_b != ceil_div(dims.B, plan.b) ||
      plan.n_t != ceil_div(dims.T, plan.t) || plan.n_d != ceil_div(dims.D, plan.d) ||
      plan.n_p != ceil_div(dims.P, plan.p)) {
    throw UsageError("backward_flashdp: block plan does not match layer dims");
  }
  const std::size_t dp = dims.D * dims.P;
  MemSim sim(spec);
  const auto io = detail::upload_layer(sim, x, dy, dims);
  const RegionId norms = sim.alloc_main(dims.B);
  const RegionId grad_acc = sim.alloc_main(dp);

  struct Tile {
    std::size_t block, d0, dn, p0, pn;
    RegionId g;
  };
  std::vector<std::size_t> x_idx, dy_idx, w_idx;

  for (std::size_t ib = 0; ib < plan.n_b; ++ib) {
    const std::size_t b0 = ib * plan.b;
    const std::size_t bn = std::min(plan.b, dims.B - b0);
    auto kernel = sim.begin_kernel();
    std::vector<Tile> tiles;
    tiles.reserve(plan.n_p * plan.n_d);

    // Per-sample gradient tiles and intra-block norm reduction.
    for (std::size_t ip = 0; ip < plan.n_p; ++ip) {
      for (std::size_t id = 0; id < plan.n_d; ++id) {
        Tile tile{ip * plan.n_d + id, id * plan.d, 0, ip * plan.p, 0, {}};
        tile.dn = std::min(plan.d, dims.D - tile.d0);
        tile.pn = std::min(plan.p, dims.P - tile.p0);
        sim.select_block(tile.block);
        const RegionId ns = sim.alloc_scratch(bn);
        tile.g = sim.alloc_scratch(bn * tile.dn * tile.pn);

        for (std::size_t it = 0; it < plan.n_t; ++it) {
          const std::size_t t0 = it * plan.t;
          const std::size_t tn = std::min(plan.t, dims.T - t0);
          x_idx.clear();
          dy_idx.clear();
          for (std::size_t bb = 0; bb < bn; ++bb) {
            for (std::size_t tt = 0; tt < tn; ++tt) {
              const std::size_t row = (b0 + bb) * dims.T + t0 + tt;
              for (std::size_t pp = 0; pp < tile.pn; ++pp) x_idx.push_back(row * dims.P + tile.p0 + pp);
              for (std::size_t dd = 0; dd < tile.dn; ++dd) dy_idx.push_back(row * dims.D + tile.d0 + dd);
            }
          }
          const RegionId xr = sim.gather_to_scratch(io.x, x_idx);
          const RegionId yr = sim.gather_to_scratch(io.dy, dy_idx);
          auto xs = sim.scratch(xr);
          auto ys = sim.scratch(yr);
          auto g = sim.scratch(tile.g);
          for (std::size_t bb = 0; bb < bn; ++bb)
            for (std::size_t tt = 0; tt < tn; ++tt)
              for (std::size_t dd = 0; dd < tile.dn; ++dd) {
                const double yv = ys[(bb * tn + tt) * tile.dn + dd];
                for (std::size_t pp = 0; pp < tile.pn; ++pp)
                  g[(bb * tile.dn + dd) * tile.pn + pp] += yv * xs[(bb * tn + tt) * tile.pn + pp];
              }
          sim.record_flops(2 * bn * tn * tile.dn * tile.pn);
          sim.free_scratch(xr);
          sim.free_scratch(yr);
        }

        const std::size_t slice = tile.dn * tile.pn;
        auto g = sim.scratch(tile.g);
        auto partial = sim.scratch(ns);
        for (std::size_t bb = 0; bb < bn; ++bb) partial[bb] = frob_norm_sq(g.subspan(bb * slice, slice));
        sim.record_flops(2 * bn * slice);
        sim.atomic_accumulate(norms, partial, b0);
        sim.free_scratch(ns);
        tiles.push_back(tile);
      }
    }

    if (!options.skip_norm_barrier) sim.barrier();

    // Clip with the all-reduced norms and fold the chunk into grad_w.
    for (const Tile& tile : tiles) {
      sim.select_block(tile.block);
      const RegionId ns = sim.load_to_scratch(norms, bn, b0);
      const std::size_t slice = tile.dn * tile.pn;
      auto g = sim.scratch(tile.g);
      auto full_norms = sim.scratch(ns);
      for (std::size_t bb = 0; bb < bn; ++bb) {
        const double factor = clip_factor(full_norms[bb], cfg.clip_C);
        for (double& v : g.subspan(bb * slice, slice)) v = factor * v;
      }
      for (std::size_t bb = 1; bb < bn; ++bb)
        for (std::size_t i = 0; i < slice; ++i) g[i] += g[bb * slice + i];
      sim.record_flops(bn * slice + (bn - 1) * slice);

      w_idx.clear();
      for (std::size_t dd = 0; dd < tile.dn; ++dd)
        for (std::size_t pp = 0; pp < tile.pn; ++pp) w_idx.push_back((tile.d0 + dd) * dims.P + tile.p0 + pp);
      sim.atomic_accumulate_at(grad_acc, w_idx, g.first(slice));
      sim.free_scratch(ns);
      sim.free_scratch(tile.g);
    }

    if (ib + 1 == plan.n_b) {
      // Noise once per layer, streamed in scratch-sized pieces.
      sim.barrier();
      sim.select_block(0);
      const std::size_t piece = std::min(dp, spec.capacity_elements());
      for (std::size_t off = 0; off < dp; off += piece) {
        const std::size_t n = std::min(piece, dp - off);
        const RegionId r = sim.load_to_scratch(grad_acc, n, off);
        finalize_span(sim.scratch(r), off, dims.B, cfg);
        sim.record_flops(n);
        sim.store_to_main(r, io.grad_w, n, StoreTag::plain, off);
        sim.free_scratch(r);
      }
    }
  }

  auto out = detail::collect(sim, io, dims);
  const auto n = sim.main_data(norms);
  out.per_sample_norms_sq.assign(n.begin(), n.end());
  return out;
}

/// Runs one workflow; flashdp uses `plan` or, when absent, plan_blocks().
inline BackwardResult run_backward(WorkflowKind kind, const Tensor& x, const Tensor& dy,
                                   const DPConfig& cfg, const MemSpec& spec,
                                   std::optional<BlockPlan> plan = std::nullopt) {
  switch (kind) {
    case WorkflowKind::non_dp: return backward_nondp(x, dy, spec);
    case WorkflowKind::explicit_dp: return backward_explicit(x, dy, cfg, spec);
    case WorkflowKind::implicit_dp: return backward_implicit(x, dy, cfg, spec);
    case WorkflowKind::flashdp: {
      const BlockPlan chosen = plan ? *plan : plan_blocks(detail::layer_dims_of(x, dy), spec);
      return backward_flashdp(x, dy, cfg, chosen, spec);
    }
  }
  throw UsageError("unknown workflow kind");
}

}  // namespace flashdp
