#pragma once

// Brute-force references for equivalence testing. Scalar loops only; nothing
// here calls the tensor kernels or the workflow code paths.

#include <cmath>
#include <cstddef>
#include <vector>

#include "flashdp/dpcore.hpp"
#include "flashdp/errors.hpp"
#include "flashdp/tensor.hpp"

namespace flashdp::oracle {

namespace detail {

inline void check_inputs(const Tensor& x, const Tensor& dy) {
  if (x.rank() != 3 || dy.rank() != 3 || x.extent(0) != dy.extent(0) ||
      x.extent(1) != dy.extent(1)) {
    throw ShapeError("oracle: X " + shape_str(x.shape()) + " and dY " + shape_str(dy.shape()) +
                     " must be BxTxP and BxTxD");
  }
}

}  // namespace detail

/// G_b[d][p] = sum_t dY[b][t][d] * X[b][t][p], one tensor per sample.
inline std::vector<Tensor> per_sample_grads_naive(const Tensor& x, const Tensor& dy) {
  detail::check_inputs(x, dy);
  const std::size_t B = x.extent(0), T = x.extent(1), P = x.extent(2), D = dy.extent(2);
  std::vector<Tensor> grads;
  grads.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    Tensor g({D, P});
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t p = 0; p < P; ++p) {
        double acc = 0.0;
        for (std::size_t t = 0; t < T; ++t) acc += dy.at(b, t, d) * x.at(b, t, p);
        g.at(d, p) = acc;
      }
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

inline std::vector<double> per_sample_norms_sq_naive(const Tensor& x, const Tensor& dy) {
  std::vector<double> out;
  for (const auto& g : per_sample_grads_naive(x, dy)) {
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * g[i];
    out.push_back(acc);
  }
  return out;
}

/// Unclipped, noise-free sum of per-sample gradients (the non-private gradient).
inline Tensor nondp_reference(const Tensor& x, const Tensor& dy) {
  const auto grads = per_sample_grads_naive(x, dy);
  Tensor sum(grads.front().shape());
  for (const auto& g : grads)
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
  return sum;
}

/// Per-layer DP-SGD on one linear layer: clip every per-sample gradient by
/// min(1, C/||g||), sum, optionally divide by B, add sigma*C times the keyed
/// Gaussian draw of each element.
inline Tensor dp_backward_reference(const Tensor& x, const Tensor& dy, const DPConfig& cfg) {
  cfg.validate();
  const auto grads = per_sample_grads_naive(x, dy);
  Tensor sum(grads.front().shape());
  for (const auto& g : grads) {
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) norm_sq += g[i] * g[i];
    const double norm = std::sqrt(norm_sq);
    const double factor = (norm_sq > 0.0 && norm > cfg.clip_C) ? cfg.clip_C / norm : 1.0;
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += factor * g[i];
  }
  const double batch = static_cast<double>(grads.size());
  for (std::size_t i = 0; i < sum.size(); ++i) {
    double v = cfg.reduction == Reduction::mean ? sum[i] * (1.0 / batch) : sum[i];
    if (cfg.sigma != 0.0) {
      v += cfg.sigma * cfg.clip_C * keyed_gaussian(cfg.seed, cfg.layer_id, cfg.step, i);
    }
    sum[i] = v;
  }
  return sum;
}

}  // namespace flashdp::oracle
