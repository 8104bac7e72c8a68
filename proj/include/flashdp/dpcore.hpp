#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "flashdp/errors.hpp"
#include "flashdp/tensor.hpp"

namespace flashdp {

enum class Reduction { sum, mean };

inline const char* to_string(Reduction r) { return r == Reduction::sum ? "sum" : "mean"; }

/// Per-layer DP parameters for one optimizer step.
struct DPConfig {
  double clip_C = 1.0;
  double sigma = 0.0;
  Reduction reduction = Reduction::sum;
  std::uint64_t seed = 0;
  std::int64_t layer_id = 0;
  std::int64_t step = 0;

  void validate() const {
    if (!(clip_C > 0.0)) throw UsageError("clip_C must be > 0");
    if (!(sigma >= 0.0)) throw UsageError("sigma must be >= 0");
  }
};

/// Scale applied to a per-sample gradient: min(1, C / ||g||). A zero
/// gradient keeps factor 1.
inline double clip_factor(double norm_sq, double clip_C) {
  if (norm_sq <= 0.0) return 1.0;
  const double norm = std::sqrt(norm_sq);
  return norm <= clip_C ? 1.0 : clip_C / norm;
}

namespace detail {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Standard-normal draw keyed by (seed, layer, step, flat element index).
///
/// Construction (frozen): the tuple is folded through the SplitMix64 finalizer
/// into a 64-bit counter h; two further finalizer rounds give u1 in (0, 1] and
/// u2 in [0, 1) from the top 53 bits; the value is the cosine branch of
/// Box-Muller, sqrt(-2 ln u1) * cos(2 pi u2). Only integer mixing decides
/// which uniforms are used, so the draw for an element never depends on how
/// a gradient was tiled.
inline double keyed_gaussian(std::uint64_t seed, std::int64_t layer_id, std::int64_t step,
                             std::uint64_t flat_index) {
  using detail::mix64;
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ static_cast<std::uint64_t>(layer_id));
  h = mix64(h ^ static_cast<std::uint64_t>(step));
  h = mix64(h ^ flat_index);
  const std::uint64_t a = mix64(h ^ 0x5851f42d4c957f2dULL);
  const std::uint64_t b = mix64(h ^ 0x14057b7ef767814fULL);
  constexpr double kInv53 = 1.0 / 9007199254740992.0;  // 2^-53
  const double u1 = static_cast<double>((a >> 11) + 1) * kInv53;
  const double u2 = static_cast<double>(b >> 11) * kInv53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Finalizes a contiguous run of gradient elements whose first flat index is
/// `first_index`: optional 1/B scaling, then sigma*C times the keyed draw.
inline void finalize_span(std::span<double> values, std::size_t first_index, std::size_t batch,
                          const DPConfig& cfg) {
  if (batch == 0) throw UsageError("finalize_gradient: batch size must be >= 1");
  const double scale = cfg.sigma * cfg.clip_C;
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t i = 0; i < values.size(); ++i) {
    double v = cfg.reduction == Reduction::mean ? values[i] * inv_b : values[i];
    if (scale != 0.0) {
      v += scale * keyed_gaussian(cfg.seed, cfg.layer_id, cfg.step, first_index + i);
    }
    values[i] = v;
  }
}

/// Aggregated clipped sum -> noisy layer gradient. One keyed draw per element.
inline Tensor finalize_gradient(Tensor grad_sum, std::size_t batch, const DPConfig& cfg) {
  finalize_span(grad_sum.data(), 0, batch, cfg);
  return grad_sum;
}

/// Per-layer DP-SGD gradient processing on materialized per-sample gradients.
inline Tensor per_layer_process(const std::vector<Tensor>& per_sample_grads, const DPConfig& cfg) {
  if (per_sample_grads.empty()) throw UsageError("per_layer_process: no per-sample gradients");
  const Shape& shape = per_sample_grads.front().shape();
  Tensor sum(shape);
  for (const auto& g : per_sample_grads) {
    if (g.shape() != shape) {
      throw ShapeError("per_layer_process: gradient shapes differ: " + shape_str(shape) + " vs " +
                       shape_str(g.shape()));
    }
    const double factor = clip_factor(frob_norm_sq(g), cfg.clip_C);
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += factor * g[i];
  }
  return finalize_gradient(std::move(sum), per_sample_grads.size(), cfg);
}

/// Sums per-micro-batch clipped sums and adds noise once for the logical batch.
inline Tensor accumulate_micro_batches(const std::vector<Tensor>& partials, std::size_t total_batch,
                                       const DPConfig& cfg) {
  if (partials.empty()) throw UsageError("accumulate_micro_batches: no partial sums");
  Tensor sum(partials.front().shape());
  for (const auto& part : partials) {
    if (part.shape() != sum.shape()) {
      throw ShapeError("accumulate_micro_batches: partial shapes differ: " +
                       shape_str(sum.shape()) + " vs " + shape_str(part.shape()));
    }
    for (std::size_t i = 0; i < part.size(); ++i) sum[i] += part[i];
  }
  return finalize_gradient(std::move(sum), total_batch, cfg);
}

inline Tensor dp_sgd_step(const Tensor& theta, const Tensor& g_tilde, double eta) {
  if (theta.shape() != g_tilde.shape()) {
    throw ShapeError("dp_sgd_step: theta " + shape_str(theta.shape()) + " vs gradient " +
                     shape_str(g_tilde.shape()));
  }
  Tensor out = theta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= eta * g_tilde[i];
  return out;
}

/// Parameters and Adam moments. No bias correction is applied.
struct OptimizerState {
  Tensor theta;
  Tensor m;
  Tensor v;
  double eta = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::int64_t step = 0;

  static OptimizerState zeros_like(const Tensor& theta, double eta, double beta1, double beta2,
                                   double eps_adam) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw UsageError("Adam betas must lie in [0, 1)");
    }
    return OptimizerState{theta, Tensor(theta.shape()), Tensor(theta.shape()), eta, beta1, beta2,
                          eps_adam, 0};
  }
};

/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  theta <- theta - eta/(sqrt(v)+eps) * m.
inline OptimizerState dp_adam_step(OptimizerState state, const Tensor& g_tilde) {
  if (state.theta.shape() != g_tilde.shape() || state.m.shape() != g_tilde.shape() ||
      state.v.shape() != g_tilde.shape()) {
    throw ShapeError("dp_adam_step: state " + shape_str(state.theta.shape()) + " vs gradient " +
                     shape_str(g_tilde.shape()));
  }
  for (std::size_t i = 0; i < g_tilde.size(); ++i) {
    const double g = g_tilde[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double lr = state.eta / (std::sqrt(state.v[i]) + state.eps_adam);
    state.theta[i] -= lr * state.m[i];
  }
  ++state.step;
  return state;
}

}  // namespace flashdp
