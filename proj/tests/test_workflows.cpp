#include <gtest/gtest.h>

#include <random>

#include "flashdp/oracle.hpp"
#include "flashdp/workflows.hpp"
#include "support/instances.hpp"

namespace flashdp {
namespace {

using testing::roomy_spec;
using testing::worked_dy;
using testing::worked_x;

DPConfig worked_cfg() {
  DPConfig cfg;
  cfg.clip_C = 10.0;
  return cfg;
}

TEST(Workflows, ParseNames) {
  for (auto kind : kAllWorkflows) EXPECT_EQ(parse_workflow(to_string(kind)), kind);
  EXPECT_FALSE(parse_workflow("flash_dp").has_value());
}

TEST(Workflows, WorkedPairGradients) {
  const MemSpec spec = roomy_spec();
  EXPECT_EQ(backward_nondp(worked_x(), worked_dy(), spec).grad_w, Tensor::matrix({{13, 16}}));
  for (auto kind : {WorkflowKind::explicit_dp, WorkflowKind::implicit_dp, WorkflowKind::flashdp}) {
    const auto r = run_backward(kind, worked_x(), worked_dy(), worked_cfg(), spec);
    EXPECT_NEAR(r.grad_w.at(0, 0), 10.071067811865476, 1e-12) << to_string(kind);
    EXPECT_NEAR(r.grad_w.at(0, 1), 13.071067811865476, 1e-12) << to_string(kind);
    EXPECT_EQ(r.per_sample_norms_sq, (std::vector<double>{45, 200})) << to_string(kind);
  }
}

TEST(Workflows, WorkedPairTrafficNonDp) {
  const auto r = backward_nondp(worked_x(), worked_dy(), roomy_spec()).report;
  EXPECT_EQ(r.bytes_loaded, 48u);
  EXPECT_EQ(r.bytes_stored, 16u);
  EXPECT_EQ(r.per_sample_grad_bytes_stored, 0u);
  EXPECT_EQ(r.kernel_launches, 1u);
  EXPECT_EQ(r.barriers, 0u);
  EXPECT_EQ(r.flops, 8u);
}

TEST(Workflows, WorkedPairTrafficExplicit) {
  const auto r = backward_explicit(worked_x(), worked_dy(), worked_cfg(), roomy_spec());
  EXPECT_EQ(r.report.bytes_loaded, 160u);
  EXPECT_EQ(r.report.bytes_stored, 96u);
  EXPECT_EQ(r.report.per_sample_grad_bytes_stored, 64u);
  EXPECT_EQ(r.report.kernel_launches, 4u);
  EXPECT_EQ(r.report.redundant_flops, 0u);
  EXPECT_EQ(r.input_bytes_loaded, 48u);
}

TEST(Workflows, WorkedPairTrafficImplicit) {
  const auto r = backward_implicit(worked_x(), worked_dy(), worked_cfg(), roomy_spec());
  EXPECT_EQ(r.input_bytes_loaded, 96u);
  EXPECT_EQ(r.report.bytes_loaded, 112u);
  EXPECT_EQ(r.report.bytes_stored, 32u);
  EXPECT_EQ(r.report.per_sample_grad_bytes_stored, 0u);
  EXPECT_EQ(r.report.redundant_flops, 8u);
  EXPECT_EQ(r.report.kernel_launches, 2u);
}

TEST(Workflows, WorkedPairTrafficFlashDp) {
  const auto r = run_backward(WorkflowKind::flashdp, worked_x(), worked_dy(), worked_cfg(), roomy_spec());
  EXPECT_EQ(r.input_bytes_loaded, 48u);
  EXPECT_EQ(r.report.bytes_loaded, 80u);
  EXPECT_EQ(r.report.bytes_stored, 48u);
  EXPECT_EQ(r.report.per_sample_grad_bytes_stored, 0u);
  EXPECT_EQ(r.report.redundant_flops, 0u);
  EXPECT_EQ(r.report.kernel_launches, 1u);
  EXPECT_EQ(r.report.barriers, 2u);
}

TEST(Workflows, MatchOracleOnRandomInstances) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 300; ++trial) {
    const auto inst = testing::random_instance(rng);
    const Tensor ref = oracle::dp_backward_reference(inst.x, inst.dy, inst.cfg);
    const auto norms = oracle::per_sample_norms_sq_naive(inst.x, inst.dy);
    const auto e = backward_explicit(inst.x, inst.dy, inst.cfg, roomy_spec());
    const auto i = backward_implicit(inst.x, inst.dy, inst.cfg, roomy_spec());
    const auto f = backward_flashdp(inst.x, inst.dy, inst.cfg, inst.plan, roomy_spec());
    EXPECT_LE(max_abs_diff(e.grad_w, ref), 1e-12);
    EXPECT_LE(max_abs_diff(i.grad_w, ref), 1e-12);
    EXPECT_LE(max_abs_diff(f.grad_w, ref), 1e-12);
    for (std::size_t b = 0; b < norms.size(); ++b) {
      EXPECT_NEAR(e.per_sample_norms_sq[b], norms[b], 1e-12 * (1 + norms[b]));
      EXPECT_NEAR(i.per_sample_norms_sq[b], norms[b], 1e-12 * (1 + norms[b]));
      EXPECT_NEAR(f.per_sample_norms_sq[b], norms[b], 1e-12 * (1 + norms[b]));
    }
  }
}

TEST(Workflows, DegenerateToNonDp) {
  std::mt19937_64 rng(102);
  for (int trial = 0; trial < 200; ++trial) {
    auto inst = testing::random_instance(rng);
    inst.cfg.clip_C = 1e9;
    inst.cfg.sigma = 0.0;
    inst.cfg.reduction = Reduction::sum;
    const Tensor base = backward_nondp(inst.x, inst.dy, roomy_spec()).grad_w;
    EXPECT_LE(max_abs_diff(base, oracle::nondp_reference(inst.x, inst.dy)), 1e-12);
    EXPECT_LE(max_abs_diff(backward_explicit(inst.x, inst.dy, inst.cfg, roomy_spec()).grad_w, base), 1e-12);
    EXPECT_LE(max_abs_diff(backward_implicit(inst.x, inst.dy, inst.cfg, roomy_spec()).grad_w, base), 1e-12);
    EXPECT_LE(max_abs_diff(backward_flashdp(inst.x, inst.dy, inst.cfg, inst.plan, roomy_spec()).grad_w, base),
              1e-12);
  }
}

TEST(Workflows, CounterFormulasOnRandomInstances) {
  std::mt19937_64 rng(103);
  for (int trial = 0; trial < 200; ++trial) {
    const auto inst = testing::random_instance(rng);
    const auto [B, T, P, D] = inst.dims;
    const std::uint64_t w = roomy_spec().dtype_width_bytes;
    const std::uint64_t inputs = B * T * (P + D) * w;
    const auto e = backward_explicit(inst.x, inst.dy, inst.cfg, roomy_spec());
    const auto i = backward_implicit(inst.x, inst.dy, inst.cfg, roomy_spec());
    const auto f = backward_flashdp(inst.x, inst.dy, inst.cfg, plan_blocks(inst.dims, roomy_spec()),
                                    roomy_spec());
    EXPECT_EQ(e.report.per_sample_grad_bytes_stored, 2 * B * D * P * w);
    EXPECT_EQ(i.report.per_sample_grad_bytes_stored, 0u);
    EXPECT_EQ(f.report.per_sample_grad_bytes_stored, 0u);
    EXPECT_EQ(i.input_bytes_loaded, 2 * inputs);
    EXPECT_EQ(f.input_bytes_loaded, inputs);
    EXPECT_EQ(i.report.redundant_flops, 2 * B * T * D * P);
    EXPECT_EQ(f.report.redundant_flops, 0u);
    EXPECT_EQ(e.report.redundant_flops, 0u);
  }
}

TEST(Workflows, InputsReReadOncePerTiledDimension) {
  std::mt19937_64 rng(104);
  const LayerDims dims{2, 4, 8, 8};
  const Tensor x = bench::random_tensor({2, 4, 8}, rng);
  const Tensor dy = bench::random_tensor({2, 4, 8}, rng);
  const auto plan = make_plan(dims, 1, 2, 4, 2);  // n_d = 2, n_p = 4
  const auto r = backward_flashdp(x, dy, DPConfig{}, plan, roomy_spec());
  EXPECT_EQ(r.input_bytes_loaded, (2u * 4 * 8 * 2 + 2u * 4 * 8 * 4) * 8);
}

TEST(Workflows, TilingInvarianceAcrossCapacities) {
  std::mt19937_64 rng(105);
  const LayerDims dims{2, 4, 8, 8};
  const Tensor x = bench::random_tensor({2, 4, 8}, rng);
  const Tensor dy = bench::random_tensor({2, 4, 8}, rng);
  DPConfig cfg;
  cfg.clip_C = 0.5;
  cfg.sigma = 1.0;
  cfg.seed = 3;
  std::optional<Tensor> first;
  for (std::size_t elements : {4u, 16u, 128u, 256u, 1024u}) {
    const MemSpec spec{elements * 8, 8};
    const auto plan = plan_blocks(dims, spec);
    const auto r = backward_flashdp(x, dy, cfg, plan, spec);
    EXPECT_LE(r.report.peak_scratch_bytes, spec.scratchpad_capacity_bytes);
    if (!first) first = r.grad_w;
    EXPECT_LE(max_abs_diff(r.grad_w, *first), 1e-12) << "M = " << elements;
  }
}

TEST(Workflows, HalvedPlanCounters) {
  std::mt19937_64 rng(106);
  const LayerDims dims{2, 4, 8, 8};
  const MemSpec spec{128 * 8, 8};
  const auto plan = plan_blocks(dims, spec);
  ASSERT_EQ(plan.n_d, 2u);
  const auto r = backward_flashdp(bench::random_tensor({2, 4, 8}, rng), bench::random_tensor({2, 4, 8}, rng),
                                  DPConfig{}, plan, spec);
  EXPECT_EQ(r.report.kernel_launches, plan.n_b);
  EXPECT_EQ(r.report.barriers, plan.n_b + 1);
  EXPECT_LE(r.report.peak_scratch_bytes, 128u * 8);
}

TEST(Workflows, MissingBarrierFaults) {
  std::mt19937_64 rng(107);
  const LayerDims dims{2, 4, 8, 8};
  const Tensor x = bench::random_tensor({2, 4, 8}, rng);
  const Tensor dy = bench::random_tensor({2, 4, 8}, rng);
  const auto plan = make_plan(dims, 2, 4, 4, 4);
  ASSERT_GT(plan.block_count(), 1u);
  EXPECT_THROW(backward_flashdp(x, dy, DPConfig{}, plan, roomy_spec(), FlashDpOptions{true}), OrderingFault);
  EXPECT_NO_THROW(backward_flashdp(x, dy, DPConfig{}, plan, roomy_spec()));
}

TEST(Workflows, OversizedPlanRaisesCapacityError) {
  std::mt19937_64 rng(108);
  const LayerDims dims{2, 4, 8, 8};
  const MemSpec spec{64 * 8, 8};
  const auto plan = make_plan(dims, 2, 4, 8, 8);
  ASSERT_GT(footprint(plan), 64u);
  EXPECT_THROW(backward_flashdp(bench::random_tensor({2, 4, 8}, rng), bench::random_tensor({2, 4, 8}, rng),
                                DPConfig{}, plan, spec),
               CapacityError);
}

TEST(Workflows, MismatchedPlanIsUsageError) {
  const auto plan = make_plan(LayerDims{4, 1, 2, 1}, 2, 1, 1, 2);
  EXPECT_THROW(backward_flashdp(worked_x(), worked_dy(), DPConfig{}, plan, roomy_spec()), UsageError);
}

TEST(Workflows, ShapeErrors) {
  EXPECT_THROW(backward_nondp(Tensor({2, 1, 2}), Tensor({2, 2, 1}), roomy_spec()), ShapeError);
  EXPECT_THROW(backward_explicit(Tensor({2, 2}), Tensor({2, 1}), DPConfig{}, roomy_spec()), ShapeError);
}

TEST(Workflows, NonFusedCapacityError) {
  // Stage 2 of implicit holds B + 2DP + P + D = 9 elements; only 7 fit.
  EXPECT_THROW(backward_implicit(worked_x(), worked_dy(), worked_cfg(), MemSpec{7 * 8, 8}), CapacityError);
}

}  // namespace
}  // namespace flashdp
