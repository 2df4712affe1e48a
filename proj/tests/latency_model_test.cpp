// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <vector>

#include "bsim/latency_model.hpp"
#include "bsim/rng.hpp"

namespace bsim {
namespace {

constexpr double kTol = 1e-12;

TEST(Attention, AnchorValues) {
  const LatencyParams p;
  const StepComposition normal{128, 0, 0, 8192};
  const StepComposition mixed{96, 32, 4, 8192};
  EXPECT_NEAR(attention_ms(normal, p, AttentionMode::kUnified), 0.372, kTol);
  EXPECT_NEAR(attention_ms(normal, p, AttentionMode::kBatchSplit), 0.372, kTol);
  EXPECT_NEAR(attention_ms(mixed, p, AttentionMode::kBatchSplit), 0.753 + 0.226, kTol);
  EXPECT_NEAR(attention_ms(mixed, p, AttentionMode::kUnified), 0.380, kTol);
}

TEST(Attention, ScaleAndContextSlope) {
  LatencyParams p;
  p.attention_scale = 28;
  const StepComposition mixed{96, 32, 4, 8192};
  EXPECT_NEAR(attention_ms(mixed, p, AttentionMode::kUnified), 28 * 0.380, 1e-10);
  const StepComposition half{96, 32, 4, 4096};
  EXPECT_NEAR(attention_ms(half, p, AttentionMode::kUnified), 14 * 0.380, 1e-10);
  p.context_slope = 0.0;
  EXPECT_NEAR(attention_ms(half, p, AttentionMode::kUnified), 28 * 0.380, 1e-10);
  EXPECT_EQ(attention_ms(StepComposition{}, p, AttentionMode::kUnified), 0.0);
}

TEST(Attention, UnifiedNeverExceedsSplitWithinDominanceLimit) {
  const LatencyParams p;
  const double limit = unified_dominance_limit(p);
  EXPECT_GT(limit, 900.0);
  Rng rng(2026);
  for (int i = 0; i < 1000; ++i) {
    StepComposition c;
    c.n_normal = static_cast<double>(rng.below(static_cast<std::uint64_t>(limit)));
    c.n_spec = 1 + static_cast<double>(rng.below(256));
    c.drafts = 1 + 15 * rng.uniform();
    c.mean_context = 64 + 16000 * rng.uniform();
    EXPECT_LE(attention_ms(c, p, AttentionMode::kUnified), attention_ms(c, p, AttentionMode::kBatchSplit) + kTol)
        << c.n_normal << " " << c.n_spec << " " << c.drafts;
  }
}

TEST(StepLatency, KneeFloorsTokenWork) {
  LatencyParams p;
  p.token_ms = 0.01;
  p.knee_tokens = 100;
  const StepComposition small{10, 0, 0, 8192};
  const StepComposition spec{10, 10, 4, 8192};
  EXPECT_NEAR(step_breakdown(small, p).token_ms, 1.0, kTol);
  EXPECT_NEAR(step_breakdown(spec, p).token_ms, 1.0, kTol);  // 60 tokens, still under the knee
  const StepComposition big{200, 0, 0, 8192};
  EXPECT_NEAR(step_breakdown(big, p).token_ms, 2.0, kTol);
  EXPECT_EQ(step_breakdown(StepComposition{}, p).total(), 0.0);
}

TEST(StepLatency, ConstantTraceSumsExactly) {
  const LatencyParams p;
  const StepComposition c{64, 0, 0, 1000};
  const std::vector<StepComposition> trace(37, c);
  EXPECT_NEAR(rollout_time(trace, p), 37 * step_latency(c, p) / 1000.0, 1e-15);
}

TEST(LatencyParams, Validation) {
  LatencyParams p;
  EXPECT_NO_THROW(p.validate());
  p.token_ms = -1;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.context_slope = 2;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.ref_spec = 200;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Speedup, WorkedValues) {
  EXPECT_NEAR(speedup(0.568, 0.338), 1.0 - 0.432 * 1.338, 1e-15);
  EXPECT_NEAR(speedup(0.568, 0.338), 0.422, 1e-3);
  EXPECT_DOUBLE_EQ(speedup(0.4, 0.0), 0.4);
  EXPECT_DOUBLE_EQ(speedup(0.0, 0.25), -0.25);
  EXPECT_THROW(speedup(1.5, 0.0), ContractViolation);
  EXPECT_THROW(speedup(0.5, -2.0), ContractViolation);
}

TEST(Speedup, Monotonicity) {
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const double a = rng.uniform(), b = rng.uniform();
    const double mu = 2 * rng.uniform() - 0.9;
    EXPECT_EQ(a <= b, speedup(a, mu) <= speedup(b, mu));
    EXPECT_GE(speedup(0.5, std::min(a, b)), speedup(0.5, std::max(a, b)));
  }
}

TEST(Speedup, MatchesTimeRatioOfTraces) {
  // Baseline: S steps at latency l; speculative: S' steps at latency l'.
  const double s = 1000, s2 = 430, l = 3.1, l2 = 3.5;
  const double alpha = 1 - s2 / s, mu = l2 / l - 1;
  EXPECT_NEAR(1 - (s2 * l2) / (s * l), speedup(alpha, mu), 1e-12);
}

}  // namespace
}  // namespace bsim
