// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bsim/metrics.hpp"

namespace bsim {
namespace {

StepRecord verification(std::uint16_t proposed, std::uint16_t accepted, bool extra) {
  StepRecord s;
  s.proposed = proposed;
  s.accepted = accepted;
  s.extra = extra;
  s.emitted = static_cast<std::uint16_t>(accepted + (extra ? 1 : 0));
  return s;
}

StepRecord fallback() {
  StepRecord s;
  s.emitted = 1;
  s.extra = true;
  return s;
}

RolloutResult request_of(std::vector<StepRecord> steps) {
  RolloutResult r;
  for (const auto& s : steps) r.response.insert(r.response.end(), s.emitted, 1);
  r.steps = std::move(steps);
  return r;
}

StepTiming timing(double rollout_ms) { return {0, "bubblespec", 0, rollout_ms, rollout_ms}; }

TEST(Aggregate, HandBuiltTrace) {
  const std::vector<RolloutResult> reqs{
      request_of({verification(4, 1, true), verification(4, 2, true), verification(2, 0, true)})};
  const auto r = aggregate(reqs, {}, timing(30), 4);
  ASSERT_TRUE(r.acceptance_length && r.draft_length && r.acceptance_rate);
  EXPECT_DOUBLE_EQ(*r.acceptance_length, 2.0);
  EXPECT_DOUBLE_EQ(*r.draft_length, 10.0 / 3.0);
  EXPECT_DOUBLE_EQ(*r.acceptance_rate, 3.0 / 10.0);
  EXPECT_EQ(r.streaks.counts, (std::vector<std::size_t>{1, 1, 1, 0, 0}));
  EXPECT_TRUE(check_identities(r).empty());
}

TEST(Aggregate, PinnedRowIsInternallyConsistent) {
  const auto rate = acceptance_rate_from(2.15, 3.84);
  ASSERT_TRUE(rate);
  EXPECT_NEAR(*rate, 0.2995, 5e-5);
  EXPECT_FALSE(acceptance_rate_from(2.0, 0.0));
}

TEST(Aggregate, FallbackStepsCountOnlyAsDecodingSteps) {
  const std::vector<RolloutResult> reqs{request_of({fallback(), verification(4, 4, true), fallback()})};
  const auto r = aggregate(reqs, {}, timing(30), 4);
  EXPECT_EQ(r.decoding_steps_avg, 3.0);
  EXPECT_EQ(r.fallback_steps, 2u);
  EXPECT_DOUBLE_EQ(*r.acceptance_length, 5.0);
  EXPECT_EQ(r.streaks.counts.back(), 1u);
  EXPECT_TRUE(check_identities(r).empty());
}

TEST(Aggregate, NoSpeculationFlagsAndStepsEqualLength) {
  const std::vector<RolloutResult> reqs{request_of({fallback(), fallback()}), request_of({fallback()})};
  const auto r = aggregate(reqs, {}, timing(12), 4);
  EXPECT_FALSE(r.acceptance_rate);
  EXPECT_FALSE(r.acceptance_length);
  EXPECT_NE(std::find(r.flags.begin(), r.flags.end(), "no_verification_steps"), r.flags.end());
  EXPECT_EQ(r.decoding_steps_avg, r.response_length_avg);
  EXPECT_TRUE(check_identities(r).empty());
}

TEST(Aggregate, EmptyTraceIsFlaggedNotNan) {
  const auto r = aggregate({}, {}, timing(0), 4);
  EXPECT_NE(std::find(r.flags.begin(), r.flags.end(), "empty_trace"), r.flags.end());
  EXPECT_NE(std::find(r.flags.begin(), r.flags.end(), "no_decoding_steps"), r.flags.end());
  EXPECT_FALSE(std::isnan(r.decoding_steps_avg));
  EXPECT_FALSE(r.effective_step_latency_ms);
  const nlohmann::json j = r;
  EXPECT_TRUE(j.at("acceptance_rate").is_null());
}

TEST(Aggregate, BubbleTimeFromRankCompletion) {
  std::vector<RankTrace> ranks(2);
  ranks[0].main_complete_ms = 10000;
  ranks[1].rank = 1;
  ranks[1].main_complete_ms = 25000;
  const auto r = aggregate({}, ranks, timing(25000), 4);
  EXPECT_DOUBLE_EQ(r.bubble_time_max_s, 15.0);
  EXPECT_DOUBLE_EQ(r.bubble_time_avg_s, 7.5);
}

TEST(Aggregate, PermutationInvariant) {
  Rng rng(77);
  std::vector<RolloutResult> reqs;
  for (int i = 0; i < 40; ++i) {
    std::vector<StepRecord> steps;
    const auto n = 1 + rng.below(30);
    for (std::uint64_t s = 0; s < n; ++s) {
      if (rng.below(3) == 0) {
        steps.push_back(fallback());
      } else {
        const auto p = static_cast<std::uint16_t>(1 + rng.below(4));
        const auto a = static_cast<std::uint16_t>(rng.below(p + 1));
        steps.push_back(verification(p, a, a < p || rng.below(2) == 0));
      }
    }
    reqs.push_back(request_of(std::move(steps)));
  }
  const auto base = aggregate(reqs, {}, timing(1234.5), 4);
  EXPECT_TRUE(check_identities(base).empty());
  for (int trial = 0; trial < 10; ++trial) {
    for (std::size_t i = reqs.size() - 1; i > 0; --i) std::swap(reqs[i], reqs[rng.below(i + 1)]);
    const auto r = aggregate(reqs, {}, timing(1234.5), 4);
    EXPECT_EQ(nlohmann::json(r), nlohmann::json(base));
  }
}

TEST(Aggregate, IdentityCheckerCatchesCorruption) {
  const std::vector<RolloutResult> reqs{request_of({verification(4, 2, true), verification(4, 4, false)})};
  auto r = aggregate(reqs, {}, timing(20), 4);
  ASSERT_TRUE(check_identities(r).empty());
  r.acceptance_rate = *r.acceptance_rate + 0.01;
  EXPECT_FALSE(check_identities(r).empty());
  r = aggregate(reqs, {}, timing(20), 4);
  r.streaks.counts[0] += 1;
  EXPECT_FALSE(check_identities(r).empty());
  r = aggregate(reqs, {}, timing(20), 4);
  r.rollout_time_s *= 2;
  EXPECT_FALSE(check_identities(r).empty());
}

TEST(StreakHistogram, FullAcceptanceLandsInLastBin) {
  const std::vector<StepRecord> steps(5, verification(4, 4, true));
  const auto h = streak_histogram(steps, 4);
  EXPECT_EQ(h.total, 5u);
  EXPECT_DOUBLE_EQ(h.fractions[4], 1.0);
}

// Each draft token is accepted independently with probability rho, so the
// emitted count is truncated geometric on 1..K+1.
TEST(StreakHistogram, IidAcceptanceMatchesTruncatedGeometric) {
  struct IidPolicy {
    PolicyDistribution next_distribution(TokenView) const { return {{0.0, 0.6, 0.4}}; }
    Vocabulary vocabulary() const { return {3, 0}; }
  };
  struct Drafts {
    DraftBlock draft(TokenView) const { return {{1, 1, 1, 1}, 1}; }
  };
  const std::size_t k = 4, n = 20000;
  const double rho = 0.6;
  Rng rng(12);
  std::vector<StepRecord> steps;
  while (steps.size() < n) {
    const auto r = rollout(TokenSequence{1}, IidPolicy{}, Drafts{}, {}, 200, rng);
    for (const auto& s : r.steps) {
      if (!s.truncated) steps.push_back(s);  // the length cap cuts the last block short
    }
  }
  const auto h = streak_histogram(steps, k);
  for (std::size_t j = 1; j <= k + 1; ++j) {
    const double expect = j <= k ? std::pow(rho, j - 1) * (1 - rho) : std::pow(rho, k);
    const double sigma = std::sqrt(expect * (1 - expect) / h.total);
    EXPECT_NEAR(h.fractions[j - 1], expect, 3 * sigma + 1e-3) << "bin " << j;
  }
}

TEST(Summary, AveragesPerStepAndKeepsGlobalMax) {
  RunReport a, b;
  a.mode = b.mode = "baseline";
  a.rollout_time_s = 2;
  b.rollout_time_s = 4;
  a.decoding_steps_avg = 10;
  b.decoding_steps_avg = 20;
  a.decoding_steps_max = 30;
  b.decoding_steps_max = 50;
  b.acceptance_length = 2.5;
  b.draft_length = 4;
  b.acceptance_rate = 0.4;
  const std::vector<RunReport> reports{a, b};
  const auto s = summarize(reports);
  EXPECT_DOUBLE_EQ(s.rollout_time_s, 3);
  EXPECT_DOUBLE_EQ(s.decoding_steps_avg, 15);
  EXPECT_DOUBLE_EQ(s.decoding_steps_max, 40);
  EXPECT_EQ(s.decoding_steps_max_global, 50u);
  EXPECT_DOUBLE_EQ(*s.acceptance_length, 2.5);
  EXPECT_DOUBLE_EQ(*s.effective_step_latency_ms, 200);
}

TEST(Serialization, JsonRoundTrip) {
  const std::vector<RolloutResult> reqs{request_of({verification(4, 2, true), fallback()})};
  std::vector<RankTrace> ranks(1);
  ranks[0].main_complete_ms = 5;
  ranks[0].pregen_tokens = 9;
  const auto r = aggregate(reqs, ranks, timing(20), 4, {3.5, 7, 14}, {100, 0.5, 40});
  const nlohmann::json j = r;
  EXPECT_EQ(j.at("type"), "step");
  const auto back = j.get<RunReport>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Serialization, CsvHasOneRowPerStep) {
  std::vector<RunReport> reports(3);
  std::ostringstream csv, bubbles;
  write_csv(csv, reports);
  write_bubble_series(bubbles, reports);
  const auto lines = [](const std::string& s) { return std::count(s.begin(), s.end(), '\n'); };
  EXPECT_EQ(lines(csv.str()), 4);
  EXPECT_EQ(lines(bubbles.str()), 4);
}

}  // namespace
}  // namespace bsim
