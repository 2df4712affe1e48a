// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Lossless speculative rollout with deterministic draft proposals.
//
// A draft token x~ is accepted with probability p_t(x~). On the first
// rejection one recovered token is drawn from the residual
//   r_t(x) = p_t(x) 1[x != x~] / (1 - p_t(x~)),
// and when the whole block is accepted one bonus token is drawn from the
// distribution at the fully extended prefix. Branchwise,
//   p(x~) 1[x = x~] + (1 - p(x~)) r(x) = p(x),
// so every emitted token is distributed exactly as plain sampling.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string_view>
#include <vector>

#include "bsim/policy.hpp"
#include "bsim/rng.hpp"
#include "bsim/suffix_index.hpp"
#include "bsim/types.hpp"

namespace bsim {

// Acceptance probabilities this close to 1 are taken as certain; the
// residual is undefined at mass 1.
inline constexpr double kForcedAcceptTolerance = 1e-12;

enum class Provenance : std::uint8_t { kDraftAccepted, kRecovered, kBonus, kFallback };

constexpr std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kDraftAccepted: return "draft";
    case Provenance::kRecovered: return "recovered";
    case Provenance::kBonus: return "bonus";
    case Provenance::kFallback: return "fallback";
  }
  return "?";
}

struct StepOutcome {
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  TokenSequence emitted;
  std::vector<Provenance> provenance;
  bool terminal = false;   // EOS emitted
  bool truncated = false;  // length limit cut the block short
};

// Compact per-decoding-step record kept inside a RolloutResult.
struct StepRecord {
  std::uint16_t proposed = 0;
  std::uint16_t accepted = 0;
  std::uint16_t emitted = 0;
  bool terminal = false;
  bool truncated = false;
  bool extra = false;      // a recovered, bonus, or fallback token was emitted
  std::uint32_t scan = 0;  // draft-source work units (n-gram positions scanned)

  bool is_verification() const { return proposed > 0; }
};

struct RolloutResult {
  std::size_t prompt_length = 0;
  TokenSequence response;
  std::vector<Provenance> provenance;
  std::vector<StepRecord> steps;
  std::uint64_t policy_version = 0;

  std::size_t decoding_steps() const { return steps.size(); }
};

inline PolicyDistribution residual(const PolicyDistribution& dist, TokenId rejected) {
  const double p_rej = dist[rejected];
  const double denom = 1.0 - p_rej;
  if (!(denom > kForcedAcceptTolerance)) {
    throw ContractViolation("residual undefined: rejected token carries (numerically) all the mass");
  }
  PolicyDistribution r;
  r.probs.resize(dist.size());
  for (std::size_t x = 0; x < dist.size(); ++x) {
    r.probs[x] = static_cast<TokenId>(x) == rejected ? 0.0 : dist.probs[x] / denom;
  }
  return r;
}

// Anything that proposes a draft block for a prefix.
template <class D>
concept DraftSource = requires(const D& d, TokenView prefix) {
  { d.draft(prefix) } -> std::same_as<DraftBlock>;
};

struct NoDrafts {
  DraftBlock draft(TokenView) const { return {}; }
};

struct SuffixDrafts {
  const SuffixTree* tree = nullptr;
  std::size_t k = 4;
  std::size_t min_match = 1;

  DraftBlock draft(TokenView prefix) const {
    if (!tree) return {};
    return tree->retrieve(prefix, k, SuffixIndexParams{tree->depth(), min_match});
  }
};

struct NgramDrafts {
  NgramMatcher matcher;
  std::size_t k = 4;

  DraftBlock draft(TokenView prefix) const { return matcher.retrieve(prefix, k); }
  std::uint64_t last_scan() const { return matcher.last_scan(); }
};

namespace detail {

// Verifies `draft` against the policy, appending emitted tokens to `seq`
// (which holds the full prefix). Stops after `budget` tokens.
template <TargetPolicy P>
StepOutcome verify_into(TokenSequence& seq, const TokenSequence& draft, const P& policy,
                        const SamplingParams& params, Rng& rng, std::size_t budget) {
  StepOutcome out;
  out.proposed = draft.size();
  const TokenId eos = Vocabulary(policy.vocabulary()).eos;
  auto emit = [&](TokenId x, Provenance how) {
    seq.push_back(x);
    out.emitted.push_back(x);
    out.provenance.push_back(how);
    if (x == eos) out.terminal = true;
  };
  for (std::size_t t = 0; t < draft.size(); ++t) {
    const auto p = target_distribution(policy, seq, params);
    const TokenId cand = draft[t];
    const double pa = (cand >= 0 && static_cast<std::size_t>(cand) < p.size()) ? p[cand] : 0.0;
    const double u = rng.uniform();
    if (pa >= 1.0 - kForcedAcceptTolerance || u < pa) {
      emit(cand, Provenance::kDraftAccepted);
      ++out.accepted;
      if (out.terminal) return out;
      if (out.emitted.size() >= budget) {
        out.truncated = true;
        return out;
      }
      continue;
    }
    emit(sample(residual(p, cand), rng), Provenance::kRecovered);
    return out;
  }
  // Whole block accepted: one bonus token from the extended prefix.
  emit(sample(target_distribution(policy, seq, params), rng), Provenance::kBonus);
  return out;
}

inline StepRecord record_of(const StepOutcome& o, std::uint64_t scan) {
  StepRecord r;
  r.proposed = static_cast<std::uint16_t>(o.proposed);
  r.accepted = static_cast<std::uint16_t>(o.accepted);
  r.emitted = static_cast<std::uint16_t>(o.emitted.size());
  r.terminal = o.terminal;
  r.truncated = o.truncated;
  r.extra = !o.provenance.empty() && o.provenance.back() != Provenance::kDraftAccepted;
  r.scan = static_cast<std::uint32_t>(std::min<std::uint64_t>(scan, std::numeric_limits<std::uint32_t>::max()));
  return r;
}

}  // namespace detail

// One verification round for a non-empty draft block.
template <TargetPolicy P>
StepOutcome verify_block(TokenView prefix, const DraftBlock& draft, const P& policy, const SamplingParams& params,
                         Rng& rng) {
  if (draft.empty()) throw ContractViolation("verify_block requires a non-empty draft");
  TokenSequence seq(prefix.begin(), prefix.end());
  return detail::verify_into(seq, draft.tokens, policy, params, rng, std::numeric_limits<std::size_t>::max());
}

// Draft-then-verify rollout. Each loop iteration is one decoding step: a
// verification round when the draft source yields a block, otherwise a
// single plain sample.
template <TargetPolicy P, DraftSource D>
RolloutResult rollout(TokenView prompt, const P& policy, const D& drafts, const SamplingParams& params,
                      std::size_t max_len, Rng& rng) {
  if (max_len < 1) throw ContractViolation("max response length must be >= 1");
  if (prompt.empty()) throw ContractViolation("prompt must contain at least one token");
  const TokenId eos = Vocabulary(policy.vocabulary()).eos;
  RolloutResult result;
  result.prompt_length = prompt.size();
  TokenSequence seq(prompt.begin(), prompt.end());
  bool done = false;
  while (!done && result.response.size() < max_len) {
    const std::size_t budget = max_len - result.response.size();
    const DraftBlock block = drafts.draft(seq);
    std::uint64_t scan = 0;
    if constexpr (requires { drafts.last_scan(); }) scan = drafts.last_scan();
    StepOutcome out;
    if (block.empty()) {
      const TokenId x = sample(target_distribution(policy, seq, params), rng);
      seq.push_back(x);
      out.emitted.push_back(x);
      out.provenance.push_back(Provenance::kFallback);
      out.terminal = x == eos;
    } else {
      out = detail::verify_into(seq, block.tokens, policy, params, rng, budget);
    }
    result.response.insert(result.response.end(), out.emitted.begin(), out.emitted.end());
    result.provenance.insert(result.provenance.end(), out.provenance.begin(), out.provenance.end());
    result.steps.push_back(detail::record_of(out, scan));
    done = out.terminal;
  }
  return result;
}

template <TargetPolicy P>
RolloutResult rollout(TokenView prompt, const P& policy, const SuffixTree* tree, std::size_t k,
                      const SamplingParams& params, std::size_t max_len, Rng& rng, std::size_t min_match = 1) {
  if (!tree) return rollout(prompt, policy, NoDrafts{}, params, max_len, rng);
  return rollout(prompt, policy, SuffixDrafts{tree, k, min_match}, params, max_len, rng);
}

// Plain sampling, one token per decoding step.
template <TargetPolicy P>
RolloutResult autoregressive_rollout(TokenView prompt, const P& policy, const SamplingParams& params,
                                     std::size_t max_len, Rng& rng) {
  return rollout(prompt, policy, NoDrafts{}, params, max_len, rng);
}

// One JSON object per decoding step: proposal size, acceptance count, the
// emitted tokens and their provenance.
inline void write_step_records(std::ostream& out, const RolloutResult& r) {
  std::size_t pos = 0;
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    const auto& s = r.steps[i];
    out << "{\"step\":" << i << ",\"proposed\":" << s.proposed << ",\"accepted\":" << s.accepted << ",\"tokens\":[";
    for (std::size_t j = 0; j < s.emitted; ++j) out << (j ? "," : "") << r.response[pos + j];
    out << "],\"provenance\":[";
    for (std::size_t j = 0; j < s.emitted; ++j) out << (j ? "," : "") << '"' << to_string(r.provenance[pos + j]) << '"';
    out << "],\"terminal\":" << (s.terminal ? "true" : "false") << ",\"truncated\":" << (s.truncated ? "true" : "false")
        << "}\n";
    pos += s.emitted;
  }
}

}  // namespace bsim
