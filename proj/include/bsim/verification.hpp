// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Reference oracles: exact output-sequence distributions by enumeration, a
// brute-force n-gram scan that mirrors draft retrieval, and position-wise
// chi-square statistics.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "bsim/policy.hpp"
#include "bsim/spec_decoder.hpp"
#include "bsim/suffix_index.hpp"

namespace bsim {

using SequenceDistribution = std::map<TokenSequence, double>;
using ResidualFn = std::function<PolicyDistribution(const PolicyDistribution&, TokenId)>;

inline double total_variation(const SequenceDistribution& a, const SequenceDistribution& b) {
  double tv = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      tv += std::abs(ia->second);
      ++ia;
    } else if (ia == a.end() || ib->first < ia->first) {
      tv += std::abs(ib->second);
      ++ib;
    } else {
      tv += std::abs(ia->second - ib->second);
      ++ia;
      ++ib;
    }
  }
  return 0.5 * tv;
}

namespace detail {

template <TargetPolicy P>
void enumerate_plain(TokenSequence& seq, std::size_t prompt_len, double mass, const P& policy,
                     const SamplingParams& params, std::size_t max_len, TokenId eos, SequenceDistribution& out) {
  const std::size_t len = seq.size() - prompt_len;
  if (len >= max_len || (len > 0 && seq.back() == eos)) {
    out[TokenSequence(seq.begin() + static_cast<std::ptrdiff_t>(prompt_len), seq.end())] += mass;
    return;
  }
  const auto p = target_distribution(policy, seq, params);
  for (std::size_t x = 0; x < p.size(); ++x) {
    if (p[x] <= 0.0) continue;
    seq.push_back(static_cast<TokenId>(x));
    enumerate_plain(seq, prompt_len, mass * p[x], policy, params, max_len, eos, out);
    seq.pop_back();
  }
}

}  // namespace detail

// Exact distribution over responses of autoregressive sampling.
template <TargetPolicy P>
SequenceDistribution enumerate_autoregressive(TokenView prompt, const P& policy, const SamplingParams& params,
                                              std::size_t max_len) {
  SequenceDistribution out;
  TokenSequence seq(prompt.begin(), prompt.end());
  detail::enumerate_plain(seq, prompt.size(), 1.0, policy, params, max_len, Vocabulary(policy.vocabulary()).eos, out);
  return out;
}

// Exact distribution over responses of the speculative rollout: every
// acceptance/rejection branch, residual draw, bonus draw, and fallback draw,
// weighted by its probability. `residual_fn` lets tests inject faults.
template <TargetPolicy P, DraftSource D>
SequenceDistribution enumerate_speculative(TokenView prompt, const P& policy, const D& drafts,
                                           const SamplingParams& params, std::size_t max_len,
                                           const ResidualFn& residual_fn = residual) {
  SequenceDistribution out;
  const TokenId eos = Vocabulary(policy.vocabulary()).eos;
  const std::size_t prompt_len = prompt.size();
  TokenSequence seq(prompt.begin(), prompt.end());

  auto finish = [&](double mass) {
    out[TokenSequence(seq.begin() + static_cast<std::ptrdiff_t>(prompt_len), seq.end())] += mass;
  };
  std::function<void(double)> step;
  // Walks draft position t of `block`; `budget` tokens may still be emitted.
  std::function<void(const TokenSequence&, std::size_t, std::size_t, double)> verify;

  step = [&](double mass) {
    const std::size_t len = seq.size() - prompt_len;
    if (len >= max_len || (len > 0 && seq.back() == eos)) {
      finish(mass);
      return;
    }
    const DraftBlock block = drafts.draft(seq);
    if (block.empty()) {
      const auto p = target_distribution(policy, seq, params);
      for (std::size_t x = 0; x < p.size(); ++x) {
        if (p[x] <= 0.0) continue;
        seq.push_back(static_cast<TokenId>(x));
        step(mass * p[x]);
        seq.pop_back();
      }
      return;
    }
    verify(block.tokens, 0, max_len - len, mass);
  };

  verify = [&](const TokenSequence& block, std::size_t t, std::size_t budget, double mass) {
    const auto p = target_distribution(policy, seq, params);
    if (t == block.size()) {
      for (std::size_t x = 0; x < p.size(); ++x) {
        if (p[x] <= 0.0) continue;
        seq.push_back(static_cast<TokenId>(x));
        step(mass * p[x]);
        seq.pop_back();
      }
      return;
    }
    const TokenId cand = block[t];
    const double pa = (cand >= 0 && static_cast<std::size_t>(cand) < p.size()) ? p[cand] : 0.0;
    const double accept = pa >= 1.0 - kForcedAcceptTolerance ? 1.0 : pa;
    if (accept > 0.0) {
      seq.push_back(cand);
      if (cand == eos || budget == 1) {
        step(mass * accept);  // terminal or truncated: the step loop records the response
      } else {
        verify(block, t + 1, budget - 1, mass * accept);
      }
      seq.pop_back();
    }
    if (accept < 1.0) {
      const auto r = residual_fn(p, cand);
      for (std::size_t x = 0; x < r.size(); ++x) {
        if (r[x] <= 0.0) continue;
        seq.push_back(static_cast<TokenId>(x));
        step(mass * (1.0 - accept) * r[x]);
        seq.pop_back();
      }
    }
  };

  step(1.0);
  return out;
}

// Deliberately broken residual: drops the rejected token without renormalizing.
inline PolicyDistribution unnormalized_residual(const PolicyDistribution& dist, TokenId rejected) {
  PolicyDistribution r = dist;
  r.probs[static_cast<std::size_t>(rejected)] = 0.0;
  return r;
}

// Brute-force retrieval: scans every position of every pool sequence for the
// longest prefix suffix, then extends it token by token with the most
// frequent continuation (ties to the lowest id) while the path stays within
// the indexed depth.
inline DraftBlock oracle_retrieve(const TokenPool& pool, TokenView prefix, std::size_t k, std::size_t depth,
                                  std::size_t min_match = 1) {
  DraftBlock block;
  auto occurs = [&](TokenView pat) {
    for (const auto& s : pool.sequences) {
      if (pat.size() > s.size()) continue;
      for (std::size_t i = 0; i + pat.size() <= s.size(); ++i) {
        if (std::equal(pat.begin(), pat.end(), s.begin() + static_cast<std::ptrdiff_t>(i))) return true;
      }
    }
    return false;
  };
  const std::size_t cap = std::min(prefix.size(), max_anchor(depth, k));
  std::size_t anchor = 0;
  for (std::size_t len = cap; len >= std::max<std::size_t>(min_match, 1); --len) {
    if (occurs(prefix.subspan(prefix.size() - len))) {
      anchor = len;
      break;
    }
  }
  if (anchor == 0) return block;
  block.match_depth = anchor;
  TokenSequence path(prefix.end() - static_cast<std::ptrdiff_t>(anchor), prefix.end());
  for (std::size_t step = 0; step < k && path.size() < depth; ++step) {
    std::map<TokenId, std::size_t> next;
    for (const auto& s : pool.sequences) {
      for (std::size_t i = 0; i + path.size() < s.size(); ++i) {
        if (std::equal(path.begin(), path.end(), s.begin() + static_cast<std::ptrdiff_t>(i))) {
          next[s[i + path.size()]]++;
        }
      }
    }
    if (next.empty()) break;
    TokenId best = next.begin()->first;
    std::size_t best_count = 0;
    for (const auto& [tok, c] : next) {
      if (c > best_count) {
        best = tok;
        best_count = c;
      }
    }
    block.tokens.push_back(best);
    path.push_back(best);
  }
  return block;
}

struct ChiSquare {
  double statistic = 0;
  std::size_t dof = 0;
  double p_value = 1;
};

// Pearson statistic for observed counts against expected probabilities;
// cells with expected count below `min_expected` are pooled into one.
inline ChiSquare chi_square(std::span<const std::size_t> observed, std::span<const double> expected_prob,
                            double min_expected = 5.0) {
  std::size_t n = 0;
  for (auto o : observed) n += o;
  ChiSquare out;
  if (n == 0) return out;
  double pooled_obs = 0, pooled_exp = 0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = expected_prob[i] * static_cast<double>(n);
    if (e < min_expected) {
      pooled_obs += static_cast<double>(observed[i]);
      pooled_exp += e;
      continue;
    }
    out.statistic += (observed[i] - e) * (observed[i] - e) / e;
    ++cells;
  }
  if (pooled_exp >= min_expected) {
    out.statistic += (pooled_obs - pooled_exp) * (pooled_obs - pooled_exp) / pooled_exp;
    ++cells;
  } else if (pooled_obs > 0 && pooled_exp <= 0.0) {
    out.statistic = std::numeric_limits<double>::infinity();
  }
  if (cells < 2) return out;
  out.dof = cells - 1;
  out.p_value = std::isfinite(out.statistic) ? boost::math::gamma_q(0.5 * out.dof, 0.5 * out.statistic) : 0.0;
  return out;
}

}  // namespace bsim
