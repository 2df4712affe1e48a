// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Per-decoding-step latency: token-wise work (linear layers) plus
// request-wise attention whose cost depends on how speculative queries are
// batched.
//
// Attention is anchored at the reference composition (128 requests, 8k
// context, 32 of them speculative with 4 drafts each):
//   normal (no speculative queries)   0.372 ms
//   batch-split  prefill + decode     0.753 ms + 0.226 ms
//   unified single kernel             0.380 ms
// and scales linearly with request count and context length away from it.
// The split prefill kernel carries a fixed launch share, which keeps
// unified <= split for batches up to unified_dominance_limit() requests.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>

#include "bsim/types.hpp"

namespace bsim {

enum class AttentionMode { kBatchSplit, kUnified };

inline std::string to_string(AttentionMode m) { return m == AttentionMode::kUnified ? "unified" : "split"; }

struct LatencyParams {
  AttentionMode attention = AttentionMode::kUnified;

  double token_ms = 0.002;   // per batched token
  double knee_tokens = 0.0;  // memory-bound floor; 0 disables it

  double normal_ms = 0.372;
  double split_prefill_ms = 0.753;
  double split_decode_ms = 0.226;
  double unified_ms = 0.380;
  double ref_batch = 128.0;
  double ref_spec = 32.0;
  double ref_drafts = 4.0;
  double ref_context = 8192.0;
  // Per-request prefill share at the anchor; the rest of split_prefill_ms is fixed.
  double prefill_per_request_ms = 0.0075;
  double context_slope = 1.0;    // attention factor = (1 - slope) + slope * ctx / ref_context
  double attention_scale = 1.0;  // e.g. layer count when anchors are per layer

  double interference = 0.0;       // intra-GPU slowdown per unit injected fraction
  double suffix_lookup_ms = 0.0;   // per draft retrieval
  double ngram_scan_ms = 0.0;      // per pool position scanned
  double build_ms_per_visit = 1e-5;

  void validate() const {
    const double vals[] = {token_ms, knee_tokens, normal_ms, split_prefill_ms, split_decode_ms, unified_ms,
                           prefill_per_request_ms, attention_scale, interference, suffix_lookup_ms, ngram_scan_ms,
                           build_ms_per_visit};
    for (double v : vals) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("latency parameters must be finite and non-negative");
    }
    if (!(ref_batch > ref_spec && ref_spec > 0 && ref_drafts > 0 && ref_context > 0)) {
      throw ConfigError("latency reference composition must satisfy batch > spec > 0, drafts > 0, context > 0");
    }
    if (prefill_per_request_ms * ref_spec > split_prefill_ms) {
      throw ConfigError("prefill per-request share exceeds the prefill anchor");
    }
    if (!(context_slope >= 0.0 && context_slope <= 1.0)) throw ConfigError("context_slope must lie in [0, 1]");
  }
};

struct StepComposition {
  double n_normal = 0;        // requests verifying zero drafts (or plain decoding)
  double n_spec = 0;          // requests verifying a draft block
  double drafts = 0;          // mean draft tokens per speculative request
  double mean_context = 0;    // tokens of context per request

  double tokens() const { return n_normal + n_spec * (drafts + 1.0); }
  double requests() const { return n_normal + n_spec; }
};

struct LatencyBreakdown {
  double token_ms = 0;
  double attention_ms = 0;
  double total() const { return token_ms + attention_ms; }
};

namespace detail {

inline double context_factor(const StepComposition& c, const LatencyParams& p) {
  return (1.0 - p.context_slope) + p.context_slope * c.mean_context / p.ref_context;
}

}  // namespace detail

inline double attention_ms(const StepComposition& c, const LatencyParams& p, AttentionMode mode) {
  if (c.requests() <= 0.0) return 0.0;
  const double ctx = detail::context_factor(c, p) * p.attention_scale;
  const double per_normal = p.normal_ms / p.ref_batch;
  if (c.n_spec <= 0.0) return ctx * per_normal * c.n_normal;
  if (mode == AttentionMode::kUnified) {
    const double per_draft = (p.unified_ms - p.normal_ms) / (p.ref_spec * p.ref_drafts);
    return ctx * (per_normal * c.requests() + per_draft * c.n_spec * c.drafts);
  }
  const double per_decode = p.split_decode_ms / (p.ref_batch - p.ref_spec);
  const double prefill_fixed = p.split_prefill_ms - p.prefill_per_request_ms * p.ref_spec;
  const double prefill =
      prefill_fixed + p.prefill_per_request_ms * c.n_spec * (c.drafts + 1.0) / (p.ref_drafts + 1.0);
  return ctx * (per_decode * c.n_normal + prefill);
}

inline LatencyBreakdown step_breakdown(const StepComposition& c, const LatencyParams& p) {
  LatencyBreakdown b;
  const double tok = c.tokens();
  if (tok > 0.0) b.token_ms = p.token_ms * std::max(tok, p.knee_tokens);
  b.attention_ms = attention_ms(c, p, p.attention);
  return b;
}

inline double step_latency(const StepComposition& c, const LatencyParams& p) { return step_breakdown(c, p).total(); }

// Seconds for a trace of decoding steps.
inline double rollout_time(std::span<const StepComposition> trace, const LatencyParams& p) {
  double ms = 0.0;
  for (const auto& c : trace) ms += step_latency(c, p);
  return ms / 1000.0;
}

// Largest normal-request count for which unified <= split holds for every
// speculative composition with drafts >= 1 (the constraint binds at one draft).
inline double unified_dominance_limit(const LatencyParams& p) {
  const double per_normal = p.normal_ms / p.ref_batch;
  const double per_decode = p.split_decode_ms / (p.ref_batch - p.ref_spec);
  const double prefill_fixed = p.split_prefill_ms - p.prefill_per_request_ms * p.ref_spec;
  if (per_normal <= per_decode) return std::numeric_limits<double>::infinity();
  return prefill_fixed / (per_normal - per_decode);
}

// End-to-end time reduction for step-reduction ratio alpha and per-step
// latency increase ratio mu.
inline double speedup(double alpha, double mu) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractViolation("alpha must lie in [0, 1]");
  if (!(mu >= -1.0)) throw ContractViolation("mu must be >= -1");
  return 1.0 - (1.0 - alpha) * (1.0 + mu);
}

}  // namespace bsim
