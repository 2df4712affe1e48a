// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration shared by the command-line tool and report headers.

#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "bsim/scheduler.hpp"

namespace bsim {

struct RunConfig {
  SimConfig sim;
  std::size_t steps = 4;  // training steps (tail-batching: rounds)
  std::string out = "bsim-out";
  std::string policy_file;
  bool write_pools = true;
  int verbosity = 0;

  void validate() const {
    if (steps == 0) throw ConfigError("steps must be >= 1");
    if (out.empty()) throw ConfigError("output directory must not be empty");
    sim.validate();
  }
};

inline std::string hazard_name(EosHazard::Kind k) {
  switch (k) {
    case EosHazard::Kind::kNone: return "none";
    case EosHazard::Kind::kConstant: return "constant";
    case EosHazard::Kind::kHyperbolic: return "hyperbolic";
  }
  return "none";
}

inline EosHazard::Kind parse_hazard(const std::string& s) {
  if (s == "none") return EosHazard::Kind::kNone;
  if (s == "constant") return EosHazard::Kind::kConstant;
  if (s == "hyperbolic") return EosHazard::Kind::kHyperbolic;
  throw ConfigError("unknown hazard '" + s + "' (expected none, constant, hyperbolic)");
}

inline AttentionMode parse_attention(const std::string& s) {
  if (s == "unified") return AttentionMode::kUnified;
  if (s == "split") return AttentionMode::kBatchSplit;
  throw ConfigError("unknown attention mode '" + s + "' (expected split, unified)");
}

// Header record for report files; everything that determines the results.
inline nlohmann::json config_record(const RunConfig& rc) {
  const auto& c = rc.sim;
  const auto& l = c.latency;
  nlohmann::json j{{"type", "config"},
                   {"mode", std::string(to_string(c.mode))},
                   {"steps", rc.steps},
                   {"ranks", c.ranks},
                   {"batch", c.batch},
                   {"group", c.group},
                   {"group_pre", c.group_pre},
                   {"draft_len", c.draft_len},
                   {"poll_interval", c.poll_interval},
                   {"max_len", c.max_len},
                   {"prompt_len", c.prompt_len},
                   {"depth", c.depth},
                   {"min_match", c.min_match},
                   {"ngram_max", c.ngram_max},
                   {"ngram_min", c.ngram_min},
                   {"pregen_group_cap", c.group_cap()},
                   {"seed", c.seed},
                   {"temperature", c.sampling.temperature},
                   {"top_p", c.sampling.top_p},
                   {"top_k", c.sampling.top_k ? nlohmann::json(*c.sampling.top_k) : nlohmann::json(nullptr)},
                   {"policy_file", rc.policy_file},
                   {"vocab", c.policy.vocab},
                   {"eos", c.policy.eos},
                   {"order", c.policy.order},
                   {"rho", c.policy.rho},
                   {"skew", c.policy.skew},
                   {"hazard", hazard_name(c.policy.hazard.kind)},
                   {"hazard_rate", c.policy.hazard.rate},
                   {"hazard_offset", c.policy.hazard.offset},
                   {"hard_scale", c.policy.hazard.hard_scale},
                   {"hard_fraction", c.hard_fraction},
                   {"drift", c.drift},
                   {"attention", to_string(l.attention)},
                   {"token_ms", l.token_ms},
                   {"knee_tokens", l.knee_tokens},
                   {"attention_scale", l.attention_scale},
                   {"context_slope", l.context_slope},
                   {"interference", l.interference},
                   {"suffix_lookup_ms", l.suffix_lookup_ms},
                   {"ngram_scan_ms", l.ngram_scan_ms},
                   {"build_ms_per_visit", l.build_ms_per_visit}};
  if (c.mode == Mode::kTailBatching) j["eta"] = c.tail_eta();
  if (c.mode == Mode::kIntraGpu) {
    j["threshold"] = c.intra_threshold();
    j["helpers"] = c.intra_helpers();
  }
  return j;
}

}  // namespace bsim
