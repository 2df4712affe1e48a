// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Step reports: decoding steps, response lengths, speculative metrics,
// bubble time, and draft-pool statistics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bsim/spec_decoder.hpp"

namespace bsim {

struct RankTrace {
  std::size_t rank = 0;
  double main_complete_ms = 0;  // relative to step start
  double halt_ms = 0;           // leaves pre-generation (or idling) for the barrier
  std::size_t iterations = 0;   // engine iterations spent on the step's own batch
  std::size_t pregen_steps = 0;
  std::size_t pregen_tokens = 0;
  std::size_t overshoot_steps = 0;  // pre-generation steps after global completion
  std::size_t polls = 0;
  bool helper = false;  // took next-batch requests before finishing its own batch
  double injected_at_ms = -1;

  double bubble_ms(double wall_ms) const { return wall_ms - main_complete_ms; }
};

struct StreakHistogram {
  std::vector<std::size_t> counts;  // counts[i] = verification steps emitting i + 1 tokens
  std::vector<double> fractions;
  std::size_t total = 0;
};

// Bins verification steps by tokens emitted, 1..k+1.
inline StreakHistogram streak_histogram(std::span<const StepRecord> steps, std::size_t k) {
  StreakHistogram h;
  h.counts.assign(k + 1, 0);
  for (const auto& s : steps) {
    if (!s.is_verification()) continue;
    const std::size_t bin = std::clamp<std::size_t>(s.emitted, 1, k + 1) - 1;
    h.counts[bin]++;
    h.total++;
  }
  h.fractions.assign(k + 1, 0.0);
  if (h.total > 0) {
    for (std::size_t i = 0; i <= k; ++i) h.fractions[i] = static_cast<double>(h.counts[i]) / h.total;
  }
  return h;
}

struct RunReport {
  std::uint64_t step = 0;
  std::string mode;
  double step_start_s = 0;
  double rollout_time_s = 0;  // latest rank's completion of its own batch
  double barrier_time_s = 0;  // all ranks past the barrier

  std::size_t requests = 0;
  double decoding_steps_avg = 0;
  std::size_t decoding_steps_max = 0;
  double response_length_avg = 0;
  std::size_t response_length_max = 0;

  std::size_t verification_steps = 0;
  std::size_t fallback_steps = 0;
  std::size_t proposed_tokens = 0;
  std::size_t accepted_tokens = 0;
  std::size_t verification_emitted = 0;
  std::size_t no_extra_steps = 0;  // verification steps ending without a recovered/bonus token
  std::optional<double> acceptance_length;
  std::optional<double> draft_length;
  std::optional<double> acceptance_rate;
  std::optional<double> no_extra_fraction;
  StreakHistogram streaks;

  double bubble_time_avg_s = 0;
  double bubble_time_max_s = 0;
  double draft_pool_length_avg = 0;
  std::size_t draft_pool_length_max = 0;
  std::size_t pregen_tokens = 0;

  std::uint64_t suffix_build_visits = 0;  // slowest rank's build work
  double suffix_build_ms = 0;
  std::size_t suffix_nodes = 0;

  std::optional<double> effective_step_latency_ms;  // rollout time / average decoding steps
  std::size_t critical_iterations = 0;              // slowest rank's engine iterations
  std::vector<std::string> flags;
  std::vector<RankTrace> ranks;
};

struct StepTiming {
  std::uint64_t step = 0;
  std::string mode;
  double start_ms = 0;
  double rollout_ms = 0;
  double barrier_ms = 0;
};

struct PoolStats {
  double length_avg = 0;
  std::size_t length_max = 0;
  std::size_t tokens = 0;
};

struct BuildStats {
  std::uint64_t visits = 0;
  double ms = 0;
  std::size_t nodes = 0;
};

// Folds request and rank traces into a step report. Integer accumulators keep
// the result independent of request order.
inline RunReport aggregate(std::span<const RolloutResult> requests, std::span<const RankTrace> ranks,
                           const StepTiming& timing, std::size_t k, const PoolStats& pools = {},
                           const BuildStats& build = {}) {
  RunReport r;
  r.step = timing.step;
  r.mode = timing.mode;
  r.step_start_s = timing.start_ms / 1000.0;
  r.rollout_time_s = timing.rollout_ms / 1000.0;
  r.barrier_time_s = timing.barrier_ms / 1000.0;
  r.requests = requests.size();
  r.streaks.counts.assign(k + 1, 0);
  r.streaks.fractions.assign(k + 1, 0.0);

  std::uint64_t steps_sum = 0, len_sum = 0;
  for (const auto& req : requests) {
    steps_sum += req.decoding_steps();
    len_sum += req.response.size();
    r.decoding_steps_max = std::max(r.decoding_steps_max, req.decoding_steps());
    r.response_length_max = std::max(r.response_length_max, req.response.size());
    for (const auto& s : req.steps) {
      if (!s.is_verification()) {
        r.fallback_steps++;
        continue;
      }
      r.verification_steps++;
      r.proposed_tokens += s.proposed;
      r.accepted_tokens += s.accepted;
      r.verification_emitted += s.emitted;
      if (!s.extra) r.no_extra_steps++;
      r.streaks.counts[std::clamp<std::size_t>(s.emitted, 1, k + 1) - 1]++;
    }
  }
  r.streaks.total = r.verification_steps;
  if (r.requests == 0) {
    r.flags.push_back("empty_trace");
  } else {
    r.decoding_steps_avg = static_cast<double>(steps_sum) / r.requests;
    r.response_length_avg = static_cast<double>(len_sum) / r.requests;
  }
  if (r.verification_steps == 0) {
    r.flags.push_back("no_verification_steps");
  } else {
    const double v = static_cast<double>(r.verification_steps);
    r.acceptance_length = r.verification_emitted / v;
    r.draft_length = r.proposed_tokens / v;
    r.acceptance_rate = static_cast<double>(r.accepted_tokens) / r.proposed_tokens;
    r.no_extra_fraction = r.no_extra_steps / v;
    for (std::size_t i = 0; i <= k; ++i) r.streaks.fractions[i] = r.streaks.counts[i] / v;
  }
  if (r.decoding_steps_avg > 0) {
    r.effective_step_latency_ms = timing.rollout_ms / r.decoding_steps_avg;
  } else {
    r.flags.push_back("no_decoding_steps");
  }

  double bubble_sum = 0;
  for (const auto& rank : ranks) {
    const double b = rank.bubble_ms(timing.rollout_ms);
    bubble_sum += b;
    r.bubble_time_max_s = std::max(r.bubble_time_max_s, b / 1000.0);
    r.critical_iterations = std::max(r.critical_iterations, rank.iterations);
    r.pregen_tokens += rank.pregen_tokens;
  }
  if (!ranks.empty()) r.bubble_time_avg_s = bubble_sum / ranks.size() / 1000.0;
  r.ranks.assign(ranks.begin(), ranks.end());
  r.draft_pool_length_avg = pools.length_avg;
  r.draft_pool_length_max = pools.length_max;
  r.suffix_build_visits = build.visits;
  r.suffix_build_ms = build.ms;
  r.suffix_nodes = build.nodes;
  return r;
}

// Rearranged acceptance identity. With E emitted over V verification steps,
// A accepted of P proposed, and X steps lacking a recovered/bonus token,
// E = A + V - X, so A / P = (E/V - 1 + X/V) / (P/V).
inline std::optional<double> acceptance_rate_from(double acceptance_length, double draft_length,
                                                  double no_extra_fraction = 0.0) {
  if (!(draft_length > 0.0)) return std::nullopt;
  return (acceptance_length - 1.0 + no_extra_fraction) / draft_length;
}

// Violated report identities, empty when the report is internally consistent.
inline std::vector<std::string> check_identities(const RunReport& r, double tol = 1e-9) {
  std::vector<std::string> bad;
  auto close = [&](double a, double b) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); };
  std::size_t streak_sum = 0;
  for (auto c : r.streaks.counts) streak_sum += c;
  if (streak_sum != r.verification_steps) bad.push_back("streak histogram does not sum to verification steps");
  if (r.verification_steps > 0) {
    if (!r.acceptance_rate || !r.acceptance_length || !r.draft_length || !r.no_extra_fraction) {
      bad.push_back("speculative metrics missing despite verification steps");
    } else {
      if (!close(*r.acceptance_rate, static_cast<double>(r.accepted_tokens) / r.proposed_tokens)) {
        bad.push_back("acceptance rate != accepted / proposed");
      }
      const auto derived = acceptance_rate_from(*r.acceptance_length, *r.draft_length, *r.no_extra_fraction);
      if (!derived || !close(*derived, *r.acceptance_rate)) {
        bad.push_back("acceptance rate != (acceptance length - 1 + no-extra fraction) / draft length");
      }
    }
  } else {
    if (r.acceptance_rate || r.acceptance_length || r.draft_length) {
      bad.push_back("speculative metrics present without verification steps");
    }
    if (r.requests > 0 && !close(r.decoding_steps_avg, r.response_length_avg)) {
      bad.push_back("decoding steps differ from response length without speculation");
    }
  }
  if (r.effective_step_latency_ms && !close(r.decoding_steps_avg * *r.effective_step_latency_ms / 1000.0,
                                            r.rollout_time_s)) {
    bad.push_back("average steps x effective step latency != rollout time");
  }
  return bad;
}

// Multi-step rollup; per-step values are averaged.
struct RunSummary {
  std::string mode;
  std::size_t steps = 0;
  double rollout_time_s = 0;
  double decoding_steps_avg = 0;
  double decoding_steps_max = 0;         // per-step max, averaged over steps
  std::size_t decoding_steps_max_global = 0;
  double response_length_avg = 0;
  double response_length_max = 0;
  std::optional<double> acceptance_length;
  std::optional<double> draft_length;
  std::optional<double> acceptance_rate;
  double bubble_time_avg_s = 0;
  double bubble_time_max_s = 0;
  double draft_pool_length_avg = 0;
  double draft_pool_length_max = 0;
  double suffix_build_ms = 0;
  std::optional<double> effective_step_latency_ms;
};

inline RunSummary summarize(std::span<const RunReport> reports) {
  RunSummary s;
  if (reports.empty()) return s;
  s.mode = reports.front().mode;
  s.steps = reports.size();
  double al = 0, dl = 0, ar = 0;
  std::size_t spec_steps = 0;
  for (const auto& r : reports) {
    s.rollout_time_s += r.rollout_time_s;
    s.decoding_steps_avg += r.decoding_steps_avg;
    s.decoding_steps_max += static_cast<double>(r.decoding_steps_max);
    s.decoding_steps_max_global = std::max(s.decoding_steps_max_global, r.decoding_steps_max);
    s.response_length_avg += r.response_length_avg;
    s.response_length_max += static_cast<double>(r.response_length_max);
    s.bubble_time_avg_s += r.bubble_time_avg_s;
    s.bubble_time_max_s += r.bubble_time_max_s;
    s.draft_pool_length_avg += r.draft_pool_length_avg;
    s.draft_pool_length_max += static_cast<double>(r.draft_pool_length_max);
    s.suffix_build_ms += r.suffix_build_ms;
    if (r.acceptance_length) {
      al += *r.acceptance_length;
      dl += *r.draft_length;
      ar += *r.acceptance_rate;
      ++spec_steps;
    }
  }
  const double n = static_cast<double>(reports.size());
  for (double* v : {&s.rollout_time_s, &s.decoding_steps_avg, &s.decoding_steps_max, &s.response_length_avg,
                    &s.response_length_max, &s.bubble_time_avg_s, &s.bubble_time_max_s, &s.draft_pool_length_avg,
                    &s.draft_pool_length_max, &s.suffix_build_ms}) {
    *v /= n;
  }
  if (spec_steps > 0) {
    s.acceptance_length = al / spec_steps;
    s.draft_length = dl / spec_steps;
    s.acceptance_rate = ar / spec_steps;
  }
  if (s.decoding_steps_avg > 0) s.effective_step_latency_ms = s.rollout_time_s * 1000.0 / s.decoding_steps_avg;
  return s;
}

// ---- serialization ----

inline void to_json(nlohmann::json& j, const RankTrace& t) {
  j = nlohmann::json{{"rank", t.rank},
                     {"complete_ms", t.main_complete_ms},
                     {"halt_ms", t.halt_ms},
                     {"iterations", t.iterations},
                     {"pregen_steps", t.pregen_steps},
                     {"pregen_tokens", t.pregen_tokens},
                     {"overshoot_steps", t.overshoot_steps},
                     {"polls", t.polls},
                     {"helper", t.helper}};
}

inline void from_json(const nlohmann::json& j, RankTrace& t) {
  t.rank = j.at("rank");
  t.main_complete_ms = j.at("complete_ms");
  t.halt_ms = j.at("halt_ms");
  t.iterations = j.at("iterations");
  t.pregen_steps = j.at("pregen_steps");
  t.pregen_tokens = j.at("pregen_tokens");
  t.overshoot_steps = j.at("overshoot_steps");
  t.polls = j.at("polls");
  t.helper = j.at("helper");
}

namespace detail {

inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const RunReport& r) {
  j = nlohmann::json{{"type", "step"},
                     {"step", r.step},
                     {"mode", r.mode},
                     {"step_start_s", r.step_start_s},
                     {"rollout_time_s", r.rollout_time_s},
                     {"barrier_time_s", r.barrier_time_s},
                     {"requests", r.requests},
                     {"decoding_steps_avg", r.decoding_steps_avg},
                     {"decoding_steps_max", r.decoding_steps_max},
                     {"response_length_avg", r.response_length_avg},
                     {"response_length_max", r.response_length_max},
                     {"verification_steps", r.verification_steps},
                     {"fallback_steps", r.fallback_steps},
                     {"proposed_tokens", r.proposed_tokens},
                     {"accepted_tokens", r.accepted_tokens},
                     {"verification_emitted", r.verification_emitted},
                     {"no_extra_steps", r.no_extra_steps},
                     {"acceptance_length", detail::opt(r.acceptance_length)},
                     {"draft_length", detail::opt(r.draft_length)},
                     {"acceptance_rate", detail::opt(r.acceptance_rate)},
                     {"no_extra_fraction", detail::opt(r.no_extra_fraction)},
                     {"streak_counts", r.streaks.counts},
                     {"streak_histogram", r.streaks.fractions},
                     {"bubble_time_avg_s", r.bubble_time_avg_s},
                     {"bubble_time_max_s", r.bubble_time_max_s},
                     {"draft_pool_length_avg", r.draft_pool_length_avg},
                     {"draft_pool_length_max", r.draft_pool_length_max},
                     {"pregen_tokens", r.pregen_tokens},
                     {"suffix_build_visits", r.suffix_build_visits},
                     {"suffix_build_ms", r.suffix_build_ms},
                     {"suffix_nodes", r.suffix_nodes},
                     {"effective_step_latency_ms", detail::opt(r.effective_step_latency_ms)},
                     {"critical_iterations", r.critical_iterations},
                     {"flags", r.flags},
                     {"ranks", r.ranks}};
}

inline void from_json(const nlohmann::json& j, RunReport& r) {
  r.step = j.at("step");
  r.mode = j.at("mode");
  r.step_start_s = j.at("step_start_s");
  r.rollout_time_s = j.at("rollout_time_s");
  r.barrier_time_s = j.at("barrier_time_s");
  r.requests = j.at("requests");
  r.decoding_steps_avg = j.at("decoding_steps_avg");
  r.decoding_steps_max = j.at("decoding_steps_max");
  r.response_length_avg = j.at("response_length_avg");
  r.response_length_max = j.at("response_length_max");
  r.verification_steps = j.at("verification_steps");
  r.fallback_steps = j.at("fallback_steps");
  r.proposed_tokens = j.at("proposed_tokens");
  r.accepted_tokens = j.at("accepted_tokens");
  r.verification_emitted = j.at("verification_emitted");
  r.no_extra_steps = j.at("no_extra_steps");
  r.acceptance_length = detail::opt_from(j, "acceptance_length");
  r.draft_length = detail::opt_from(j, "draft_length");
  r.acceptance_rate = detail::opt_from(j, "acceptance_rate");
  r.no_extra_fraction = detail::opt_from(j, "no_extra_fraction");
  r.streaks.counts = j.at("streak_counts").get<std::vector<std::size_t>>();
  r.streaks.fractions = j.at("streak_histogram").get<std::vector<double>>();
  r.streaks.total = r.verification_steps;
  r.bubble_time_avg_s = j.at("bubble_time_avg_s");
  r.bubble_time_max_s = j.at("bubble_time_max_s");
  r.draft_pool_length_avg = j.at("draft_pool_length_avg");
  r.draft_pool_length_max = j.at("draft_pool_length_max");
  r.pregen_tokens = j.at("pregen_tokens");
  r.suffix_build_visits = j.at("suffix_build_visits");
  r.suffix_build_ms = j.at("suffix_build_ms");
  r.suffix_nodes = j.at("suffix_nodes");
  r.effective_step_latency_ms = detail::opt_from(j, "effective_step_latency_ms");
  r.critical_iterations = j.at("critical_iterations");
  r.flags = j.at("flags").get<std::vector<std::string>>();
  r.ranks = j.at("ranks").get<std::vector<RankTrace>>();
}

inline void to_json(nlohmann::json& j, const RunSummary& s) {
  j = nlohmann::json{{"type", "summary"},
                     {"mode", s.mode},
                     {"steps", s.steps},
                     {"rollout_time_s", s.rollout_time_s},
                     {"decoding_steps_avg", s.decoding_steps_avg},
                     {"decoding_steps_max", s.decoding_steps_max},
                     {"decoding_steps_max_global", s.decoding_steps_max_global},
                     {"response_length_avg", s.response_length_avg},
                     {"response_length_max", s.response_length_max},
                     {"acceptance_length", detail::opt(s.acceptance_length)},
                     {"draft_length", detail::opt(s.draft_length)},
                     {"acceptance_rate", detail::opt(s.acceptance_rate)},
                     {"bubble_time_avg_s", s.bubble_time_avg_s},
                     {"bubble_time_max_s", s.bubble_time_max_s},
                     {"draft_pool_length_avg", s.draft_pool_length_avg},
                     {"draft_pool_length_max", s.draft_pool_length_max},
                     {"suffix_build_ms", s.suffix_build_ms},
                     {"effective_step_latency_ms", detail::opt(s.effective_step_latency_ms)}};
}

inline void write_csv(std::ostream& out, std::span<const RunReport> reports) {
  out << "step,mode,rollout_time_s,decoding_steps_avg,decoding_steps_max,response_length_avg,"
         "response_length_max,acceptance_length,draft_length,acceptance_rate,bubble_time_avg_s,"
         "bubble_time_max_s,draft_pool_length_avg,draft_pool_length_max,suffix_build_ms\n";
  auto o = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& r : reports) {
    out << r.step << ',' << r.mode << ',' << r.rollout_time_s << ',' << r.decoding_steps_avg << ','
        << r.decoding_steps_max << ',' << r.response_length_avg << ',' << r.response_length_max << ','
        << o(r.acceptance_length) << ',' << o(r.draft_length) << ',' << o(r.acceptance_rate) << ','
        << r.bubble_time_avg_s << ',' << r.bubble_time_max_s << ',' << r.draft_pool_length_avg << ','
        << r.draft_pool_length_max << ',' << r.suffix_build_ms << '\n';
  }
}

// Plot series: per-step bubble time against rollout time.
inline void write_bubble_series(std::ostream& out, std::span<const RunReport> reports) {
  out << "step,rollout_time_s,bubble_time_avg_s,bubble_time_max_s\n";
  for (const auto& r : reports) {
    out << r.step << ',' << r.rollout_time_s << ',' << r.bubble_time_avg_s << ',' << r.bubble_time_max_s << '\n';
  }
}

}  // namespace bsim
