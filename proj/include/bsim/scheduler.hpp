// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Discrete-event simulation of synchronous rollout across data-parallel ranks.
//
// Every rank decodes its share of batch N in one engine: each engine
// iteration advances all active requests by one decoding step and costs
// step_latency() of the iteration's composition. A rank that finishes early
// pre-generates responses for batch N+1 prompts, polling the synchronizer
// every T of its own pre-generation steps; pre-generation halts at the first
// poll that sees every rank complete. The partial responses become the draft
// pools for step N+1.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "bsim/latency_model.hpp"
#include "bsim/metrics.hpp"
#include "bsim/policy.hpp"
#include "bsim/rng.hpp"
#include "bsim/spec_decoder.hpp"
#include "bsim/suffix_index.hpp"
#include "bsim/types.hpp"

namespace bsim {

enum class Mode { kBaseline, kBubbleSpec, kNgramDraft, kTailBatching, kIntraGpu };

constexpr std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::kBaseline: return "baseline";
    case Mode::kBubbleSpec: return "bubblespec";
    case Mode::kNgramDraft: return "ngram-draft";
    case Mode::kTailBatching: return "tail-batching";
    case Mode::kIntraGpu: return "intra-gpu";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  for (Mode m : {Mode::kBaseline, Mode::kBubbleSpec, Mode::kNgramDraft, Mode::kTailBatching, Mode::kIntraGpu}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown mode '" + std::string(s) +
                    "' (expected baseline, bubblespec, ngram-draft, tail-batching, intra-gpu)");
}

inline bool uses_pregen(Mode m) { return m == Mode::kBubbleSpec || m == Mode::kNgramDraft || m == Mode::kIntraGpu; }

struct SimConfig {
  Mode mode = Mode::kBubbleSpec;
  std::size_t ranks = 8;
  std::size_t batch = 64;      // prompts per step (B)
  std::size_t group = 16;      // responses per prompt (G)
  std::size_t group_pre = 16;  // pre-generated responses per prompt
  std::size_t draft_len = 4;   // K
  std::size_t poll_interval = 50;
  std::size_t max_len = 2048;
  std::size_t prompt_len = 16;
  std::size_t depth = 32;
  std::size_t min_match = 1;
  std::size_t ngram_max = 4;
  std::size_t ngram_min = 1;
  // Prompt groups one rank may pre-generate; 0 means twice its own share.
  std::size_t pregen_group_cap = 0;

  // Mode-specific; validate() rejects them outside their mode.
  std::optional<double> eta;              // tail-batching
  std::optional<std::size_t> threshold;   // intra-gpu
  std::optional<std::size_t> helpers;     // intra-gpu
  bool flush_tail = true;                 // tail-batching: drain the queue after the last round

  SamplingParams sampling;
  std::uint64_t seed = 0;
  MarkovSpec policy;
  std::optional<MarkovPolicy> policy_table;  // overrides `policy` when set
  double drift = 0.05;                       // fraction of rows redrawn per policy version
  double hard_fraction = 0.0;                // prompts opening with the hard token
  LatencyParams latency;
  std::size_t threads = 0;  // 0: hardware concurrency

  double tail_eta() const { return eta.value_or(1.25); }
  std::size_t intra_threshold() const { return threshold.value_or(8); }
  std::size_t intra_helpers() const { return helpers.value_or(6); }
  std::size_t group_cap() const {
    if (pregen_group_cap > 0) return pregen_group_cap;
    return 2 * ((batch + ranks - 1) / ranks);
  }

  void validate() const {
    if (ranks == 0) throw ConfigError("ranks must be >= 1");
    if (batch == 0) throw ConfigError("batch must be >= 1");
    if (group == 0) throw ConfigError("group must be >= 1");
    if (draft_len == 0 || draft_len > 1000) throw ConfigError("draft-len must lie in [1, 1000]");
    if (poll_interval == 0) throw ConfigError("poll-interval must be >= 1");
    if (max_len == 0) throw ConfigError("max-len must be >= 1");
    if (prompt_len == 0) throw ConfigError("prompt length must be >= 1");
    if (depth == 0) throw ConfigError("suffix depth must be >= 1");
    if (min_match == 0) throw ConfigError("min-match must be >= 1");
    if (ngram_min == 0 || ngram_max < ngram_min) throw ConfigError("ngram sizes must satisfy 1 <= min <= max");
    if (uses_pregen(mode) && group_pre == 0) throw ConfigError("group-pre must be >= 1 in " + std::string(to_string(mode)));
    if (eta && mode != Mode::kTailBatching) {
      throw ConfigError("eta applies only to tail-batching mode, not " + std::string(to_string(mode)));
    }
    if ((threshold || helpers) && mode != Mode::kIntraGpu) {
      throw ConfigError("threshold/helpers apply only to intra-gpu mode, not " + std::string(to_string(mode)));
    }
    if (mode == Mode::kTailBatching && !(tail_eta() > 1.0)) throw ConfigError("eta must be > 1");
    if (mode == Mode::kIntraGpu && intra_helpers() >= ranks) throw ConfigError("helpers must be < ranks");
    if (!(drift >= 0.0 && drift <= 1.0)) throw ConfigError("drift must lie in [0, 1]");
    if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0)) throw ConfigError("hard fraction must lie in [0, 1]");
    sampling.validate();
    latency.validate();
    if (!policy_table) {
      if (policy.vocab < 3) throw ConfigError("generated policy needs vocab >= 3");
      if (!(policy.rho >= 0.0 && policy.rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
      Vocabulary{policy.vocab, policy.eos}.validate();
    }
  }
};

// Stream tags keep main, pre-generation, and prompt draws independent.
inline constexpr std::uint64_t kMainStream = 0x4D41494EULL;
inline constexpr std::uint64_t kPregenStream = 0x50524547ULL;
inline constexpr std::uint64_t kPromptStream = 0x50524F4DULL;

struct BatchPlan {
  std::uint64_t step = 0;
  std::vector<PromptId> prompts;
  std::vector<TokenSequence> prompt_tokens;
  std::size_t group = 16;
  std::size_t group_pre = 16;

  std::size_t size() const { return prompts.size(); }
  std::size_t total_requests() const { return prompts.size() * group; }
};

// Round-robin by prompt index; a prompt's whole group shares one rank.
inline std::vector<std::size_t> dispatch(const BatchPlan& plan, std::size_t ranks) {
  if (ranks == 0) throw ConfigError("dispatch needs at least one rank");
  std::vector<std::size_t> owner(plan.size());
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i % ranks;
  return owner;
}

inline std::map<PromptId, std::size_t> assignment_map(const BatchPlan& plan, std::span<const std::size_t> owner) {
  std::map<PromptId, std::size_t> m;
  for (std::size_t i = 0; i < plan.size(); ++i) m[plan.prompts[i]] = owner[i];
  return m;
}

// Prompt token i is uniform over non-EOS tokens; the opener is the hard token
// (id 1, or 2 when EOS is 1) with probability hard_fraction.
inline TokenSequence make_prompt(const SimConfig& cfg, const Vocabulary& vocab, PromptId id) {
  Rng rng(derive_seed({cfg.seed, id, kPromptStream}));
  const TokenId hard = vocab.eos == 1 ? 2 : 1;
  TokenSequence p;
  p.reserve(cfg.prompt_len);
  auto ordinary = [&](bool opener) {
    while (true) {
      const auto t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab.size)));
      if (t == vocab.eos || (opener && t <= hard)) continue;
      return t;
    }
  };
  const bool is_hard = cfg.hard_fraction > 0.0 && rng.uniform() < cfg.hard_fraction;
  p.push_back(is_hard ? hard : ordinary(true));
  while (p.size() < cfg.prompt_len) p.push_back(ordinary(false));
  return p;
}

inline BatchPlan make_plan(const SimConfig& cfg, const Vocabulary& vocab, std::uint64_t step, PromptId first_id,
                           std::size_t count) {
  BatchPlan plan;
  plan.step = step;
  plan.group = cfg.group;
  plan.group_pre = cfg.group_pre;
  for (std::size_t i = 0; i < count; ++i) {
    plan.prompts.push_back(first_id + i);
    plan.prompt_tokens.push_back(make_prompt(cfg, vocab, first_id + i));
  }
  return plan;
}

// Draft indices for one step, built from the previous step's pools.
struct DraftSet {
  std::uint64_t target_step = 0;
  std::uint64_t source_version = 0;
  std::vector<TokenPool> pools;
  std::vector<SuffixTree> trees;  // parallel to pools
  std::unordered_map<PromptId, std::size_t> by_prompt;
  std::vector<std::uint64_t> rank_visits;
  std::vector<double> rank_build_ms;
  std::size_t nodes = 0;

  const TokenPool* pool(PromptId p) const {
    const auto it = by_prompt.find(p);
    return it == by_prompt.end() ? nullptr : &pools[it->second];
  }
  const SuffixTree* tree(PromptId p) const {
    const auto it = by_prompt.find(p);
    return it == by_prompt.end() ? nullptr : &trees[it->second];
  }
};

// Shards pools by the target plan's dispatch and builds one tree per prompt.
inline DraftSet build_draft_set(std::vector<TokenPool> pools, const BatchPlan& target, const SimConfig& cfg) {
  DraftSet d;
  d.target_step = target.step;
  d.source_version = target.step == 0 ? 0 : target.step - 1;
  const auto owner = dispatch(target, cfg.ranks);
  const auto shards = shard_pools(pools, assignment_map(target, owner), cfg.ranks);
  d.rank_visits.assign(cfg.ranks, 0);
  d.rank_build_ms.assign(cfg.ranks, 0.0);
  for (std::size_t r = 0; r < cfg.ranks; ++r) {
    for (const auto& pool : shards[r]) {
      if (pool.version != d.source_version) {
        throw StalenessError("pool for prompt " + std::to_string(pool.prompt) + " has version " +
                             std::to_string(pool.version) + ", expected " + std::to_string(d.source_version));
      }
      d.by_prompt[pool.prompt] = d.pools.size();
      d.pools.push_back(pool);
      d.trees.push_back(SuffixTree::build(pool, cfg.depth));
      d.rank_visits[r] += d.trees.back().build_visits();
      d.nodes += d.trees.back().node_count();
    }
    d.rank_build_ms[r] = static_cast<double>(d.rank_visits[r]) * cfg.latency.build_ms_per_visit;
  }
  return d;
}

// Completion flags stamped with simulated time, plus the board of prompts
// already claimed for pre-generation. The only state shared across ranks.
class Synchronizer {
 public:
  explicit Synchronizer(std::size_t ranks) : done_at_(ranks, kNever) {}

  void flag(std::size_t rank, double t) { done_at_.at(rank) = t; }
  bool done(std::size_t rank, double t) const { return done_at_.at(rank) <= t; }
  bool all_complete(double t) const {
    return std::all_of(done_at_.begin(), done_at_.end(), [&](double d) { return d <= t; });
  }
  double completion() const { return *std::max_element(done_at_.begin(), done_at_.end()); }

  bool claim(PromptId p) { return claimed_.emplace(p, true).second; }

 private:
  static constexpr double kNever = std::numeric_limits<double>::infinity();
  std::vector<double> done_at_;
  std::unordered_map<PromptId, bool> claimed_;
};

// Facts the invariant checker needs about one simulated step.
struct StepAudit {
  std::uint64_t step = 0;
  std::size_t expected_responses = 0;
  std::size_t completed_responses = 0;
  std::size_t stale_responses = 0;  // responses not tagged with the step's policy version
  std::size_t stale_pools = 0;      // pools not tagged with the step's policy version
  std::size_t poll_interval = 0;
  std::size_t max_overshoot = 0;
  double start_ms = 0;
  double completion_ms = 0;
  double barrier_ms = 0;
  std::vector<double> rank_start_ms;
  std::vector<double> rank_halt_ms;
};

inline std::vector<std::string> check_invariants(const StepAudit& a, std::optional<double> previous_barrier_ms) {
  std::vector<std::string> bad;
  const auto step = std::to_string(a.step);
  if (a.completed_responses != a.expected_responses) {
    bad.push_back("step " + step + ": completed " + std::to_string(a.completed_responses) + " of " +
                  std::to_string(a.expected_responses) + " responses");
  }
  if (a.stale_responses) bad.push_back("step " + step + ": response tagged with a stale policy version");
  if (a.stale_pools) bad.push_back("step " + step + ": pool tagged with the wrong policy version");
  if (a.max_overshoot > a.poll_interval) {
    bad.push_back("step " + step + ": pre-generation overshoot " + std::to_string(a.max_overshoot) + " > " +
                  std::to_string(a.poll_interval));
  }
  for (double h : a.rank_halt_ms) {
    if (h < a.completion_ms) bad.push_back("step " + step + ": rank halted before global completion");
    if (h > a.barrier_ms) bad.push_back("step " + step + ": rank halted after the barrier");
  }
  if (previous_barrier_ms) {
    for (double s : a.rank_start_ms) {
      if (s < *previous_barrier_ms) bad.push_back("step " + step + ": rank started before the previous barrier");
    }
  }
  return bad;
}

struct StepResult {
  RunReport report;
  std::vector<TokenPool> pools;  // pre-generated for step N+1, version N
  std::vector<RolloutResult> responses;
  StepAudit audit;
};

namespace detail {

struct PregenRequest {
  PromptId prompt = 0;
  std::size_t prompt_len = 0;
  TokenSequence seq;
  Rng rng{0};
  bool done = false;
};

struct RankSim {
  std::size_t id = 0;
  std::vector<std::size_t> main;       // indices into the step's responses
  std::vector<std::size_t> active;     // still decoding
  std::vector<std::size_t> emitted;    // per main index, tokens emitted so far
  std::vector<PregenRequest> pregen;
  std::vector<double> pregen_starts;   // start time of every pre-generation iteration
  std::size_t iter = 0;
  bool complete = false;
  bool pregen_on = false;
  bool halted = false;
  bool idle = false;  // every pre-generated response finished before the stop signal
  double halt_at = 0;  // absolute; the trace keeps it relative to the step start
  RankTrace trace;
};

template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

// Runs single steps of the non-tail modes. Holds the policy family so step N
// samples from version N.
class Simulator {
 public:
  explicit Simulator(SimConfig cfg)
      : cfg_((cfg.validate(), std::move(cfg))), family_(base_policy(cfg_), cfg_.drift, cfg_.seed) {
    vocab_ = family_.at(0).vocabulary();
  }

  const SimConfig& config() const { return cfg_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const MarkovPolicy& policy(std::uint64_t version) { return family_.at(version); }

  BatchPlan plan(std::uint64_t step) const { return make_plan(cfg_, vocab_, step, step * cfg_.batch, cfg_.batch); }

  // One training step. `drafts` must target this step (or be null).
  StepResult run_step(const BatchPlan& plan, const DraftSet* drafts, double start_ms = 0.0);

  static MarkovPolicy base_policy(const SimConfig& cfg) {
    if (cfg.policy_table) return *cfg.policy_table;
    MarkovSpec spec = cfg.policy;
    if (cfg.hard_fraction > 0.0 && spec.hazard.hard_openers == 0) {
      spec.hazard.hard_openers = (spec.eos == 1 ? 2 : 1) + 1;
    }
    return MarkovPolicy::generate(spec);
  }

 private:
  double iteration_ms(const detail::RankSim& rank, const std::vector<RolloutResult>& responses,
                      std::span<const std::size_t> prompt_len, bool with_trees) const;

  SimConfig cfg_;
  PolicyFamily family_;
  Vocabulary vocab_;
};

inline double Simulator::iteration_ms(const detail::RankSim& rank, const std::vector<RolloutResult>& responses,
                                      std::span<const std::size_t> prompt_len, bool with_trees) const {
  StepComposition c;
  double q_sum = 0.0, ctx_sum = 0.0;
  std::uint64_t scan = 0;
  for (std::size_t i : rank.active) {
    const auto& rec = responses[i].steps[rank.iter];
    if (rec.proposed > 0) {
      c.n_spec += 1;
      q_sum += rec.proposed;
    } else {
      c.n_normal += 1;
    }
    scan += rec.scan;
    ctx_sum += static_cast<double>(prompt_len[i] + rank.emitted[i]);
  }
  double injected = 0;
  for (const auto& p : rank.pregen) {
    if (p.done) continue;
    c.n_normal += 1;
    injected += 1;
    ctx_sum += static_cast<double>(p.seq.size());
  }
  const double n = c.requests();
  if (n <= 0) return 0.0;
  c.drafts = c.n_spec > 0 ? q_sum / c.n_spec : 0.0;
  c.mean_context = ctx_sum / n;
  const auto& lp = cfg_.latency;
  double ms = step_latency(c, lp);
  if (!rank.complete && injected > 0) ms *= 1.0 + lp.interference * injected / n;
  if (with_trees) ms += lp.suffix_lookup_ms * static_cast<double>(rank.active.size());
  ms += lp.ngram_scan_ms * static_cast<double>(scan);
  return ms;
}

inline StepResult Simulator::run_step(const BatchPlan& plan, const DraftSet* drafts, double start_ms) {
  const std::uint64_t N = plan.step;
  if (drafts && drafts->target_step != N) {
    throw StalenessError("draft set targets step " + std::to_string(drafts->target_step) + " but step " +
                         std::to_string(N) + " is running");
  }
  if (drafts && N > 0 && drafts->source_version != N - 1) {
    throw StalenessError("draft set built from version " + std::to_string(drafts->source_version) +
                         " cannot serve step " + std::to_string(N));
  }
  const Mode mode = cfg_.mode;
  const bool speculative = mode != Mode::kBaseline && drafts != nullptr;
  const bool indexed = speculative && mode != Mode::kNgramDraft;
  const auto& policy = family_.at(N);
  const std::size_t R = cfg_.ranks;
  const std::size_t G = plan.group;
  const auto owner = dispatch(plan, R);

  // Main rollouts depend only on (policy, drafts, seed); precompute them.
  const std::size_t total = plan.size() * G;
  std::vector<RolloutResult> responses(total);
  std::vector<std::size_t> prompt_len(total);
  detail::parallel_for(total, cfg_.threads, [&](std::size_t idx) {
    const std::size_t pi = idx / G, s = idx % G;
    const PromptId pid = plan.prompts[pi];
    const auto& prompt = plan.prompt_tokens[pi];
    Rng rng(derive_seed({cfg_.seed, N, pid, s, kMainStream}));
    RolloutResult r;
    if (speculative && mode == Mode::kNgramDraft) {
      NgramDrafts src{NgramMatcher(drafts->pool(pid), cfg_.ngram_max, cfg_.ngram_min), cfg_.draft_len};
      r = rollout(prompt, policy, src, cfg_.sampling, cfg_.max_len, rng);
    } else {
      const SuffixTree* tree = speculative ? drafts->tree(pid) : nullptr;
      r = rollout(prompt, policy, tree, cfg_.draft_len, cfg_.sampling, cfg_.max_len, rng, cfg_.min_match);
    }
    r.policy_version = N;
    responses[idx] = std::move(r);
    prompt_len[idx] = prompt.size();
  });

  std::vector<detail::RankSim> ranks(R);
  std::vector<std::vector<std::size_t>> next_owned(R);  // N+1 prompt indices per rank
  BatchPlan next;
  std::vector<std::size_t> next_owner;
  if (uses_pregen(mode)) {
    next = this->plan(N + 1);
    next_owner = dispatch(next, R);
    for (std::size_t i = 0; i < next.size(); ++i) next_owned[next_owner[i]].push_back(i);
  }
  for (std::size_t r = 0; r < R; ++r) {
    ranks[r].id = r;
    ranks[r].trace.rank = r;
  }
  for (std::size_t idx = 0; idx < total; ++idx) {
    auto& rank = ranks[owner[idx / G]];
    rank.main.push_back(idx);
    rank.active.push_back(idx);
  }
  for (auto& rank : ranks) rank.emitted.assign(total, 0);

  Synchronizer sync(R);
  const std::size_t T = cfg_.poll_interval;
  const std::size_t cap = cfg_.group_cap();
  std::size_t helpers_used = 0;

  // Claims the rank's own N+1 prompts first, then round-robin over the
  // prompts of ranks still decoding, up to the group cap.
  auto start_pregen = [&](detail::RankSim& rank, double t) {
    std::vector<std::size_t> picks;
    for (std::size_t i : next_owned[rank.id]) {
      if (picks.size() >= cap) break;
      if (sync.claim(next.prompts[i])) picks.push_back(i);
    }
    std::size_t depth = 0;
    bool more = true;
    while (picks.size() < cap && more) {
      more = false;
      for (std::size_t off = 1; off < R && picks.size() < cap; ++off) {
        const std::size_t other = (rank.id + off) % R;
        if (depth >= next_owned[other].size()) continue;
        more = true;
        if (sync.done(other, t)) continue;
        const std::size_t i = next_owned[other][depth];
        if (sync.claim(next.prompts[i])) picks.push_back(i);
      }
      ++depth;
    }
    for (std::size_t i : picks) {
      for (std::size_t s = 0; s < plan.group_pre; ++s) {
        detail::PregenRequest req;
        req.prompt = next.prompts[i];
        req.seq = next.prompt_tokens[i];
        req.prompt_len = req.seq.size();
        req.rng = Rng(derive_seed({cfg_.seed, N, req.prompt, s, kPregenStream}));
        rank.pregen.push_back(std::move(req));
      }
    }
    rank.pregen_on = true;
  };

  using Event = std::tuple<double, std::size_t>;  // (time, rank): ties resolve by rank id
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events;
  std::vector<double> rank_start(R, start_ms);
  for (std::size_t r = 0; r < R; ++r) {
    if (indexed && r < drafts->rank_build_ms.size()) rank_start[r] += drafts->rank_build_ms[r];
    events.emplace(rank_start[r], r);
  }

  while (!events.empty()) {
    const auto [t, r] = events.top();
    events.pop();
    auto& rank = ranks[r];

    if (!rank.complete && rank.active.empty()) {
      rank.complete = true;
      rank.trace.main_complete_ms = t - start_ms;
      rank.trace.iterations = rank.iter;
      sync.flag(r, t);
      if (!uses_pregen(mode)) {
        rank.halted = true;
        rank.idle = true;
        rank.halt_at = t;
        rank.trace.halt_ms = t - start_ms;
        continue;
      }
    }
    if (rank.complete) {
      const std::size_t steps = rank.trace.pregen_steps;
      if (steps % T == 0) {
        rank.trace.polls++;
        if (sync.all_complete(t)) {
          rank.halted = true;
          rank.halt_at = t;
          rank.trace.halt_ms = t - start_ms;
          continue;
        }
      }
      if (!rank.pregen_on) start_pregen(rank, t);
      if (std::none_of(rank.pregen.begin(), rank.pregen.end(), [](const auto& p) { return !p.done; })) {
        rank.halted = true;
        rank.idle = true;
        rank.halt_at = t;
        rank.trace.halt_ms = t - start_ms;
        continue;
      }
    } else if (mode == Mode::kIntraGpu && !rank.pregen_on && rank.active.size() < cfg_.intra_threshold() &&
               helpers_used < cfg_.intra_helpers()) {
      ++helpers_used;
      rank.trace.helper = true;
      rank.trace.injected_at_ms = t - start_ms;
      start_pregen(rank, t);
    }

    const double dt = iteration_ms(rank, responses, prompt_len, indexed);
    // Advance main requests.
    if (!rank.complete) {
      std::size_t keep = 0;
      for (std::size_t i : rank.active) {
        rank.emitted[i] += responses[i].steps[rank.iter].emitted;
        if (responses[i].steps.size() > rank.iter + 1) rank.active[keep++] = i;
      }
      rank.active.resize(keep);
      rank.iter++;
    }
    // Advance pre-generation by one plain sample per request.
    bool any_pregen = false;
    for (auto& p : rank.pregen) {
      if (p.done) continue;
      any_pregen = true;
      const TokenId x = sample(target_distribution(policy, p.seq, cfg_.sampling), p.rng);
      p.seq.push_back(x);
      if (x == vocab_.eos || p.seq.size() - p.prompt_len >= cfg_.max_len) p.done = true;
    }
    if (any_pregen) {
      rank.pregen_starts.push_back(t - start_ms);
      rank.trace.pregen_steps++;
    }
    events.emplace(t + dt, r);
  }

  const double completion = sync.completion();
  const double wall_ms = completion - start_ms;
  double barrier = completion;
  StepAudit audit;
  audit.step = N;
  audit.poll_interval = T;
  audit.start_ms = start_ms;
  audit.completion_ms = completion;
  audit.rank_start_ms = rank_start;
  std::vector<RankTrace> traces;
  for (auto& rank : ranks) {
    if (rank.idle) {
      rank.halt_at = std::max(rank.halt_at, completion);
      rank.trace.halt_ms = rank.halt_at - start_ms;
    }
    barrier = std::max(barrier, rank.halt_at);
    std::size_t over = 0;
    for (double s : rank.pregen_starts) {
      if (s >= wall_ms) ++over;
    }
    rank.trace.overshoot_steps = over;
    audit.max_overshoot = std::max(audit.max_overshoot, over);
    audit.rank_halt_ms.push_back(rank.halt_at);
    for (const auto& p : rank.pregen) rank.trace.pregen_tokens += p.seq.size() - p.prompt_len;
    traces.push_back(rank.trace);
  }
  audit.barrier_ms = barrier;
  audit.expected_responses = plan.total_requests();
  for (const auto& r : responses) {
    const bool finished = r.response.size() >= cfg_.max_len || (!r.response.empty() && r.response.back() == vocab_.eos);
    if (finished) audit.completed_responses++;
    if (r.policy_version != N) audit.stale_responses++;
  }

  // Pools for step N+1, one per claimed prompt, in plan order.
  StepResult out;
  std::map<PromptId, std::size_t> pool_of;
  PoolStats ps;
  std::uint64_t pool_seq = 0, pool_len = 0;
  for (const auto& rank : ranks) {
    for (const auto& p : rank.pregen) {
      auto it = pool_of.find(p.prompt);
      if (it == pool_of.end()) {
        it = pool_of.emplace(p.prompt, out.pools.size()).first;
        out.pools.push_back(TokenPool{p.prompt, N, {}});
      }
      out.pools[it->second].sequences.emplace_back(p.seq.begin() + static_cast<std::ptrdiff_t>(p.prompt_len),
                                                    p.seq.end());
      const std::size_t len = p.seq.size() - p.prompt_len;
      ++pool_seq;
      pool_len += len;
      ps.length_max = std::max(ps.length_max, len);
    }
  }
  std::sort(out.pools.begin(), out.pools.end(), [](const auto& a, const auto& b) { return a.prompt < b.prompt; });
  for (const auto& pool : out.pools) {
    if (pool.version != N) audit.stale_pools++;
  }
  ps.tokens = pool_len;
  ps.length_avg = pool_seq ? static_cast<double>(pool_len) / pool_seq : 0.0;

  BuildStats bs;
  if (indexed) {
    for (std::size_t r = 0; r < drafts->rank_visits.size(); ++r) {
      if (drafts->rank_build_ms[r] >= bs.ms) {
        bs.ms = drafts->rank_build_ms[r];
        bs.visits = drafts->rank_visits[r];
      }
    }
    bs.nodes = drafts->nodes;
  }
  StepTiming timing{N, std::string(to_string(mode)), start_ms, wall_ms, barrier - start_ms};
  out.report = aggregate(responses, traces, timing, cfg_.draft_len, ps, bs);
  if (mode == Mode::kBaseline || mode == Mode::kTailBatching) {
    out.report.pregen_tokens = 0;
  }
  if (uses_pregen(mode) && !drafts) out.report.flags.push_back("cold_start");
  out.responses = std::move(responses);
  out.audit = std::move(audit);
  return out;
}

// Multi-step driver: chains pools into next-step draft sets and checks the
// scheduler invariants after every step.
struct RunOutput {
  std::vector<RunReport> reports;
  std::vector<StepAudit> audits;
  std::vector<std::string> violations;
  std::vector<std::vector<TokenPool>> pools;  // per step, when kept
};

struct RunHooks {
  bool keep_pools = false;
  std::function<void(const StepResult&)> on_step;
};

inline RunOutput run_steps(Simulator& sim, std::size_t steps, const RunHooks& hooks = {}) {
  RunOutput out;
  std::optional<DraftSet> drafts;
  double clock = 0.0;
  std::optional<double> prev_barrier;
  for (std::uint64_t n = 0; n < steps; ++n) {
    const auto plan = sim.plan(n);
    auto res = sim.run_step(plan, drafts ? &*drafts : nullptr, clock);
    for (auto& v : check_invariants(res.audit, prev_barrier)) out.violations.push_back(std::move(v));
    prev_barrier = res.audit.barrier_ms;
    clock = res.audit.barrier_ms;
    if (hooks.on_step) hooks.on_step(res);
    if (uses_pregen(sim.config().mode) && n + 1 < steps) {
      drafts = build_draft_set(res.pools, sim.plan(n + 1), sim.config());
    } else {
      drafts.reset();
    }
    if (hooks.keep_pools) out.pools.push_back(std::move(res.pools));
    out.reports.push_back(std::move(res.report));
    out.audits.push_back(std::move(res.audit));
  }
  return out;
}

// ---- tail batching ----

struct RoundReport {
  std::size_t round = 0;
  std::string kind;  // "short", "tail", or "flush"
  double wall_s = 0;
  std::size_t groups_started = 0;
  std::size_t groups_completed = 0;
  std::size_t groups_deferred = 0;
  std::size_t queue_after = 0;
  std::size_t max_response_length = 0;
  double decoding_steps_avg = 0;
};

struct TailBatchingResult {
  std::vector<RoundReport> rounds;
  std::vector<RunReport> reports;
  std::size_t groups_per_round = 0;
  bool eta_rounded_up = false;
  std::size_t prompts_started = 0;
  std::size_t prompts_completed = 0;
  std::vector<PromptId> completion_order;
};

namespace detail {

// Per-iteration cumulative time (ms) of one rank decoding `reqs` together.
inline std::vector<double> rank_timeline(std::span<const RolloutResult* const> reqs, const LatencyParams& lp) {
  std::size_t longest = 0;
  for (const auto* r : reqs) longest = std::max(longest, r->steps.size());
  std::vector<double> cum(longest, 0.0);
  std::vector<std::size_t> emitted(reqs.size(), 0);
  double t = 0.0;
  for (std::size_t j = 0; j < longest; ++j) {
    StepComposition c;
    double q = 0, ctx = 0;
    for (std::size_t i = 0; i < reqs.size(); ++i) {
      const auto& r = *reqs[i];
      if (j >= r.steps.size()) continue;
      if (r.steps[j].proposed > 0) {
        c.n_spec += 1;
        q += r.steps[j].proposed;
      } else {
        c.n_normal += 1;
      }
      ctx += static_cast<double>(r.prompt_length + emitted[i]);
      emitted[i] += r.steps[j].emitted;
    }
    c.drafts = c.n_spec > 0 ? q / c.n_spec : 0.0;
    c.mean_context = ctx / c.requests();
    t += step_latency(c, lp);
    cum[j] = t;
  }
  return cum;
}

}  // namespace detail

// Tail batching: each round starts ceil(eta B) groups and ends when B groups
// have completed; unfinished groups queue up and are restarted together in a
// dedicated tail round once the queue holds B of them.
inline TailBatchingResult run_tail_batching(const SimConfig& cfg_in, std::size_t rounds) {
  SimConfig cfg = cfg_in;
  cfg.mode = Mode::kTailBatching;
  cfg.validate();
  PolicyFamily family(Simulator::base_policy(cfg), cfg.drift, cfg.seed);
  const Vocabulary vocab = family.at(0).vocabulary();
  const double eta = cfg.tail_eta();
  const std::size_t B = cfg.batch, G = cfg.group, R = cfg.ranks;
  const double exact = eta * static_cast<double>(B);
  const auto per_round = static_cast<std::size_t>(std::ceil(exact - 1e-9));

  TailBatchingResult out;
  out.groups_per_round = per_round;
  out.eta_rounded_up = std::abs(exact - std::round(exact)) > 1e-9;

  std::vector<std::pair<PromptId, TokenSequence>> queue;
  PromptId next_id = 0;
  double clock = 0.0;

  auto run_round = [&](std::size_t index, std::string kind, std::vector<std::pair<PromptId, TokenSequence>> groups,
                       bool early_stop) {
    const auto& policy = family.at(index);
    const std::size_t n = groups.size();
    std::vector<RolloutResult> res(n * G);
    detail::parallel_for(n * G, cfg.threads, [&](std::size_t idx) {
      Rng rng(derive_seed({cfg.seed, index, groups[idx / G].first, idx % G, kMainStream}));
      res[idx] = autoregressive_rollout(groups[idx / G].second, policy, cfg.sampling, cfg.max_len, rng);
      res[idx].policy_version = index;
    });
    // Group completion = latest sample of the group on its rank's timeline.
    std::vector<std::tuple<double, std::size_t, std::size_t>> done;  // (time, rank, group)
    std::vector<double> rank_end(R, 0.0);
    for (std::size_t r = 0; r < R; ++r) {
      std::vector<const RolloutResult*> reqs;
      std::vector<std::size_t> gids;
      for (std::size_t g = r; g < n; g += R) {
        gids.push_back(g);
        for (std::size_t s = 0; s < G; ++s) reqs.push_back(&res[g * G + s]);
      }
      if (reqs.empty()) continue;
      const auto cum = detail::rank_timeline(reqs, cfg.latency);
      rank_end[r] = cum.back();
      for (std::size_t k = 0; k < gids.size(); ++k) {
        std::size_t longest = 0;
        for (std::size_t s = 0; s < G; ++s) longest = std::max(longest, reqs[k * G + s]->steps.size());
        done.emplace_back(cum[longest - 1], r, gids[k]);
      }
    }
    std::sort(done.begin(), done.end());
    const std::size_t finish = early_stop ? std::min(B, done.size()) : done.size();
    const double wall = finish ? std::get<0>(done[finish - 1]) : 0.0;
    std::vector<bool> completed(n, false);
    for (std::size_t i = 0; i < finish; ++i) completed[std::get<2>(done[i])] = true;

    RoundReport rr;
    rr.round = index;
    rr.kind = std::move(kind);
    rr.wall_s = wall / 1000.0;
    rr.groups_started = n;
    rr.groups_completed = finish;
    rr.groups_deferred = n - finish;
    std::vector<RolloutResult> kept;
    std::vector<RankTrace> traces(R);
    for (std::size_t r = 0; r < R; ++r) {
      traces[r].rank = r;
      traces[r].main_complete_ms = std::min(rank_end[r], wall);
      traces[r].halt_ms = wall;
    }
    for (std::size_t g = 0; g < n; ++g) {
      if (completed[g]) {
        out.completion_order.push_back(groups[g].first);
        for (std::size_t s = 0; s < G; ++s) {
          rr.max_response_length = std::max(rr.max_response_length, res[g * G + s].response.size());
          kept.push_back(res[g * G + s]);
        }
      } else {
        queue.push_back(std::move(groups[g]));
      }
    }
    rr.queue_after = queue.size();
    out.prompts_completed += finish;
    StepTiming timing{index, "tail-batching", clock, wall, wall};
    auto report = aggregate(kept, traces, timing, cfg.draft_len);
    report.flags.push_back("round_" + rr.kind);
    if (out.eta_rounded_up) report.flags.push_back("eta_rounded_up");
    rr.decoding_steps_avg = report.decoding_steps_avg;
    clock += wall;
    out.rounds.push_back(std::move(rr));
    out.reports.push_back(std::move(report));
  };

  for (std::size_t i = 0; i < rounds; ++i) {
    if (queue.size() >= B) {
      std::vector<std::pair<PromptId, TokenSequence>> tail(queue.begin(), queue.begin() + static_cast<std::ptrdiff_t>(B));
      queue.erase(queue.begin(), queue.begin() + static_cast<std::ptrdiff_t>(B));
      run_round(i, "tail", std::move(tail), false);
      continue;
    }
    std::vector<std::pair<PromptId, TokenSequence>> fresh;
    for (std::size_t g = 0; g < per_round; ++g, ++next_id) fresh.emplace_back(next_id, make_prompt(cfg, vocab, next_id));
    out.prompts_started += per_round;
    run_round(i, "short", std::move(fresh), true);
  }
  if (cfg.flush_tail && !queue.empty()) {
    auto rest = std::move(queue);
    queue.clear();
    run_round(rounds, "flush", std::move(rest), false);
  }
  return out;
}

// Plot series for round comparisons.
inline void write_round_series(std::ostream& out, std::span<const RoundReport> rounds) {
  out << "round,kind,wall_s,groups_started,groups_completed,groups_deferred,queue_after,max_response_length\n";
  for (const auto& r : rounds) {
    out << r.round << ',' << r.kind << ',' << r.wall_s << ',' << r.groups_started << ',' << r.groups_completed << ','
        << r.groups_deferred << ',' << r.queue_after << ',' << r.max_response_length << '\n';
  }
}

}  // namespace bsim
