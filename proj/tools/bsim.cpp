// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// bsim: run, verify, and compare rollout-scheduler simulations.
//
// Exit codes: 0 ok, 1 invalid configuration, 2 runtime failure,
// 3 verification failure. Failures print one line to stderr:
//   error code=<n> kind=<validation|runtime|verification> message="..."

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bsim/bsim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kValidation = 1, kRuntime = 2, kVerification = 3 };

struct Failure : std::runtime_error {
  Failure(ExitCode c, const std::string& m) : std::runtime_error(m), code(c) {}
  ExitCode code;
};

int report_error(ExitCode code, std::string message) {
  static const char* kinds[] = {"ok", "validation", "runtime", "verification"};
  for (auto& ch : message) {
    if (ch == '\n' || ch == '\r') ch = ' ';
    if (ch == '"') ch = '\'';
  }
  std::cerr << "error code=" << code << " kind=" << kinds[code] << " message=\"" << message << "\"\n";
  return code;
}

// The shipped default profile: a heavy-tailed synthetic workload under the
// reference hyperparameters (T = 50, K = 4, G = 16, temperature 1, top-p 1).
bsim::RunConfig default_run_config() {
  bsim::RunConfig rc;
  auto& c = rc.sim;
  c.mode = bsim::Mode::kBubbleSpec;
  c.policy.vocab = 64;
  c.policy.rho = 0.6;
  c.policy.skew = 2.5;
  c.policy.hazard.kind = bsim::EosHazard::Kind::kHyperbolic;
  c.policy.hazard.rate = 3.0;
  c.policy.hazard.offset = 60.0;
  c.policy.hazard.hard_scale = 0.1;
  c.hard_fraction = 0.06;
  c.drift = 0.02;
  c.latency.knee_tokens = 1024;
  c.latency.attention_scale = 28;
  return rc;
}

struct RunFlags {
  bsim::RunConfig rc = default_run_config();
  std::string mode = "bubblespec";
  std::string attention = "unified";
  std::string hazard = "hyperbolic";
  double eta = 1.25;
  std::size_t threshold = 8;
  std::size_t helpers = 6;
  std::size_t top_k = 0;
  int hard_openers = 0;
  CLI::Option* eta_opt = nullptr;
  CLI::Option* threshold_opt = nullptr;
  CLI::Option* helpers_opt = nullptr;
  CLI::Option* top_k_opt = nullptr;
};

void add_run_options(CLI::App& app, RunFlags& f) {
  auto& rc = f.rc;
  auto& c = rc.sim;
  app.add_option("--mode", f.mode, "baseline | bubblespec | ngram-draft | tail-batching | intra-gpu")
      ->capture_default_str();
  app.add_option("--ranks", c.ranks, "data-parallel ranks (R)")->capture_default_str();
  app.add_option("--batch", c.batch, "prompts per step (B)")->capture_default_str();
  app.add_option("--group", c.group, "responses per prompt (G)")->capture_default_str();
  app.add_option("--group-pre", c.group_pre, "pre-generated responses per prompt")->capture_default_str();
  app.add_option("--draft-len", c.draft_len, "draft block length (K)")->capture_default_str();
  app.add_option("--poll-interval", c.poll_interval, "pre-generation polling interval (T)")->capture_default_str();
  app.add_option("--max-len", c.max_len, "maximum response length (L)")->capture_default_str();
  app.add_option("--prompt-len", c.prompt_len, "prompt length in tokens")->capture_default_str();
  app.add_option("--depth", c.depth, "suffix index depth (D)")->capture_default_str();
  app.add_option("--min-match", c.min_match, "minimum anchor length")->capture_default_str();
  app.add_option("--ngram-max", c.ngram_max, "longest n-gram tried by ngram-draft")->capture_default_str();
  app.add_option("--ngram-min", c.ngram_min, "shortest n-gram tried by ngram-draft")->capture_default_str();
  app.add_option("--pregen-cap", c.pregen_group_cap, "prompt groups one rank may pre-generate (0: twice its share)")
      ->capture_default_str();
  f.eta_opt = app.add_option("--eta", f.eta, "tail-batching expansion factor");
  f.threshold_opt = app.add_option("--threshold", f.threshold, "intra-gpu active-batch threshold");
  f.helpers_opt = app.add_option("--helpers", f.helpers, "intra-gpu helper rank count");
  app.add_option("--seed", c.seed, "base seed")->capture_default_str();
  app.add_option("--steps", rc.steps, "training steps (tail-batching: rounds)")->capture_default_str();
  app.add_option("--attention", f.attention, "split | unified")->capture_default_str();
  app.add_option("--temperature", c.sampling.temperature, "sampling temperature (0: greedy)")->capture_default_str();
  app.add_option("--top-p", c.sampling.top_p, "nucleus threshold")->capture_default_str();
  f.top_k_opt = app.add_option("--top-k", f.top_k, "top-k cutoff (unset: unbounded)");
  app.add_option("--policy-file", rc.policy_file, "Markov table to load instead of generating one");
  app.add_option("--vocab", c.policy.vocab, "generated policy vocabulary size")->capture_default_str();
  app.add_option("--eos", c.policy.eos, "end-of-sequence token")->capture_default_str();
  app.add_option("--order", c.policy.order, "Markov order")->capture_default_str();
  app.add_option("--rho", c.policy.rho, "mass on each context's canonical continuation")->capture_default_str();
  app.add_option("--skew", c.policy.skew, "Zipf exponent of the remaining mass")->capture_default_str();
  app.add_option("--hazard", f.hazard, "none | constant | hyperbolic")->capture_default_str();
  app.add_option("--hazard-rate", c.policy.hazard.rate, "stopping hazard rate")->capture_default_str();
  app.add_option("--hazard-offset", c.policy.hazard.offset, "hyperbolic hazard offset")->capture_default_str();
  app.add_option("--hard-scale", c.policy.hazard.hard_scale, "hazard multiplier for hard prompts")
      ->capture_default_str();
  app.add_option("--hard-fraction", c.hard_fraction, "fraction of prompts opening with the hard token")
      ->capture_default_str();
  app.add_option("--drift", c.drift, "fraction of policy rows redrawn per step")->capture_default_str();
  app.add_option("--token-ms", c.latency.token_ms, "per-token linear cost (ms)")->capture_default_str();
  app.add_option("--knee-tokens", c.latency.knee_tokens, "memory-bound token floor (0: off)")->capture_default_str();
  app.add_option("--attention-scale", c.latency.attention_scale, "attention multiplier (e.g. layer count)")
      ->capture_default_str();
  app.add_option("--context-slope", c.latency.context_slope, "attention dependence on context, 0..1")
      ->capture_default_str();
  app.add_option("--interference", c.latency.interference, "intra-gpu slowdown per injected fraction")
      ->capture_default_str();
  app.add_option("--suffix-lookup-ms", c.latency.suffix_lookup_ms, "per-request draft lookup cost (ms)")
      ->capture_default_str();
  app.add_option("--ngram-scan-ms", c.latency.ngram_scan_ms, "per scanned pool position (ms)")->capture_default_str();
  app.add_option("--build-ms-per-visit", c.latency.build_ms_per_visit, "suffix build cost per node visit (ms)")
      ->capture_default_str();
  app.add_option("--threads", c.threads, "worker threads for rollouts (0: all cores)")->capture_default_str();
  app.add_option("--out", rc.out, "output directory")->capture_default_str();
  app.add_flag("!--no-pools", rc.write_pools, "skip writing pre-generated pools");
  app.add_flag("-v,--verbose", rc.verbosity, "print per-step progress");
}

bsim::RunConfig finalize(RunFlags& f) {
  auto rc = f.rc;
  auto& c = rc.sim;
  c.mode = bsim::parse_mode(f.mode);
  c.latency.attention = bsim::parse_attention(f.attention);
  c.policy.hazard.kind = bsim::parse_hazard(f.hazard);
  if (f.eta_opt->count()) c.eta = f.eta;
  if (f.threshold_opt->count()) c.threshold = f.threshold;
  if (f.helpers_opt->count()) c.helpers = f.helpers;
  if (f.top_k_opt->count()) {
    if (f.top_k == 0) throw bsim::ConfigError("top-k must be >= 1");
    c.sampling.top_k = static_cast<std::int32_t>(f.top_k);
  }
  c.sampling.seed = c.seed;
  if (!rc.policy_file.empty()) {
    std::ifstream in(rc.policy_file);
    if (!in) throw bsim::ConfigError("cannot read policy file '" + rc.policy_file + "'");
    c.policy_table = bsim::MarkovPolicy::load(in);
  }
  rc.validate();
  return rc;
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string fmt_opt(const std::optional<double>& v, int prec = 2, double scale = 1.0) {
  return v ? fmt(*v * scale, prec) : std::string("-");
}

void print_table(std::ostream& out, const std::vector<bsim::RunSummary>& rows) {
  out << std::left << std::setw(14) << "mode" << std::right << std::setw(12) << "rollout(s)" << std::setw(11)
      << "avg steps" << std::setw(11) << "max steps" << std::setw(10) << "avg len" << std::setw(10) << "max len"
      << std::setw(9) << "acc len" << std::setw(11) << "draft len" << std::setw(10) << "acc rate" << std::setw(16)
      << "bubble avg/max" << "\n";
  for (const auto& s : rows) {
    out << std::left << std::setw(14) << s.mode << std::right << std::setw(12) << fmt(s.rollout_time_s, 3)
        << std::setw(11) << fmt(s.decoding_steps_avg, 1) << std::setw(11) << fmt(s.decoding_steps_max, 1)
        << std::setw(10) << fmt(s.response_length_avg, 1) << std::setw(10) << fmt(s.response_length_max, 1)
        << std::setw(9) << fmt_opt(s.acceptance_length) << std::setw(11) << fmt_opt(s.draft_length) << std::setw(10)
        << (s.acceptance_rate ? fmt(*s.acceptance_rate * 100, 2) + "%" : "-") << std::setw(16)
        << (fmt(s.bubble_time_avg_s, 2) + "/" + fmt(s.bubble_time_max_s, 2)) << "\n";
  }
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Failure(kRuntime, "cannot write '" + p.string() + "'");
  return f;
}

int cmd_run(const bsim::RunConfig& rc) {
  const fs::path dir(rc.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure(kRuntime, "cannot create output directory '" + rc.out + "': " + ec.message());
  auto jsonl = open_out(dir / "report.jsonl");
  jsonl << bsim::config_record(rc).dump() << "\n";

  std::vector<bsim::RunReport> reports;
  if (rc.sim.mode == bsim::Mode::kTailBatching) {
    auto res = bsim::run_tail_batching(rc.sim, rc.steps);
    for (std::size_t i = 0; i < res.reports.size(); ++i) {
      json j = res.reports[i];
      j["round_kind"] = res.rounds[i].kind;
      j["groups_deferred"] = res.rounds[i].groups_deferred;
      j["queue_after"] = res.rounds[i].queue_after;
      jsonl << j.dump() << "\n";
      if (rc.verbosity) {
        std::cout << "round " << i << " (" << res.rounds[i].kind << "): " << fmt(res.rounds[i].wall_s, 3) << " s\n";
      }
    }
    auto rounds_csv = open_out(dir / "rounds.csv");
    bsim::write_round_series(rounds_csv, res.rounds);
    if (res.eta_rounded_up) std::cout << "note: eta*B is not integral; rounded up to " << res.groups_per_round << "\n";
    double short_sum = 0, tail_sum = 0;
    std::size_t n_short = 0, n_tail = 0;
    for (const auto& r : res.rounds) {
      if (r.kind == "short") {
        short_sum += r.wall_s;
        ++n_short;
      } else {
        tail_sum += r.wall_s;
        ++n_tail;
      }
    }
    std::cout << "short rounds: " << n_short << " mean " << fmt(n_short ? short_sum / n_short : 0.0, 3)
              << " s; tail rounds: " << n_tail << " mean " << fmt(n_tail ? tail_sum / n_tail : 0.0, 3) << " s\n";
    reports = std::move(res.reports);
  } else {
    bsim::Simulator sim(rc.sim);
    if (rc.write_pools) fs::create_directories(dir / "pools", ec);
    bsim::RunHooks hooks;
    hooks.on_step = [&](const bsim::StepResult& s) {
      jsonl << json(s.report).dump() << "\n";
      if (rc.write_pools && bsim::uses_pregen(rc.sim.mode)) {
        auto pf = open_out(dir / "pools" / ("step-" + std::to_string(s.report.step + 1) + ".pools"));
        bsim::write_pools(pf, s.pools);
      }
      if (rc.verbosity) {
        std::cout << "step " << s.report.step << ": rollout " << fmt(s.report.rollout_time_s, 3) << " s, avg steps "
                  << fmt(s.report.decoding_steps_avg, 1) << "\n";
      }
    };
    auto out = bsim::run_steps(sim, rc.steps, hooks);
    if (!out.violations.empty()) throw Failure(kRuntime, "scheduler invariant violated: " + out.violations.front());
    reports = std::move(out.reports);
  }
  for (const auto& r : reports) {
    const auto bad = bsim::check_identities(r);
    if (!bad.empty()) throw Failure(kRuntime, "report identity violated at step " + std::to_string(r.step) + ": " + bad[0]);
  }
  const auto summary = bsim::summarize(reports);
  jsonl << json(summary).dump() << "\n";
  auto csv = open_out(dir / "report.csv");
  bsim::write_csv(csv, reports);
  auto series = open_out(dir / "bubble_series.csv");
  bsim::write_bubble_series(series, reports);
  print_table(std::cout, {summary});
  std::cout << "reports: " << (dir / "report.jsonl").string() << "\n";
  return kOk;
}

// ---- verify ----

struct VerifyFlags {
  std::string suite = "all";
  double tv_budget = 1e-10;
  std::string fault;
  std::uint64_t seed = 1;
};

double lossless_suite(const VerifyFlags& f, std::ostream& log) {
  const bsim::ResidualFn res = f.fault == "residual-norm" ? bsim::ResidualFn(bsim::unnormalized_residual)
                                                          : bsim::ResidualFn(bsim::residual);
  double worst = 0.0;
  const bsim::SamplingParams settings[] = {
      {1.0, 1.0, std::nullopt, 0}, {0.7, 0.9, std::nullopt, 0}, {1.3, 1.0, 3, 0}, {0.0, 1.0, std::nullopt, 0}};
  for (std::uint64_t inst = 0; inst < 8; ++inst) {
    bsim::MarkovSpec spec;
    spec.seed = f.seed * 1000 + inst;
    spec.vocab = 4;
    spec.rho = 0.3 + 0.1 * static_cast<double>(inst % 5);
    spec.hazard.kind = bsim::EosHazard::Kind::kConstant;
    spec.hazard.rate = 0.2;
    const auto policy = bsim::MarkovPolicy::generate(spec);
    bsim::Rng rng(bsim::derive_seed({spec.seed, 0xB001}));
    bsim::TokenPool pool{0, 0, {}};
    for (int s = 0; s < 6; ++s) {
      bsim::TokenSequence seq;
      const auto len = 2 + rng.below(5);
      for (std::uint64_t i = 0; i < len; ++i) seq.push_back(static_cast<bsim::TokenId>(rng.below(4)));
      pool.sequences.push_back(seq);
    }
    const auto tree = bsim::build(pool, 32);
    const bsim::TokenSequence prompt{static_cast<bsim::TokenId>(1 + rng.below(3))};
    for (const auto& params : settings) {
      const auto ar = bsim::enumerate_autoregressive(prompt, policy, params, 5);
      const auto sp = bsim::enumerate_speculative(prompt, policy, bsim::SuffixDrafts{&tree, 2, 1}, params, 5, res);
      worst = std::max(worst, bsim::total_variation(ar, sp));
    }
  }
  log << "lossless: max total-variation distance " << std::scientific << worst << std::defaultfloat << "\n";
  return worst;
}

std::size_t suffix_suite(const VerifyFlags& f, std::ostream& log) {
  std::size_t mismatches = 0, cases = 0;
  bsim::Rng rng(bsim::derive_seed({f.seed, 0x5FF1}));
  for (int p = 0; p < 60; ++p) {
    const auto vocab = 2 + rng.below(6);
    bsim::TokenPool pool{static_cast<bsim::PromptId>(p), 0, {}};
    const auto n = 1 + rng.below(20);
    for (std::uint64_t s = 0; s < n; ++s) {
      bsim::TokenSequence seq(rng.below(40));
      for (auto& t : seq) t = static_cast<bsim::TokenId>(rng.below(vocab));
      pool.sequences.push_back(seq);
    }
    const std::size_t depth = 2 + rng.below(31);
    const auto tree = bsim::build(pool, depth);
    for (int q = 0; q < 20; ++q) {
      bsim::TokenSequence prefix(1 + rng.below(24));
      for (auto& t : prefix) t = static_cast<bsim::TokenId>(rng.below(vocab));
      const std::size_t k = 1 + rng.below(6);
      const std::size_t min_match = 1 + rng.below(3);
      ++cases;
      if (!(bsim::retrieve_draft(tree, prefix, k, {depth, min_match}) ==
            bsim::oracle_retrieve(pool, prefix, k, depth, min_match))) {
        ++mismatches;
      }
    }
  }
  log << "suffix: " << cases - mismatches << "/" << cases << " retrievals match the scan oracle\n";
  return mismatches;
}

std::size_t metrics_suite(const VerifyFlags& f, std::ostream& log) {
  std::size_t failures = 0;
  const auto pinned = bsim::acceptance_rate_from(2.15, 3.84);
  if (!pinned || std::abs(*pinned - 0.29947916666666666) > 1e-12) ++failures;
  for (auto mode : {bsim::Mode::kBaseline, bsim::Mode::kBubbleSpec, bsim::Mode::kNgramDraft}) {
    auto rc = default_run_config();
    rc.sim.mode = mode;
    rc.sim.ranks = 4;
    rc.sim.batch = 8;
    rc.sim.group = 4;
    rc.sim.group_pre = 4;
    rc.sim.max_len = 256;
    rc.sim.seed = f.seed;
    bsim::Simulator sim(rc.sim);
    const auto out = bsim::run_steps(sim, 3);
    failures += out.violations.size();
    for (const auto& r : out.reports) failures += bsim::check_identities(r).size();
  }
  log << "metrics: " << (failures ? "identity failures: " + std::to_string(failures) : std::string("all identities hold"))
      << "\n";
  return failures;
}

int cmd_verify(const VerifyFlags& f) {
  if (f.suite != "all" && f.suite != "lossless" && f.suite != "suffix" && f.suite != "metrics") {
    throw bsim::ConfigError("unknown suite '" + f.suite + "' (expected lossless, suffix, metrics, all)");
  }
  if (!f.fault.empty() && f.fault != "residual-norm") {
    throw bsim::ConfigError("unknown fault '" + f.fault + "' (expected residual-norm)");
  }
  if (!(f.tv_budget >= 0.0)) throw bsim::ConfigError("tv-budget must be >= 0");
  std::vector<std::string> failed;
  double tv = 0.0;
  if (f.suite == "all" || f.suite == "lossless") {
    tv = lossless_suite(f, std::cout);
    if (!(tv < f.tv_budget)) failed.push_back("lossless");
  }
  if ((f.suite == "all" || f.suite == "suffix") && suffix_suite(f, std::cout) > 0) failed.push_back("suffix");
  if ((f.suite == "all" || f.suite == "metrics") && metrics_suite(f, std::cout) > 0) failed.push_back("metrics");
  std::cout << "max TV distance: " << std::scientific << tv << std::defaultfloat << " (budget " << f.tv_budget << ")\n";
  if (!failed.empty()) {
    std::string names;
    for (const auto& n : failed) names += (names.empty() ? "" : ",") + n;
    throw Failure(kVerification, "suites failed: " + names);
  }
  std::cout << "all suites passed\n";
  return kOk;
}

// ---- compare ----

struct LoadedReport {
  std::string path;
  json config;
  std::vector<bsim::RunReport> steps;
};

LoadedReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Failure(kRuntime, "cannot read report '" + path + "'");
  LoadedReport r;
  r.path = path;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      const auto type = j.value("type", std::string());
      if (type == "config") r.config = j;
      else if (type == "step") r.steps.push_back(j.get<bsim::RunReport>());
    } catch (const json::exception& e) {
      throw Failure(kRuntime, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (r.steps.empty()) throw Failure(kRuntime, "report '" + path + "' has no step records");
  return r;
}

int cmd_compare(const std::vector<std::string>& files, std::size_t from_step) {
  std::vector<LoadedReport> runs;
  for (const auto& f : files) runs.push_back(load_report(f));
  std::vector<bsim::RunSummary> sums;
  for (auto& r : runs) {
    std::vector<bsim::RunReport> kept;
    for (const auto& s : r.steps) {
      if (s.step >= from_step) kept.push_back(s);
    }
    if (kept.empty()) throw Failure(kRuntime, "report '" + r.path + "' has no steps at or after " + std::to_string(from_step));
    sums.push_back(bsim::summarize(kept));
  }
  print_table(std::cout, sums);
  const auto& ref = runs.front();
  const auto& a = sums.front();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& b = sums[i];
    std::set<std::string> differ;
    for (const auto& [key, val] : ref.config.items()) {
      if (key == "mode" || key == "eta" || key == "threshold" || key == "helpers") continue;
      if (!runs[i].config.contains(key) || runs[i].config[key] != val) differ.insert(key);
    }
    for (const auto& [key, val] : runs[i].config.items()) {
      if (!ref.config.contains(key) && key != "eta" && key != "threshold" && key != "helpers") differ.insert(key);
    }
    if (!differ.empty()) {
      std::string keys;
      for (const auto& k : differ) keys += (keys.empty() ? "" : ",") + k;
      std::cout << "warning: configs differ between " << ref.path << " and " << runs[i].path << " in: " << keys << "\n";
    }
    const double alpha = 1.0 - b.decoding_steps_avg / a.decoding_steps_avg;
    const double mu = (b.rollout_time_s / b.decoding_steps_avg) / (a.rollout_time_s / a.decoding_steps_avg) - 1.0;
    const double observed = 1.0 - b.rollout_time_s / a.rollout_time_s;
    std::cout << runs[i].path << " vs " << ref.path << ": d_time " << fmt(b.rollout_time_s - a.rollout_time_s, 3)
              << " s, d_steps " << fmt(b.decoding_steps_avg - a.decoding_steps_avg, 1) << ", d_acc_len "
              << (a.acceptance_length && b.acceptance_length ? fmt(*b.acceptance_length - *a.acceptance_length, 3)
                                                             : std::string("-"))
              << ", alpha " << fmt(alpha, 4) << ", mu " << fmt(mu, 4) << ", predicted speedup ";
    if (alpha >= 0.0 && alpha <= 1.0 && mu >= -1.0) std::cout << fmt(bsim::speedup(alpha, mu), 4);
    else std::cout << "n/a";
    std::cout << ", observed " << fmt(observed, 4) << "\n";
  }
  return kOk;
}

// CLI11 only reads config files attached to the root app, so the run
// subcommand's file is expanded here: its keys become "--key=value" arguments
// placed right after "run", ahead of anything given on the command line.
std::vector<std::string> with_config_file(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  const auto run_at = std::find(args.begin(), args.end(), "run");
  if (run_at != args.end()) {
    std::string path;
    if (const char* env = std::getenv("BSIM_CONFIG")) path = env;
    for (auto it = run_at + 1; it != args.end(); ++it) {
      if (*it == "--config" && it + 1 != args.end()) path = *(it + 1);
      if (it->rfind("--config=", 0) == 0) path = it->substr(9);
    }
    if (!path.empty()) {
      std::vector<std::string> extra;
      for (const auto& item : CLI::ConfigTOML().from_file(path)) {
        if (!item.parents.empty() || item.name == "config") {
          throw CLI::ConversionError("unsupported config key '" + item.fullname() + "' in " + path);
        }
        for (const auto& v : item.inputs) extra.push_back("--" + item.name + "=" + v);
      }
      args.insert(run_at + 1, extra.begin(), extra.end());
    }
  }
  std::reverse(args.begin(), args.end());  // CLI11 consumes vectors from the back
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bsim: synchronous rollout simulator with bubble-time speculative drafts", "bsim"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "bsim 0.1.0");

  RunFlags run_flags;
  auto* run = app.add_subcommand("run", "simulate training steps of one scheduler mode");
  // Repeated options resolve to the last value, so command-line flags win over
  // keys spliced in from the config file.
  run->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;
  run->add_option("--config", config_path, "run configuration file (TOML); default from $BSIM_CONFIG");
  add_run_options(*run, run_flags);

  VerifyFlags verify_flags;
  auto* verify = app.add_subcommand("verify", "run the oracle suites");
  verify->add_option("--suite", verify_flags.suite, "lossless | suffix | metrics | all")->capture_default_str();
  verify->add_option("--tv-budget", verify_flags.tv_budget, "largest accepted total-variation distance")
      ->capture_default_str();
  verify->add_option("--inject-fault", verify_flags.fault, "residual-norm: skip residual renormalization");
  verify->add_option("--seed", verify_flags.seed, "instance seed")->capture_default_str();

  std::vector<std::string> files;
  std::size_t from_step = 0;
  auto* compare = app.add_subcommand("compare", "compare report files; the first is the reference");
  compare->add_option("reports", files, "report.jsonl files")->required()->check(CLI::ExistingFile);
  compare->add_option("--from-step", from_step, "ignore steps before this index")->capture_default_str();

  try {
    app.parse(with_config_file(argc, argv));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(kValidation, e.what());
  }

  try {
    if (run->parsed()) return cmd_run(finalize(run_flags));
    if (verify->parsed()) return cmd_verify(verify_flags);
    if (compare->parsed()) return cmd_compare(files, from_step);
  } catch (const Failure& e) {
    return report_error(e.code, e.what());
  } catch (const bsim::ConfigError& e) {
    return report_error(kValidation, e.what());
  } catch (const std::exception& e) {
    return report_error(kRuntime, e.what());
  }
  return kOk;
}
