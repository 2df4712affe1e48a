// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Target policy: next-token distributions, sampling filters, and the seeded
// order-m Markov table that stands in for an LLM.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bsim/rng.hpp"
#include "bsim/types.hpp"

namespace bsim {

struct SamplingParams {
  double temperature = 1.0;           // 0 selects greedy decoding
  double top_p = 1.0;                 // (0, 1]
  std::optional<std::int32_t> top_k;  // empty means unbounded
  std::uint64_t seed = 0;

  bool is_identity() const { return temperature == 1.0 && top_p >= 1.0 && !top_k; }

  void validate() const {
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
      throw ConfigError("temperature must be a finite non-negative number");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
      throw ConfigError("top_p must lie in (0, 1]");
    }
    if (top_k && *top_k < 1) {
      throw ConfigError("top_k must be positive when set");
    }
  }
};

struct PolicyDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](TokenId x) const { return probs[static_cast<std::size_t>(x)]; }

  double total() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }

  bool is_valid(double tol = 1e-12) const {
    if (probs.empty()) return false;
    for (double p : probs) {
      if (!(p >= 0.0)) return false;
    }
    return std::abs(total() - 1.0) <= tol;
  }

  // Lowest-id argmax.
  TokenId argmax() const {
    return static_cast<TokenId>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }
};

namespace detail {

inline void normalize(std::vector<double>& p) {
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  if (!(s > 0.0)) throw ContractViolation("cannot normalize an all-zero distribution");
  for (double& v : p) v /= s;
}

// Token ids ordered by descending probability, ties by ascending id.
inline std::vector<TokenId> rank_by_mass(const std::vector<double>& p) {
  std::vector<TokenId> order(p.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return p[a] > p[b]; });
  return order;
}

}  // namespace detail

// Temperature scaling, then top-k, then top-p, then renormalization.
inline PolicyDistribution apply_filters(PolicyDistribution dist, const SamplingParams& params) {
  if (params.is_identity()) return dist;
  auto& p = dist.probs;
  if (params.temperature == 0.0) {
    const TokenId best = dist.argmax();
    std::fill(p.begin(), p.end(), 0.0);
    p[best] = 1.0;
    return dist;
  }
  if (params.temperature != 1.0) {
    // logits / T  <=>  p^(1/T) up to normalization; scale by the max first.
    const double inv_t = 1.0 / params.temperature;
    const double pmax = *std::max_element(p.begin(), p.end());
    for (double& v : p) v = v > 0.0 ? std::pow(v / pmax, inv_t) : 0.0;
    detail::normalize(p);
  }
  const bool use_k = params.top_k && static_cast<std::size_t>(*params.top_k) < p.size();
  const bool use_p = params.top_p < 1.0;
  if (use_k || use_p) {
    const auto order = detail::rank_by_mass(p);
    std::vector<char> keep(p.size(), 0);
    const std::size_t k_limit = use_k ? static_cast<std::size_t>(*params.top_k) : p.size();
    double kept_mass = 0.0;
    for (std::size_t i = 0; i < k_limit; ++i) {
      const TokenId x = order[i];
      if (p[x] <= 0.0 && i > 0) break;
      keep[x] = 1;
      kept_mass += p[x];
    }
    if (use_p) {
      // Re-walk the top-k survivors (renormalized) for the nucleus cut.
      std::fill(keep.begin(), keep.end(), 0);
      double cum = 0.0;
      for (std::size_t i = 0; i < k_limit; ++i) {
        const TokenId x = order[i];
        if (p[x] <= 0.0 && i > 0) break;
        keep[x] = 1;
        cum += p[x] / kept_mass;
        if (cum + 1e-12 >= params.top_p) break;
      }
    }
    for (std::size_t x = 0; x < p.size(); ++x) {
      if (!keep[x]) p[x] = 0.0;
    }
    detail::normalize(p);
  }
  return dist;
}

// Inverse-CDF in ascending token order for a fixed draw u in [0, 1).
inline TokenId sample_at(const PolicyDistribution& dist, double u) {
  double cum = 0.0;
  TokenId last_support = 0;
  for (std::size_t x = 0; x < dist.probs.size(); ++x) {
    const double px = dist.probs[x];
    if (px <= 0.0) continue;
    cum += px;
    last_support = static_cast<TokenId>(x);
    if (u < cum) return last_support;
  }
  return last_support;  // rounding left u just above the final cumulative sum
}

inline TokenId sample(const PolicyDistribution& dist, Rng& rng) { return sample_at(dist, rng.uniform()); }

// Anything that can produce a raw next-token distribution for a prefix.
template <class P>
concept TargetPolicy = requires(const P& policy, TokenView prefix) {
  { policy.next_distribution(prefix) } -> std::same_as<PolicyDistribution>;
  { policy.vocabulary() } -> std::convertible_to<Vocabulary>;
};

template <TargetPolicy P>
PolicyDistribution target_distribution(const P& policy, TokenView prefix, const SamplingParams& params) {
  return apply_filters(policy.next_distribution(prefix), params);
}

// Per-position stopping probability folded into every context row.
struct EosHazard {
  enum class Kind { kNone, kConstant, kHyperbolic };
  Kind kind = Kind::kNone;
  double rate = 0.0;
  double offset = 1.0;
  // Prompts whose first token is below `hard_openers` use rate * hard_scale.
  std::int32_t hard_openers = 0;
  double hard_scale = 1.0;

  double at(TokenView prefix) const {
    double h = 0.0;
    const double n = static_cast<double>(prefix.size());
    switch (kind) {
      case Kind::kNone: return 0.0;
      case Kind::kConstant: h = rate; break;
      case Kind::kHyperbolic: h = rate / (n + offset); break;
    }
    if (hard_openers > 0 && !prefix.empty() && prefix.front() >= 0 && prefix.front() < hard_openers) {
      h *= hard_scale;
    }
    return std::clamp(h, 0.0, 1.0);
  }
};

struct MarkovSpec {
  std::uint64_t seed = 0;
  std::int32_t vocab = 64;
  TokenId eos = 0;
  std::int32_t order = 1;
  double rho = 0.6;   // mass on the canonical continuation of each context
  double skew = 1.0;  // Zipf exponent for the remaining mass
  EosHazard hazard;
};

// Order-m Markov table. Rows are raw distributions over the vocabulary keyed by
// the last m tokens, with kBeginMarker padding for short prefixes. Unknown
// contexts fall back to a uniform row. Immutable after construction.
class MarkovPolicy {
 public:
  MarkovPolicy(Vocabulary vocab, std::int32_t order) : vocab_(vocab), order_(order) {
    vocab_.validate();
    if (order_ < 1) throw ConfigError("markov order must be >= 1");
    const double digits = static_cast<double>(order_) * std::log2(static_cast<double>(vocab_.size) + 1.0);
    if (digits >= 63.0) throw ConfigError("markov context space too large to key");
  }

  static MarkovPolicy generate(const MarkovSpec& spec);

  // Parses the plain-text table format written by save().
  static MarkovPolicy load(std::istream& in);
  void save(std::ostream& out) const;

  // Same table with a fraction of rows re-drawn; used for per-step policy versions.
  MarkovPolicy drifted(double fraction, std::uint64_t version_seed) const;

  void set_row(TokenView context, std::vector<double> row);
  void set_hazard(EosHazard h) { hazard_ = h; }

  const Vocabulary& vocabulary() const { return vocab_; }
  std::int32_t order() const { return order_; }
  const EosHazard& hazard() const { return hazard_; }
  std::size_t row_count() const { return index_.size(); }

  // Raw (unfiltered) distribution for the last-m-token context of `prefix`.
  PolicyDistribution next_distribution(TokenView prefix) const {
    if (prefix.empty()) throw ContractViolation("next_distribution requires a non-empty prefix");
    PolicyDistribution d;
    const auto it = index_.find(context_key(prefix));
    if (it == index_.end()) {
      d.probs.assign(static_cast<std::size_t>(vocab_.size), 1.0 / vocab_.size);
    } else {
      const double* row = &rows_[it->second * static_cast<std::size_t>(vocab_.size)];
      d.probs.assign(row, row + vocab_.size);
    }
    const double h = hazard_.at(prefix);
    if (h > 0.0) {
      for (double& v : d.probs) v *= (1.0 - h);
      d.probs[static_cast<std::size_t>(vocab_.eos)] += h;
    }
    return d;
  }

  // Designated high-mass continuation for generated tables.
  std::optional<TokenId> canonical_next(TokenView prefix) const {
    const auto it = index_.find(context_key(prefix));
    if (it == index_.end() || canonical_.empty()) return std::nullopt;
    const TokenId c = canonical_[it->second];
    if (c < 0) return std::nullopt;
    return c;
  }

  // Follows canonical continuations for up to n tokens.
  TokenSequence canonical_path(TokenView prefix, std::size_t n) const {
    TokenSequence ext(prefix.begin(), prefix.end());
    TokenSequence out;
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = canonical_next(ext);
      if (!c) break;
      out.push_back(*c);
      ext.push_back(*c);
    }
    return out;
  }

  std::uint64_t context_key(TokenView prefix) const {
    const std::uint64_t base = static_cast<std::uint64_t>(vocab_.size) + 1;
    std::uint64_t key = 0;
    const auto n = static_cast<std::ptrdiff_t>(prefix.size());
    for (std::ptrdiff_t i = n - order_; i < n; ++i) {
      const TokenId t = i < 0 ? kBeginMarker : prefix[static_cast<std::size_t>(i)];
      key = key * base + static_cast<std::uint64_t>(t + 1);
    }
    return key;
  }

 private:
  std::size_t add_row(std::uint64_t key);
  void fill_generated_row(std::size_t row, Rng& rng, double rho, double skew);

  Vocabulary vocab_;
  std::int32_t order_;
  EosHazard hazard_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<std::uint64_t> keys_;  // row -> context key, insertion order
  std::vector<double> rows_;
  std::vector<TokenId> canonical_;   // empty for loaded tables
  std::optional<MarkovSpec> spec_;
};

inline std::size_t MarkovPolicy::add_row(std::uint64_t key) {
  const auto [it, inserted] = index_.emplace(key, keys_.size());
  if (inserted) {
    keys_.push_back(key);
    rows_.resize(rows_.size() + static_cast<std::size_t>(vocab_.size), 0.0);
    if (!canonical_.empty() || spec_) canonical_.push_back(-1);
  }
  return it->second;
}

inline void MarkovPolicy::set_row(TokenView context, std::vector<double> row) {
  if (static_cast<std::int32_t>(context.size()) != order_) {
    throw ConfigError("context length " + std::to_string(context.size()) + " does not match order " +
                      std::to_string(order_));
  }
  if (static_cast<std::int32_t>(row.size()) != vocab_.size) {
    throw ConfigError("row has " + std::to_string(row.size()) + " entries, vocabulary has " +
                      std::to_string(vocab_.size));
  }
  for (TokenId t : context) {
    if (t != kBeginMarker && (t < 0 || t >= vocab_.size)) {
      throw ConfigError("context token " + std::to_string(t) + " outside vocabulary");
    }
  }
  double s = 0.0;
  for (double v : row) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("row entries must be finite and non-negative");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) throw ConfigError("row sums to " + std::to_string(s) + ", expected 1");
  for (double& v : row) v /= s;
  // Context given in chronological order; key it like a prefix ending in it.
  const std::size_t r = add_row(context_key(context));
  std::copy(row.begin(), row.end(), rows_.begin() + static_cast<std::ptrdiff_t>(r * vocab_.size));
}

inline void MarkovPolicy::fill_generated_row(std::size_t r, Rng& rng, double rho, double skew) {
  const auto V = static_cast<std::size_t>(vocab_.size);
  double* row = &rows_[r * V];
  std::fill(row, row + V, 0.0);
  std::vector<TokenId> others;
  others.reserve(V);
  for (std::size_t x = 0; x < V; ++x) {
    if (static_cast<TokenId>(x) != vocab_.eos) others.push_back(static_cast<TokenId>(x));
  }
  const TokenId canon = others[rng.below(others.size())];
  canonical_[r] = canon;
  others.erase(std::find(others.begin(), others.end(), canon));
  if (others.empty()) {
    row[canon] = 1.0;
    return;
  }
  std::shuffle(others.begin(), others.end(), std::mt19937_64(rng.next_u64()));
  std::vector<double> w(others.size());
  double wsum = 0.0;
  for (std::size_t i = 0; i < others.size(); ++i) {
    w[i] = 1.0 / std::pow(static_cast<double>(i + 1), skew);
    wsum += w[i];
  }
  row[canon] = rho;
  for (std::size_t i = 0; i < others.size(); ++i) row[others[i]] = (1.0 - rho) * w[i] / wsum;
}

inline MarkovPolicy MarkovPolicy::generate(const MarkovSpec& spec) {
  if (!(spec.rho >= 0.0 && spec.rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  if (!(spec.skew >= 0.0)) throw ConfigError("skew must be non-negative");
  MarkovPolicy policy(Vocabulary{spec.vocab, spec.eos}, spec.order);
  policy.hazard_ = spec.hazard;
  policy.spec_ = spec;
  const std::uint64_t base = static_cast<std::uint64_t>(spec.vocab) + 1;
  double rows = 1.0;
  for (int i = 0; i < spec.order; ++i) rows *= static_cast<double>(base);
  if (rows * spec.vocab > static_cast<double>(1u << 24)) {
    throw ConfigError("generated markov table too large; lower vocab or order");
  }
  // Every context whose begin markers form a leading run.
  std::vector<TokenId> ctx(static_cast<std::size_t>(spec.order), kBeginMarker);
  const auto total = static_cast<std::uint64_t>(rows);
  for (std::uint64_t code = 0; code < total; ++code) {
    std::uint64_t c = code;
    bool ok = true;
    bool seen_token = false;
    for (int i = spec.order - 1; i >= 0; --i) {
      ctx[static_cast<std::size_t>(i)] = static_cast<TokenId>(c % base) - 1;
      c /= base;
    }
    for (TokenId t : ctx) {
      if (t == kBeginMarker && seen_token) ok = false;
      if (t != kBeginMarker) seen_token = true;
    }
    if (!ok || !seen_token) continue;
    const std::size_t r = policy.add_row(policy.context_key(ctx));
    Rng rng(derive_seed({spec.seed, code, 0x70A0ULL}));
    policy.fill_generated_row(r, rng, spec.rho, spec.skew);
  }
  return policy;
}

inline MarkovPolicy MarkovPolicy::drifted(double fraction, std::uint64_t version_seed) const {
  MarkovPolicy next = *this;
  if (!spec_ || fraction <= 0.0) return next;
  for (std::size_t r = 0; r < keys_.size(); ++r) {
    Rng coin(derive_seed({version_seed, keys_[r], 0xD21F7ULL}));
    if (coin.uniform() < fraction) {
      Rng rng(derive_seed({version_seed, keys_[r], 0x5EEDULL}));
      next.fill_generated_row(r, rng, spec_->rho, spec_->skew);
    }
  }
  return next;
}

// Table format:
//   markov vocab=<V> eos=<E> order=<m>
//   hazard <none|constant|hyperbolic> <rate> <offset>      (optional)
//   <ctx_1> ... <ctx_m> : <p_0> ... <p_{V-1}>              (one per context)
// `^` denotes the begin marker; `#` starts a comment line.
inline void MarkovPolicy::save(std::ostream& out) const {
  out << "markov vocab=" << vocab_.size << " eos=" << vocab_.eos << " order=" << order_ << "\n";
  if (hazard_.kind != EosHazard::Kind::kNone) {
    out << "hazard " << (hazard_.kind == EosHazard::Kind::kConstant ? "constant" : "hyperbolic") << " "
        << hazard_.rate << " " << hazard_.offset << " " << hazard_.hard_openers << " " << hazard_.hard_scale << "\n";
  }
  const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
  const std::uint64_t base = static_cast<std::uint64_t>(vocab_.size) + 1;
  for (std::size_t r = 0; r < keys_.size(); ++r) {
    std::vector<TokenId> ctx(static_cast<std::size_t>(order_));
    std::uint64_t k = keys_[r];
    for (int i = order_ - 1; i >= 0; --i) {
      ctx[static_cast<std::size_t>(i)] = static_cast<TokenId>(k % base) - 1;
      k /= base;
    }
    for (TokenId t : ctx) {
      if (t == kBeginMarker) out << "^ ";
      else out << t << " ";
    }
    out << ":";
    for (std::int32_t x = 0; x < vocab_.size; ++x) out << " " << rows_[r * static_cast<std::size_t>(vocab_.size) + x];
    out << "\n";
  }
  out.precision(old_precision);
}

inline MarkovPolicy MarkovPolicy::load(std::istream& in) {
  std::string line;
  std::optional<MarkovPolicy> policy;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigError("policy table line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head.empty()) continue;
    if (head == "markov") {
      std::int32_t v = -1, e = -1, m = -1;
      std::string kv;
      while (ls >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) fail("malformed header field '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        const int val = std::stoi(kv.substr(eq + 1));
        if (key == "vocab") v = val;
        else if (key == "eos") e = val;
        else if (key == "order") m = val;
        else fail("unknown header field '" + key + "'");
      }
      policy.emplace(Vocabulary{v, e}, m);
      continue;
    }
    if (!policy) fail("table rows before the 'markov' header");
    if (head == "hazard") {
      std::string kind;
      EosHazard h;
      ls >> kind >> h.rate >> h.offset;
      if (!(ls >> h.hard_openers)) h.hard_openers = 0;
      if (!(ls >> h.hard_scale)) h.hard_scale = 1.0;
      if (kind == "none") h.kind = EosHazard::Kind::kNone;
      else if (kind == "constant") h.kind = EosHazard::Kind::kConstant;
      else if (kind == "hyperbolic") h.kind = EosHazard::Kind::kHyperbolic;
      else fail("unknown hazard kind '" + kind + "'");
      policy->set_hazard(h);
      continue;
    }
    std::istringstream rs(line);
    std::vector<TokenId> ctx;
    std::string tok;
    while (rs >> tok && tok != ":") {
      if (tok == "^") ctx.push_back(kBeginMarker);
      else ctx.push_back(static_cast<TokenId>(std::stol(tok)));
    }
    if (tok != ":") fail("missing ':' between context and row");
    std::vector<double> row;
    double p;
    while (rs >> p) row.push_back(p);
    try {
      policy->set_row(ctx, std::move(row));
    } catch (const ConfigError& e) {
      fail(e.what());
    }
  }
  if (!policy) throw ConfigError("policy table has no 'markov' header");
  return std::move(*policy);
}

// Policy version N for every training step N. Generated tables drift by a
// fixed fraction of rows per step; loaded tables are the same every step.
class PolicyFamily {
 public:
  PolicyFamily(MarkovPolicy base, double drift, std::uint64_t seed)
      : drift_(drift), seed_(seed) {
    versions_.push_back(std::make_shared<const MarkovPolicy>(std::move(base)));
  }

  const MarkovPolicy& at(std::size_t version) {
    while (versions_.size() <= version) {
      if (drift_ <= 0.0) {
        versions_.push_back(versions_.back());
      } else {
        const auto v = versions_.size();
        versions_.push_back(
            std::make_shared<const MarkovPolicy>(versions_.back()->drifted(drift_, derive_seed({seed_, v}))));
      }
    }
    return *versions_[version];
  }

 private:
  double drift_;
  std::uint64_t seed_;
  std::vector<std::shared_ptr<const MarkovPolicy>> versions_;
};

}  // namespace bsim
