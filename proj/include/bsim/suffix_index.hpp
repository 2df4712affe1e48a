// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Per-prompt draft index over pre-generated token pools.

#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "bsim/types.hpp"

namespace bsim {

using PromptId = std::uint64_t;

struct TokenPool {
  PromptId prompt = 0;
  std::uint64_t version = 0;  // policy version that produced the sequences
  std::vector<TokenSequence> sequences;

  std::size_t total_tokens() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }
};

struct DraftBlock {
  TokenSequence tokens;
  std::size_t match_depth = 0;  // length of the prefix suffix that anchored retrieval

  bool empty() const { return tokens.empty(); }
  friend bool operator==(const DraftBlock&, const DraftBlock&) = default;
};

struct SuffixIndexParams {
  std::size_t depth = 32;     // longest indexed window
  std::size_t min_match = 1;  // shortest acceptable anchor
};

// Anchors are capped so a full k-token block still fits inside the indexed depth.
constexpr std::size_t max_anchor(std::size_t depth, std::size_t k) {
  return depth > k ? depth - k : (depth > 1 ? depth - 1 : 1);
}

// Bounded-depth trie of every window of length <= depth in a pool. Node
// counts are occurrence counts of the root path as a window; `ends` counts
// windows that stop at the node (sequence end or depth limit).
class SuffixTree {
 public:
  struct Node {
    std::uint32_t count = 0;
    std::uint32_t ends = 0;
    std::uint32_t first_child = 0;  // index into children_
    std::uint32_t child_count = 0;
    std::int32_t best = -1;         // position in children_ of the highest-count child
  };
  struct Edge {
    TokenId token;
    std::uint32_t node;
  };

  SuffixTree() : nodes_(1) {}

  static SuffixTree build(const TokenPool& pool, std::size_t depth);

  std::size_t depth() const { return depth_; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t source_tokens() const { return source_tokens_; }
  std::uint64_t build_visits() const { return build_visits_; }
  PromptId prompt() const { return prompt_; }
  std::uint64_t version() const { return version_; }

  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  std::span<const Edge> children(std::uint32_t id) const {
    const auto& n = nodes_[id];
    return {children_.data() + n.first_child, n.child_count};
  }

  std::optional<std::uint32_t> child(std::uint32_t id, TokenId token) const {
    const auto kids = children(id);
    const auto it = std::lower_bound(kids.begin(), kids.end(), token,
                                     [](const Edge& e, TokenId t) { return e.token < t; });
    if (it == kids.end() || it->token != token) return std::nullopt;
    return it->node;
  }

  // Node reached by walking `path` from the root.
  std::optional<std::uint32_t> find(TokenView path) const {
    std::uint32_t cur = 0;
    for (TokenId t : path) {
      const auto next = child(cur, t);
      if (!next) return std::nullopt;
      cur = *next;
    }
    return cur;
  }

  // Occurrence count of `path` as a window (0 when absent).
  std::uint32_t count(TokenView path) const {
    const auto n = find(path);
    return n ? nodes_[*n].count : 0;
  }

  DraftBlock retrieve(TokenView prefix, std::size_t k, const SuffixIndexParams& params) const;

 private:
  std::vector<Node> nodes_;
  std::vector<Edge> children_;
  std::size_t depth_ = 0;
  std::size_t source_tokens_ = 0;
  std::uint64_t build_visits_ = 0;
  PromptId prompt_ = 0;
  std::uint64_t version_ = 0;
};

inline SuffixTree SuffixTree::build(const TokenPool& pool, std::size_t depth) {
  if (depth == 0) throw ConfigError("suffix index depth must be >= 1");
  SuffixTree tree;
  tree.depth_ = depth;
  tree.prompt_ = pool.prompt;
  tree.version_ = pool.version;
  tree.source_tokens_ = pool.total_tokens();

  // Insertion pass over a hash of (parent, token) edges; compacted afterwards.
  std::unordered_map<std::uint64_t, std::uint32_t> edges;
  edges.reserve(tree.source_tokens_ * 2 + 16);
  std::vector<std::pair<std::uint32_t, TokenId>> parent_of(1, {0, 0});
  auto& nodes = tree.nodes_;
  for (const auto& seq : pool.sequences) {
    for (std::size_t start = 0; start < seq.size(); ++start) {
      const std::size_t stop = std::min(seq.size(), start + depth);
      std::uint32_t cur = 0;
      nodes[0].count++;
      for (std::size_t i = start; i < stop; ++i) {
        const std::uint64_t key = (static_cast<std::uint64_t>(cur) << 32) | static_cast<std::uint32_t>(seq[i]);
        auto [it, inserted] = edges.try_emplace(key, static_cast<std::uint32_t>(nodes.size()));
        if (inserted) {
          nodes.emplace_back();
          parent_of.emplace_back(cur, seq[i]);
        }
        cur = it->second;
        nodes[cur].count++;
        tree.build_visits_++;
      }
      nodes[cur].ends++;
    }
  }
  // Compact child lists, sorted by token.
  std::vector<std::uint32_t> degree(nodes.size(), 0);
  for (std::size_t id = 1; id < nodes.size(); ++id) degree[parent_of[id].first]++;
  std::uint32_t offset = 0;
  for (std::size_t id = 0; id < nodes.size(); ++id) {
    nodes[id].first_child = offset;
    offset += degree[id];
  }
  tree.children_.resize(offset);
  std::vector<std::uint32_t> fill(nodes.size(), 0);
  for (std::size_t id = 1; id < nodes.size(); ++id) {
    const auto [parent, token] = parent_of[id];
    tree.children_[nodes[parent].first_child + fill[parent]++] = Edge{token, static_cast<std::uint32_t>(id)};
  }
  for (std::size_t id = 0; id < nodes.size(); ++id) {
    auto& n = nodes[id];
    n.child_count = degree[id];
    auto* begin = tree.children_.data() + n.first_child;
    std::sort(begin, begin + n.child_count, [](const Edge& a, const Edge& b) { return a.token < b.token; });
    std::uint32_t best_count = 0;
    for (std::uint32_t c = 0; c < n.child_count; ++c) {
      const auto cnt = nodes[begin[c].node].count;
      if (cnt > best_count) {  // strict: ties keep the lower token id
        best_count = cnt;
        n.best = static_cast<std::int32_t>(c);
      }
    }
  }
  return tree;
}

// Longest anchored suffix first, then greedy descent along the most frequent
// child (ties to the lowest token id) for up to k tokens.
inline DraftBlock SuffixTree::retrieve(TokenView prefix, std::size_t k, const SuffixIndexParams& params) const {
  DraftBlock block;
  if (k == 0) throw ContractViolation("draft length must be >= 1");
  const std::size_t cap = std::min(prefix.size(), max_anchor(depth_, k));
  const std::size_t lo_len = std::max<std::size_t>(params.min_match, 1);
  if (nodes_.size() == 1 || cap < lo_len) return block;

  // Suffix presence is monotone in length: every suffix of an indexed window
  // is itself an indexed window. Binary search the longest present suffix.
  auto suffix_node = [&](std::size_t len) { return find(prefix.subspan(prefix.size() - len)); };
  if (!suffix_node(lo_len)) return block;
  std::size_t lo = lo_len, hi = cap;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo + 1) / 2;
    if (suffix_node(mid)) lo = mid;
    else hi = mid - 1;
  }
  std::uint32_t cur = *suffix_node(lo);
  block.match_depth = lo;
  for (std::size_t step = 0; step < k; ++step) {
    const auto& n = nodes_[cur];
    if (n.best < 0) break;
    const Edge& e = children_[n.first_child + static_cast<std::uint32_t>(n.best)];
    block.tokens.push_back(e.token);
    cur = e.node;
  }
  return block;
}

inline SuffixTree build(const TokenPool& pool, std::size_t depth) { return SuffixTree::build(pool, depth); }

inline DraftBlock retrieve_draft(const SuffixTree& tree, TokenView prefix, std::size_t k,
                                 const SuffixIndexParams& params = {}) {
  return tree.retrieve(prefix, k, params);
}

// Linear-scan matcher: longest n-gram match against the raw pool, returning
// the continuation of the first occurrence. No index, no frequency ranking.
class NgramMatcher {
 public:
  NgramMatcher(const TokenPool* pool, std::size_t max_n, std::size_t min_n)
      : pool_(pool), max_n_(max_n), min_n_(std::max<std::size_t>(1, min_n)) {}

  DraftBlock retrieve(TokenView prefix, std::size_t k) const {
    DraftBlock block;
    scanned_ = 0;
    if (!pool_) return block;
    const std::size_t top = std::min(max_n_, prefix.size());
    for (std::size_t n = top; n >= min_n_ && n > 0; --n) {
      const auto pattern = prefix.subspan(prefix.size() - n);
      for (const auto& seq : pool_->sequences) {
        for (std::size_t i = 0; i + n < seq.size(); ++i) {
          ++scanned_;
          if (std::equal(pattern.begin(), pattern.end(), seq.begin() + static_cast<std::ptrdiff_t>(i))) {
            const std::size_t from = i + n;
            const std::size_t to = std::min(seq.size(), from + k);
            block.tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(from),
                                seq.begin() + static_cast<std::ptrdiff_t>(to));
            block.match_depth = n;
            return block;
          }
        }
      }
    }
    return block;
  }

  // Positions examined by the most recent retrieve(); drives the scan cost.
  std::uint64_t last_scan() const { return scanned_; }

 private:
  const TokenPool* pool_;
  std::size_t max_n_;
  std::size_t min_n_;
  mutable std::uint64_t scanned_ = 0;
};

// Splits pools by owning rank. Throws ConfigError for unassigned prompts.
inline std::vector<std::vector<TokenPool>> shard_pools(const std::vector<TokenPool>& pools,
                                                       const std::map<PromptId, std::size_t>& assignment,
                                                       std::size_t ranks) {
  std::vector<std::vector<TokenPool>> shards(ranks);
  for (const auto& pool : pools) {
    const auto it = assignment.find(pool.prompt);
    if (it == assignment.end()) {
      throw ConfigError("prompt " + std::to_string(pool.prompt) + " has no rank assignment");
    }
    if (it->second >= ranks) {
      throw ConfigError("prompt " + std::to_string(pool.prompt) + " assigned to rank " +
                        std::to_string(it->second) + " of " + std::to_string(ranks));
    }
    shards[it->second].push_back(pool);
  }
  return shards;
}

// Pool text format:
//   @pool prompt=<id> version=<v> sequences=<n>
//   followed by n lines of space-separated token ids (possibly empty).
inline void write_pools(std::ostream& out, const std::vector<TokenPool>& pools) {
  for (const auto& pool : pools) {
    out << "@pool prompt=" << pool.prompt << " version=" << pool.version << " sequences=" << pool.sequences.size()
        << "\n";
    for (const auto& seq : pool.sequences) {
      for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
      out << "\n";
    }
  }
}

inline std::vector<TokenPool> read_pools(std::istream& in) {
  std::vector<TokenPool> pools;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("@pool", 0) != 0) {
      throw ConfigError("pool file line " + std::to_string(lineno) + ": expected '@pool' header");
    }
    TokenPool pool;
    std::size_t n = 0;
    std::istringstream hs(line.substr(5));
    std::string kv;
    while (hs >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("pool file line " + std::to_string(lineno) + ": bad field");
      const auto key = kv.substr(0, eq);
      const auto val = std::stoull(kv.substr(eq + 1));
      if (key == "prompt") pool.prompt = val;
      else if (key == "version") pool.version = val;
      else if (key == "sequences") n = val;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::getline(in, line)) throw ConfigError("pool file truncated inside prompt " + std::to_string(pool.prompt));
      ++lineno;
      std::istringstream ss(line);
      TokenSequence seq;
      TokenId t;
      while (ss >> t) seq.push_back(t);
      pool.sequences.push_back(std::move(seq));
    }
    pools.push_back(std::move(pool));
  }
  return pools;
}

}  // namespace bsim
