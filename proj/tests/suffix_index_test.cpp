// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "bsim/suffix_index.hpp"
#include "bsim/verification.hpp"

namespace bsim {
namespace {

TokenPool make_pool(std::vector<TokenSequence> seqs) { return TokenPool{0, 0, std::move(seqs)}; }

TokenPool random_pool(Rng& rng, std::size_t vocab, std::size_t max_seqs, std::size_t max_len) {
  TokenPool pool;
  const auto n = 1 + rng.below(max_seqs);
  for (std::uint64_t s = 0; s < n; ++s) {
    TokenSequence seq(rng.below(max_len + 1));
    for (auto& t : seq) t = static_cast<TokenId>(rng.below(vocab));
    pool.sequences.push_back(std::move(seq));
  }
  return pool;
}

TEST(SuffixTree, OccurrenceCountsAndDraft) {
  const auto tree = build(make_pool({{1, 2, 3}, {1, 2, 3}, {1, 2, 5}}), 32);
  EXPECT_EQ(tree.count(TokenSequence{1, 2}), 3u);
  EXPECT_EQ(tree.count(TokenSequence{1, 2, 3}), 2u);
  EXPECT_EQ(tree.count(TokenSequence{1, 2, 5}), 1u);
  EXPECT_EQ(tree.count(TokenSequence{2, 5}), 1u);
  EXPECT_EQ(tree.count(TokenSequence{4}), 0u);
  const auto block = retrieve_draft(tree, TokenSequence{9, 1, 2}, 4);
  ASSERT_FALSE(block.empty());
  EXPECT_EQ(block.tokens.front(), 3);
  EXPECT_EQ(block.match_depth, 2u);
}

TEST(SuffixTree, SingleSequenceDepthOneMatch) {
  const auto tree = build(make_pool({{7, 8}}), 32);
  const auto block = retrieve_draft(tree, TokenSequence{3, 7}, 4);
  EXPECT_EQ(block.tokens, (TokenSequence{8}));
  EXPECT_EQ(block.match_depth, 1u);
}

TEST(SuffixTree, NoMatchGivesEmptyBlock) {
  const auto tree = build(make_pool({{1, 2}}), 32);
  const auto block = retrieve_draft(tree, TokenSequence{5, 6}, 4);
  EXPECT_TRUE(block.empty());
  EXPECT_EQ(block.match_depth, 0u);
  const auto empty = build(make_pool({}), 32);
  EXPECT_TRUE(retrieve_draft(empty, TokenSequence{1}, 4).empty());
}

TEST(SuffixTree, MinimumMatchLengthIsHonored) {
  const auto tree = build(make_pool({{1, 2, 3}}), 32);
  EXPECT_FALSE(retrieve_draft(tree, TokenSequence{9, 2}, 2, {32, 1}).empty());
  EXPECT_TRUE(retrieve_draft(tree, TokenSequence{9, 2}, 2, {32, 2}).empty());
  EXPECT_FALSE(retrieve_draft(tree, TokenSequence{1, 2}, 2, {32, 2}).empty());
}

TEST(SuffixTree, EqualCountTiesGoToLowestToken) {
  const auto tree = build(make_pool({{4, 9}, {4, 6}}), 32);
  EXPECT_EQ(retrieve_draft(tree, TokenSequence{4}, 1).tokens, (TokenSequence{6}));
}

TEST(SuffixTree, CountConsistencyAndBuildBound) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pool = random_pool(rng, 2 + rng.below(5), 20, 40);
    const std::size_t depth = 1 + rng.below(12);
    const auto tree = build(pool, depth);
    for (std::uint32_t id = 0; id < tree.node_count(); ++id) {
      std::uint64_t sum = tree.node(id).ends;
      TokenId prev = -2;
      for (const auto& e : tree.children(id)) {
        sum += tree.node(e.node).count;
        EXPECT_GT(e.token, prev) << "children sorted by token";
        prev = e.token;
      }
      if (id != 0) EXPECT_EQ(sum, tree.node(id).count) << "node " << id;
    }
    EXPECT_LE(tree.build_visits(), depth * pool.total_tokens());
  }
}

TEST(SuffixTree, MatchesBruteForceOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t vocab = 2 + rng.below(6);
    const auto pool = random_pool(rng, vocab, 12, 30);
    const std::size_t depth = 1 + rng.below(12);
    const auto tree = build(pool, depth);
    for (int q = 0; q < 30; ++q) {
      TokenSequence prefix(1 + rng.below(15));
      for (auto& t : prefix) t = static_cast<TokenId>(rng.below(vocab));
      const std::size_t k = 1 + rng.below(5);
      const std::size_t lmin = 1 + rng.below(3);
      const auto got = retrieve_draft(tree, prefix, k, {depth, lmin});
      const auto want = oracle_retrieve(pool, prefix, k, depth, lmin);
      ASSERT_EQ(got.tokens, want.tokens) << "trial " << trial << " query " << q;
      ASSERT_EQ(got.match_depth, want.match_depth) << "trial " << trial << " query " << q;
    }
  }
}

TEST(SuffixTree, DeterministicAcrossRebuilds) {
  Rng rng(3);
  const auto pool = random_pool(rng, 4, 10, 30);
  const auto a = build(pool, 8), b = build(pool, 8);
  const TokenSequence prefix{1, 2, 3, 0, 1};
  EXPECT_EQ(retrieve_draft(a, prefix, 4), retrieve_draft(b, prefix, 4));
}

TEST(SuffixTree, AddingSequencesNeverLowersCounts) {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    auto pool = random_pool(rng, 3, 8, 20);
    const auto before = build(pool, 6);
    pool.sequences.push_back(random_pool(rng, 3, 1, 20).sequences.front());
    const auto after = build(pool, 6);
    // Enumerate every indexed path of `before` and compare counts.
    std::vector<std::pair<std::uint32_t, TokenSequence>> stack{{0, {}}};
    while (!stack.empty()) {
      auto [id, path] = stack.back();
      stack.pop_back();
      if (!path.empty()) EXPECT_GE(after.count(path), before.count(path));
      for (const auto& e : before.children(id)) {
        auto next = path;
        next.push_back(e.token);
        stack.emplace_back(e.node, std::move(next));
      }
    }
  }
}

TEST(SuffixTree, AnchorLeavesRoomForTheBlock) {
  EXPECT_EQ(max_anchor(32, 4), 28u);
  EXPECT_EQ(max_anchor(4, 4), 3u);
  EXPECT_EQ(max_anchor(1, 4), 1u);
}

TEST(NgramMatcher, FirstOccurrenceOfLongestMatch) {
  const auto pool = make_pool({{1, 2, 9}, {1, 2, 3}, {1, 2, 3}});
  NgramMatcher m(&pool, 4, 1);
  const auto block = m.retrieve(TokenSequence{1, 2}, 3);
  EXPECT_EQ(block.tokens, (TokenSequence{9}));
  EXPECT_EQ(block.match_depth, 2u);
  EXPECT_GT(m.last_scan(), 0u);
  NgramMatcher none(nullptr, 4, 1);
  EXPECT_TRUE(none.retrieve(TokenSequence{1}, 3).empty());
}

TEST(Pools, ShardByAssignment) {
  std::vector<TokenPool> pools{{1, 0, {{1}}}, {2, 0, {{2}}}, {3, 0, {}}};
  const std::map<PromptId, std::size_t> assign{{1, 0}, {2, 1}, {3, 1}};
  const auto shards = shard_pools(pools, assign, 2);
  ASSERT_EQ(shards.size(), 2u);
  EXPECT_EQ(shards[0].size(), 1u);
  EXPECT_EQ(shards[1].size(), 2u);
  EXPECT_THROW(shard_pools(pools, {{1, 0}}, 2), ConfigError);
  EXPECT_THROW(shard_pools(pools, {{1, 0}, {2, 5}, {3, 0}}, 2), ConfigError);
}

TEST(Pools, TextRoundTrip) {
  std::vector<TokenPool> pools{{4, 2, {{1, 2, 3}, {}, {7}}}, {5, 2, {}}};
  std::stringstream ss;
  write_pools(ss, pools);
  const auto back = read_pools(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].prompt, 4u);
  EXPECT_EQ(back[0].version, 2u);
  EXPECT_EQ(back[0].sequences, pools[0].sequences);
  EXPECT_TRUE(back[1].sequences.empty());
  std::istringstream bad("garbage\n");
  EXPECT_THROW(read_pools(bad), ConfigError);
  std::istringstream truncated("@pool prompt=1 version=0 sequences=2\n1 2\n");
  EXPECT_THROW(read_pools(truncated), ConfigError);
}

}  // namespace
}  // namespace bsim
