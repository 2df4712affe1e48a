// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bsim {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;
using TokenView = std::span<const TokenId>;

// Context padding for prefixes shorter than the policy order.
inline constexpr TokenId kBeginMarker = -1;

struct Vocabulary {
  std::int32_t size = 2;
  TokenId eos = 0;

  void validate() const;
};

// Raised for invalid user-facing configuration (bad flags, malformed files,
// missing prompt assignments).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a caller breaks an operation precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Raised when draft indices from the wrong training step reach a rollout.
class StalenessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void Vocabulary::validate() const {
  if (size < 2) {
    throw ConfigError("vocabulary size must be >= 2, got " + std::to_string(size));
  }
  if (eos < 0 || eos >= size) {
    throw ConfigError("eos token " + std::to_string(eos) + " outside [0, " + std::to_string(size) + ")");
  }
}

}  // namespace bsim
