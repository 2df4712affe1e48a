// Copyright (c) 2026, The bsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "bsim/config.hpp"
#include "bsim/latency_model.hpp"
#include "bsim/metrics.hpp"
#include "bsim/policy.hpp"
#include "bsim/rng.hpp"
#include "bsim/scheduler.hpp"
#include "bsim/spec_decoder.hpp"
#include "bsim/suffix_index.hpp"
#include "bsim/types.hpp"
#include "bsim/verification.hpp"
