// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Drives a fresh store from a recorded trace exactly as the live engine
// would have, so live and replayed event logs can be compared field by field.

#pragma once

#include <vector>

#include "moe/engine.hpp"
#include "moe/trace.hpp"

namespace moe {

struct ReplayResult {
  std::vector<StoreEvent> events;
  std::vector<StepMark> steps;
  double recall = 0.0;  // device_or_staging
};

// Speculative policies need `model` (for the gates) and recorded hidden
// states; otherwise replay is refused with kInvalidArgument.
ReplayResult replay(const Trace& trace, const EngineConfig& config, const Model* model = nullptr);

}  // namespace moe
