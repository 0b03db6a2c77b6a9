// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-tier expert store: every expert lives in a host arena; each layer keeps
// up to k experts on device under LRU, and b staging buffers shared by all
// layers receive speculative loads. Every transfer is logged.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moe/common.hpp"
#include "moe/model.hpp"

namespace moe {

enum class EventKind : std::uint8_t {
  kHit,
  kStagingHit,
  kMissLoad,
  kEvictToHost,
  kSpeculativeLoad,
  kPromoteFromStaging,
};

std::string_view to_string(EventKind kind);
EventKind event_kind_from_string(std::string_view name);

struct StoreEvent {
  EventKind kind = EventKind::kHit;
  ExpertKey key;
  std::uint32_t token_pos = 0;
  std::uint32_t layer = 0;  // layer executing when the event happened
  std::uint64_t bytes_moved = 0;
  std::uint64_t seq = 0;

  friend bool operator==(const StoreEvent&, const StoreEvent&) = default;
};

// True for the three outcomes of an acquire: hit, staging_hit, miss_load.
bool is_acquire_outcome(EventKind kind);

std::string to_json(const StoreEvent& e);
void write_events_jsonl(std::ostream& os, std::span<const StoreEvent> events);

struct CacheConfig {
  std::size_t k = 2;  // device-resident experts per layer
  std::size_t b = 4;  // staging buffers shared by all layers
  std::size_t expert_bytes = 0;

  void validate(std::size_t n_experts) const;
};

// Canonical copies of all expert blocks, contiguous and indexed by key.
class HostArena {
 public:
  HostArena(std::size_t n_layers, std::size_t n_experts, std::size_t expert_floats);
  static std::shared_ptr<const HostArena> from_model(const Model& model);

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_experts() const { return n_experts_; }
  std::size_t expert_floats() const { return expert_floats_; }
  std::span<const float> block(ExpertKey key) const;
  std::span<float> block(ExpertKey key);

 private:
  std::size_t n_layers_, n_experts_, expert_floats_;
  std::vector<float> data_;
};

// Shared ownership keeps a handle valid after its slot is evicted.
using ExpertBuffer = std::shared_ptr<const std::vector<float>>;

struct AcquireResult {
  ExpertBuffer weights;  // null when the store has no host arena
  std::vector<StoreEvent> events;
};

enum class Residence { kDevice, kStaging, kHost };

enum class RecallDefinition { kDeviceOnly, kDeviceOrStaging };

// Fraction of acquires served without a load. Throws on a log with no acquires.
double recall(std::span<const StoreEvent> events,
              RecallDefinition def = RecallDefinition::kDeviceOrStaging);

class ExpertStore {
 public:
  // Without an arena the store tracks residency only (trace replay).
  ExpertStore(std::size_t n_layers, std::size_t n_experts, CacheConfig config,
              std::shared_ptr<const HostArena> host = nullptr);

  AcquireResult acquire(ExpertKey key, std::uint32_t token_pos);

  // Best-effort copies into staging buffers; `executing_layer` entries are
  // never overwritten. Keys must share one layer and number at most b.
  std::vector<StoreEvent> speculative_load(std::span<const ExpertKey> keys,
                                           std::uint32_t token_pos,
                                           std::uint32_t executing_layer);

  // Checks residency invariants; throws kCorrupt on violation.
  void audit() const;

  std::vector<std::uint32_t> device_order(std::uint32_t layer) const;  // most recent first
  std::vector<ExpertKey> staged() const;                              // oldest first
  bool on_device(ExpertKey key) const;
  Residence locate(ExpertKey key) const;
  std::vector<StoreEvent> events() const;
  std::size_t event_count() const;
  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_experts() const { return n_experts_; }
  const CacheConfig& config() const { return config_; }

 private:
  struct StagingSlot {
    ExpertKey key;
    std::uint64_t staged_seq = 0;
    ExpertBuffer buffer;
  };

  void check_key(ExpertKey key) const;
  ExpertBuffer copy_from_host(ExpertKey key) const;
  StoreEvent& emit(EventKind kind, ExpertKey key, std::uint32_t token_pos, std::uint32_t layer,
                   std::vector<StoreEvent>& out);
  void insert_mru(ExpertKey key, ExpertBuffer buffer, std::uint32_t token_pos,
                  std::vector<StoreEvent>& out);
  std::optional<std::size_t> find_staged(ExpertKey key) const;

  std::size_t n_layers_, n_experts_;
  CacheConfig config_;
  std::shared_ptr<const HostArena> host_;

  struct Resident {
    std::uint32_t expert;
    ExpertBuffer buffer;
  };
  std::vector<std::vector<Resident>> device_;  // per layer, most recent first
  std::vector<StagingSlot> staging_;
  std::vector<StoreEvent> log_;
  std::uint64_t next_seq_ = 0;
  mutable std::mutex mu_;
};

}  // namespace moe
