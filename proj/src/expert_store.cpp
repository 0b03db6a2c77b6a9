// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/expert_store.hpp"

#include <algorithm>
#include <array>
#include <json.hpp>
#include <ostream>
#include <utility>

#include "moe/error.hpp"

namespace moe {

namespace {

constexpr std::array<std::string_view, 6> kKindNames{
    "hit", "staging_hit", "miss_load", "evict_to_host", "speculative_load", "promote_from_staging"};

bool moves_bytes(EventKind kind) {
  return kind == EventKind::kMissLoad || kind == EventKind::kEvictToHost ||
         kind == EventKind::kSpeculativeLoad;
}

}  // namespace

std::string_view to_string(EventKind kind) { return kKindNames.at(static_cast<std::size_t>(kind)); }

EventKind event_kind_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == name) return static_cast<EventKind>(i);
  throw Error(ErrorCode::kCorrupt, "unknown event kind '" + std::string(name) + "'");
}

bool is_acquire_outcome(EventKind kind) {
  return kind == EventKind::kHit || kind == EventKind::kStagingHit || kind == EventKind::kMissLoad;
}

std::string to_json(const StoreEvent& e) {
  nlohmann::ordered_json j;
  j["seq"] = e.seq;
  j["kind"] = to_string(e.kind);
  j["layer"] = e.key.layer;
  j["expert"] = e.key.expert;
  j["token_pos"] = e.token_pos;
  j["bytes_moved"] = e.bytes_moved;
  j["at_layer"] = e.layer;
  return j.dump();
}

void write_events_jsonl(std::ostream& os, std::span<const StoreEvent> events) {
  for (const auto& e : events) os << to_json(e) << '\n';
}

void CacheConfig::validate(std::size_t n_experts) const {
  if (k > n_experts)
    throw Error(ErrorCode::kInvalidArgument,
                "cache size k=" + std::to_string(k) + " exceeds n_experts=" +
                    std::to_string(n_experts));
}

HostArena::HostArena(std::size_t n_layers, std::size_t n_experts, std::size_t expert_floats)
    : n_layers_(n_layers),
      n_experts_(n_experts),
      expert_floats_(expert_floats),
      data_(n_layers * n_experts * expert_floats, 0.0f) {}

std::shared_ptr<const HostArena> HostArena::from_model(const Model& model) {
  const auto& cfg = model.config();
  auto arena = std::make_shared<HostArena>(cfg.n_layers, cfg.n_experts, cfg.expert_floats());
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
    for (std::uint32_t e = 0; e < cfg.n_experts; ++e) {
      const auto& src = model.params().layers[l].experts[e];
      std::copy(src.begin(), src.end(), arena->block({l, e}).begin());
    }
  return arena;
}

std::span<const float> HostArena::block(ExpertKey key) const {
  if (key.layer >= n_layers_ || key.expert >= n_experts_)
    throw Error(ErrorCode::kUnknownKey, "no expert " + to_string(key));
  return std::span<const float>(data_).subspan(
      (key.layer * n_experts_ + key.expert) * expert_floats_, expert_floats_);
}

std::span<float> HostArena::block(ExpertKey key) {
  const auto s = std::as_const(*this).block(key);
  return {const_cast<float*>(s.data()), s.size()};
}

double recall(std::span<const StoreEvent> events, RecallDefinition def) {
  std::size_t hits = 0, staged = 0, misses = 0;
  for (const auto& e : events) {
    if (e.kind == EventKind::kHit) ++hits;
    if (e.kind == EventKind::kStagingHit) ++staged;
    if (e.kind == EventKind::kMissLoad) ++misses;
  }
  const std::size_t total = hits + staged + misses;
  if (total == 0) throw Error(ErrorCode::kInvalidArgument, "recall of an empty event log");
  const std::size_t served = hits + (def == RecallDefinition::kDeviceOrStaging ? staged : 0);
  return static_cast<double>(served) / static_cast<double>(total);
}

ExpertStore::ExpertStore(std::size_t n_layers, std::size_t n_experts, CacheConfig config,
                         std::shared_ptr<const HostArena> host)
    : n_layers_(n_layers),
      n_experts_(n_experts),
      config_(config),
      host_(std::move(host)),
      device_(n_layers) {
  if (n_layers == 0 || n_experts == 0)
    throw Error(ErrorCode::kInvalidArgument, "store needs at least one layer and expert");
  config_.validate(n_experts);
  if (host_ && (host_->n_layers() != n_layers || host_->n_experts() != n_experts))
    throw Error(ErrorCode::kInvalidArgument, "host arena shape does not match the store");
}

void ExpertStore::check_key(ExpertKey key) const {
  if (key.layer >= n_layers_ || key.expert >= n_experts_)
    throw Error(ErrorCode::kUnknownKey, "no expert " + to_string(key));
}

ExpertBuffer ExpertStore::copy_from_host(ExpertKey key) const {
  if (!host_) return nullptr;
  const auto src = host_->block(key);
  return std::make_shared<const std::vector<float>>(src.begin(), src.end());
}

StoreEvent& ExpertStore::emit(EventKind kind, ExpertKey key, std::uint32_t token_pos,
                              std::uint32_t layer, std::vector<StoreEvent>& out) {
  StoreEvent e{kind, key, token_pos, layer, moves_bytes(kind) ? config_.expert_bytes : 0,
               next_seq_++};
  log_.push_back(e);
  out.push_back(e);
  return log_.back();
}

std::optional<std::size_t> ExpertStore::find_staged(ExpertKey key) const {
  for (std::size_t i = 0; i < staging_.size(); ++i)
    if (staging_[i].key == key) return i;
  return std::nullopt;
}

void ExpertStore::insert_mru(ExpertKey key, ExpertBuffer buffer, std::uint32_t token_pos,
                             std::vector<StoreEvent>& out) {
  auto& lru = device_[key.layer];
  lru.insert(lru.begin(), Resident{key.expert, std::move(buffer)});
  if (lru.size() > config_.k) {
    const ExpertKey victim{key.layer, lru.back().expert};
    lru.pop_back();
    emit(EventKind::kEvictToHost, victim, token_pos, key.layer, out);
  }
}

AcquireResult ExpertStore::acquire(ExpertKey key, std::uint32_t token_pos) {
  std::lock_guard lock(mu_);
  check_key(key);
  AcquireResult result;
  auto& lru = device_[key.layer];
  auto it = std::find_if(lru.begin(), lru.end(),
                         [&](const Resident& r) { return r.expert == key.expert; });
  if (it != lru.end()) {
    std::rotate(lru.begin(), it, it + 1);
    result.weights = lru.front().buffer;
    emit(EventKind::kHit, key, token_pos, key.layer, result.events);
    return result;
  }
  if (auto slot = find_staged(key)) {
    result.weights = staging_[*slot].buffer;
    staging_.erase(staging_.begin() + static_cast<std::ptrdiff_t>(*slot));
    emit(EventKind::kStagingHit, key, token_pos, key.layer, result.events);
    if (config_.k > 0) {
      emit(EventKind::kPromoteFromStaging, key, token_pos, key.layer, result.events);
      insert_mru(key, result.weights, token_pos, result.events);
    }
    return result;
  }
  result.weights = copy_from_host(key);
  emit(EventKind::kMissLoad, key, token_pos, key.layer, result.events);
  // With k = 0 the copy is a transient scratch buffer and nothing is retained.
  if (config_.k > 0) insert_mru(key, result.weights, token_pos, result.events);
  return result;
}

std::vector<StoreEvent> ExpertStore::speculative_load(std::span<const ExpertKey> keys,
                                                      std::uint32_t token_pos,
                                                      std::uint32_t executing_layer) {
  std::lock_guard lock(mu_);
  if (keys.size() > config_.b)
    throw Error(ErrorCode::kInvalidArgument,
                std::to_string(keys.size()) + " speculative keys exceed b=" +
                    std::to_string(config_.b));
  std::vector<StoreEvent> out;
  for (const auto& key : keys) {
    check_key(key);
    if (key.layer != keys.front().layer)
      throw Error(ErrorCode::kInvalidArgument, "speculative keys must share one layer");
    const auto& lru = device_[key.layer];
    const bool resident = std::any_of(lru.begin(), lru.end(),
                                      [&](const Resident& r) { return r.expert == key.expert; });
    if (resident || find_staged(key)) continue;

    std::optional<std::size_t> slot;
    if (staging_.size() < config_.b) {
      staging_.emplace_back();
      slot = staging_.size() - 1;
    } else {
      for (std::size_t i = 0; i < staging_.size(); ++i) {
        if (staging_[i].key.layer == executing_layer) continue;
        if (!slot || staging_[i].staged_seq < staging_[*slot].staged_seq) slot = i;
      }
      if (!slot) continue;
    }
    const auto& e = emit(EventKind::kSpeculativeLoad, key, token_pos, executing_layer, out);
    staging_[*slot] = StagingSlot{key, e.seq, copy_from_host(key)};
  }
  return out;
}

void ExpertStore::audit() const {
  std::lock_guard lock(mu_);
  if (staging_.size() > config_.b) throw Error(ErrorCode::kCorrupt, "staging exceeds b");
  for (std::uint32_t l = 0; l < n_layers_; ++l) {
    const auto& lru = device_[l];
    if (lru.size() > config_.k)
      throw Error(ErrorCode::kCorrupt, "layer " + std::to_string(l) + " holds more than k experts");
    std::vector<bool> seen(n_experts_, false);
    for (const auto& r : lru) {
      if (r.expert >= n_experts_ || seen[r.expert])
        throw Error(ErrorCode::kCorrupt, "duplicate or invalid device entry in layer " +
                                             std::to_string(l));
      seen[r.expert] = true;
      if (host_ && (!r.buffer || r.buffer->size() != host_->expert_floats()))
        throw Error(ErrorCode::kCorrupt, "device buffer missing for " +
                                             to_string(ExpertKey{l, r.expert}));
    }
  }
  for (std::size_t i = 0; i < staging_.size(); ++i) {
    const auto& s = staging_[i];
    const auto& lru = device_.at(s.key.layer);
    if (std::any_of(lru.begin(), lru.end(), [&](const Resident& r) { return r.expert == s.key.expert; }))
      throw Error(ErrorCode::kCorrupt, "staged expert is also device-resident");
    for (std::size_t j = i + 1; j < staging_.size(); ++j)
      if (staging_[j].key == s.key) throw Error(ErrorCode::kCorrupt, "expert staged twice");
  }
  for (std::size_t i = 1; i < log_.size(); ++i)
    if (log_[i].seq <= log_[i - 1].seq) throw Error(ErrorCode::kCorrupt, "event seq not increasing");
}

std::vector<std::uint32_t> ExpertStore::device_order(std::uint32_t layer) const {
  std::lock_guard lock(mu_);
  std::vector<std::uint32_t> out;
  for (const auto& r : device_.at(layer)) out.push_back(r.expert);
  return out;
}

std::vector<ExpertKey> ExpertStore::staged() const {
  std::lock_guard lock(mu_);
  auto slots = staging_;
  std::sort(slots.begin(), slots.end(),
            [](const StagingSlot& a, const StagingSlot& b) { return a.staged_seq < b.staged_seq; });
  std::vector<ExpertKey> out;
  for (const auto& s : slots) out.push_back(s.key);
  return out;
}

bool ExpertStore::on_device(ExpertKey key) const {
  std::lock_guard lock(mu_);
  check_key(key);
  const auto& lru = device_[key.layer];
  return std::any_of(lru.begin(), lru.end(),
                     [&](const Resident& r) { return r.expert == key.expert; });
}

Residence ExpertStore::locate(ExpertKey key) const {
  std::lock_guard lock(mu_);
  check_key(key);
  const auto& lru = device_[key.layer];
  if (std::any_of(lru.begin(), lru.end(), [&](const Resident& r) { return r.expert == key.expert; }))
    return Residence::kDevice;
  return find_staged(key) ? Residence::kStaging : Residence::kHost;
}

std::vector<StoreEvent> ExpertStore::events() const {
  std::lock_guard lock(mu_);
  return log_;
}

std::size_t ExpertStore::event_count() const {
  std::lock_guard lock(mu_);
  return log_.size();
}

}  // namespace moe
