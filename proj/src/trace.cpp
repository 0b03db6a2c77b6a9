// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/trace.hpp"

#include <algorithm>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "moe/bytes.hpp"
#include "moe/error.hpp"

namespace moe {

namespace {

constexpr char kTraceMagic[] = "MOET1";

nlohmann::json header_json(const TraceHeader& h) {
  return {{"config_digest", h.config_digest}, {"n_layers", h.n_layers},
          {"n_experts", h.n_experts},         {"top_k", h.top_k},
          {"d_model", h.d_model},             {"records_hidden", h.records_hidden},
          {"prompt_len", h.prompt_len}};
}

TraceHeader header_from(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TraceHeader h;
    h.config_digest = j.at("config_digest").get<std::string>();
    h.n_layers = j.at("n_layers").get<std::size_t>();
    h.n_experts = j.at("n_experts").get<std::size_t>();
    h.top_k = j.at("top_k").get<std::size_t>();
    h.d_model = j.at("d_model").get<std::size_t>();
    h.records_hidden = j.at("records_hidden").get<bool>();
    h.prompt_len = j.at("prompt_len").get<std::size_t>();
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("trace header: ") + e.what());
  }
}

}  // namespace

std::size_t Trace::n_tokens() const {
  return header.n_layers == 0 ? 0 : records.size() / header.n_layers;
}

const TraceRecord& Trace::at(std::size_t token, std::size_t layer) const {
  const std::size_t i = token * header.n_layers + layer;
  if (layer >= header.n_layers || i >= records.size())
    throw Error(ErrorCode::kOutOfRange, "no trace record for token " + std::to_string(token) +
                                            " layer " + std::to_string(layer));
  return records[i];
}

void Trace::validate() const {
  const auto& h = header;
  if (h.n_layers == 0 || h.n_experts == 0 || h.top_k == 0 || h.top_k > h.n_experts)
    throw Error(ErrorCode::kCorrupt, "trace header has invalid dimensions");
  if (records.empty()) throw Error(ErrorCode::kCorrupt, "trace has no records");
  if (records.size() % h.n_layers != 0)
    throw Error(ErrorCode::kCorrupt, "trace does not hold every layer of every token");
  if (h.prompt_len > n_tokens()) throw Error(ErrorCode::kCorrupt, "prompt_len exceeds the trace");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string where = "trace record " + std::to_string(i);
    if (r.token_pos != i / h.n_layers || r.layer != i % h.n_layers)
      throw Error(ErrorCode::kCorrupt, where + " is out of (token, layer) order");
    if (r.experts.size() != h.top_k || r.weights.size() != h.top_k)
      throw Error(ErrorCode::kCorrupt, where + " does not hold top_k experts");
    for (std::size_t j = 0; j < r.experts.size(); ++j) {
      if (r.experts[j] >= h.n_experts) throw Error(ErrorCode::kCorrupt, where + ": bad expert");
      if (std::find(r.experts.begin(), r.experts.begin() + static_cast<std::ptrdiff_t>(j),
                    r.experts[j]) != r.experts.begin() + static_cast<std::ptrdiff_t>(j))
        throw Error(ErrorCode::kCorrupt, where + ": duplicate expert");
    }
    if (r.hidden.size() != (h.records_hidden ? h.d_model : 0))
      throw Error(ErrorCode::kCorrupt, where + ": hidden state size mismatch");
  }
}

TraceHeader header_for(const ModelConfig& cfg, bool records_hidden, std::size_t prompt_len) {
  return {cfg.digest(), cfg.n_layers, cfg.n_experts, cfg.top_k_gate, cfg.d_model, records_hidden,
          prompt_len};
}

std::string header_to_json(const TraceHeader& h) { return header_json(h).dump(); }

std::string to_jsonl(const Trace& trace) {
  std::ostringstream os;
  os << header_to_json(trace.header) << '\n';
  for (const auto& r : trace.records) {
    nlohmann::ordered_json j;
    j["t"] = r.token_pos;
    j["l"] = r.layer;
    j["e"] = r.experts;
    j["w"] = r.weights;
    if (trace.header.records_hidden) j["h"] = r.hidden;
    os << j.dump() << '\n';
  }
  return os.str();
}

Trace trace_from_jsonl(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw Error(ErrorCode::kCorrupt, "empty trace file");
  Trace t;
  t.header = header_from(line);
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TraceRecord r;
      r.token_pos = j.at("t").get<std::uint32_t>();
      r.layer = j.at("l").get<std::uint32_t>();
      r.experts = j.at("e").get<std::vector<std::uint32_t>>();
      r.weights = j.at("w").get<std::vector<float>>();
      if (j.contains("h")) r.hidden = j.at("h").get<std::vector<float>>();
      t.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kCorrupt, "trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  t.validate();
  return t;
}

std::vector<std::uint8_t> to_binary(const Trace& trace) {
  ByteWriter w;
  const std::string header = header_to_json(trace.header);
  w.str(kTraceMagic);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.str(header);
  w.u64(trace.records.size());
  for (const auto& r : trace.records) {
    w.u32(r.token_pos);
    w.u32(r.layer);
    w.u32(static_cast<std::uint32_t>(r.experts.size()));
    for (auto e : r.experts) w.u32(e);
    w.f32s(r.weights);
    w.f32s(r.hidden);
  }
  return w.take();
}

Trace trace_from_binary(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(5) != kTraceMagic) throw Error(ErrorCode::kCorrupt, "not a MOET1 trace");
  Trace t;
  t.header = header_from(r.str(r.u32()));
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / 12) throw Error(ErrorCode::kCorrupt, "trace record count is too large");
  const std::size_t hidden = t.header.records_hidden ? t.header.d_model : 0;
  t.records.resize(n);
  for (auto& rec : t.records) {
    rec.token_pos = r.u32();
    rec.layer = r.u32();
    const std::uint32_t k = r.u32();
    if (k > t.header.n_experts) throw Error(ErrorCode::kCorrupt, "trace record is too wide");
    rec.experts.resize(k);
    for (auto& e : rec.experts) e = r.u32();
    rec.weights.resize(k);
    r.f32s(rec.weights);
    rec.hidden.resize(hidden);
    r.f32s(rec.hidden);
  }
  if (r.remaining() != 0) throw Error(ErrorCode::kCorrupt, "trailing bytes after trace records");
  t.validate();
  return t;
}

void save_trace(const Trace& trace, const std::string& path, bool binary) {
  if (binary) {
    write_file_atomic(path, to_binary(trace));
  } else {
    write_file_atomic(path, to_jsonl(trace));
  }
}

Trace load_trace(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 5 && std::equal(bytes.begin(), bytes.begin() + 5, kTraceMagic))
    return trace_from_binary(bytes);
  return trace_from_jsonl(std::string(bytes.begin(), bytes.end()));
}

void SyntheticTraceSpec::validate() const {
  if (n_tokens == 0 || n_layers == 0 || n_experts == 0 || top_k == 0 || top_k > n_experts)
    throw Error(ErrorCode::kInvalidArgument, "synthetic trace dimensions are invalid");
  if (!(locality >= 0.0 && locality <= 1.0))
    throw Error(ErrorCode::kInvalidArgument, "locality must be in [0, 1]");
}

Trace synth(const SyntheticTraceSpec& spec) {
  spec.validate();
  Trace t;
  t.header = {"synthetic", spec.n_layers, spec.n_experts, spec.top_k, 0, false, 0};
  Rng rng(spec.seed);
  std::vector<TraceRecord> previous(spec.n_layers);
  std::vector<std::uint32_t> pool(spec.n_experts);
  t.records.reserve(spec.n_tokens * spec.n_layers);
  for (std::uint32_t tok = 0; tok < spec.n_tokens; ++tok) {
    for (std::uint32_t l = 0; l < spec.n_layers; ++l) {
      TraceRecord r;
      r.token_pos = tok;
      r.layer = l;
      if (tok > 0 && rng.uniform() < spec.locality) {
        r.experts = previous[l].experts;
        r.weights = previous[l].weights;
      } else {
        // Partial Fisher-Yates for top_k distinct experts.
        std::iota(pool.begin(), pool.end(), 0u);
        for (std::size_t i = 0; i < spec.top_k; ++i) {
          const std::size_t j = i + rng.below(spec.n_experts - i);
          std::swap(pool[i], pool[j]);
          r.experts.push_back(pool[i]);
        }
        double total = 0.0;
        std::vector<double> raw(spec.top_k);
        for (auto& v : raw) total += (v = 0.05 + rng.uniform());
        std::sort(raw.begin(), raw.end(), std::greater<>());
        for (double v : raw) r.weights.push_back(static_cast<float>(v / total));
      }
      previous[l] = r;
      t.records.push_back(std::move(r));
    }
  }
  return t;
}

}  // namespace moe
