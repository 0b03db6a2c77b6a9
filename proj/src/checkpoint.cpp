// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/checkpoint.hpp"

#include <algorithm>
#include <json.hpp>

#include "moe/bytes.hpp"

namespace moe {

namespace {

bool is_expert_tensor(const std::string& name) {
  return name.find(".experts.") != std::string::npos;
}

nlohmann::json parse_manifest(ByteReader& r) {
  try {
    return nlohmann::json::parse(r.str(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("checkpoint manifest: ") + e.what());
  }
}

std::vector<std::uint8_t> frame(const char* magic, const ModelConfig& cfg,
                                const nlohmann::json& manifest, const ByteWriter& data) {
  const std::string c = cfg.to_json();
  const std::string m = manifest.dump();
  ByteWriter w;
  w.str(magic);
  w.u32(static_cast<std::uint32_t>(c.size()));
  w.str(c);
  w.u32(static_cast<std::uint32_t>(m.size()));
  w.str(m);
  w.bytes(data.data());
  return w.take();
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  nlohmann::json manifest = nlohmann::json::array();
  ByteWriter data;
  for_each_tensor(model.params(), [&](const std::string& name, const std::vector<std::size_t>& shape,
                                      std::span<const float> v) {
    manifest.push_back({{"name", name}, {"shape", shape}, {"offset", data.size()}});
    data.f32s(v);
  });
  return frame(kCheckpointMagic, model.config(), manifest, data);
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(5) != kCheckpointMagic) throw Error(ErrorCode::kCorrupt, "not a MOEL1 checkpoint");
  const auto cfg = ModelConfig::from_json(r.str(r.u32()));
  const nlohmann::json manifest = parse_manifest(r);
  const std::size_t base = r.position();

  ModelParams p = ModelParams::zeros(cfg);
  std::size_t i = 0;
  try {
    for_each_tensor(p, [&](const std::string& name, const std::vector<std::size_t>& shape,
                           std::span<float> v) {
      if (i >= manifest.size()) throw Error(ErrorCode::kCorrupt, "manifest is missing " + name);
      const auto& entry = manifest[i++];
      if (entry.at("name").get<std::string>() != name ||
          entry.at("shape").get<std::vector<std::size_t>>() != shape)
        throw Error(ErrorCode::kCorrupt, "manifest mismatch at " + name);
      r.seek(base + entry.at("offset").get<std::size_t>());
      r.f32s(v);
    });
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("checkpoint manifest: ") + e.what());
  }
  if (i != manifest.size()) throw Error(ErrorCode::kCorrupt, "manifest has extra tensors");
  return Model(cfg, std::move(p));
}

void save_checkpoint(const Model& model, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(model));
}

Model load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

std::vector<std::uint8_t> encode_quantized_checkpoint(const Model& model,
                                                      const QuantScheme& scheme) {
  scheme.validate();
  if (scheme.passthrough())
    throw Error(ErrorCode::kInvalidArgument, "quantized checkpoints need bits in {2, 3, 4}");
  nlohmann::json tensors = nlohmann::json::array();
  ByteWriter data;
  for_each_tensor(model.params(), [&](const std::string& name, const std::vector<std::size_t>& shape,
                                      std::span<const float> v) {
    nlohmann::json entry{{"name", name}, {"shape", shape}, {"offset", data.size()}};
    if (is_expert_tensor(name)) {
      Matrix m(1, v.size());
      std::copy(v.begin(), v.end(), m.data.begin());
      const auto block = serialize(quantize(m, scheme));
      entry["length"] = block.size();
      data.bytes(block);
    } else {
      data.f32s(v);
    }
    tensors.push_back(std::move(entry));
  });
  const nlohmann::json manifest{{"scheme",
                                 {{"bits", scheme.bits},
                                  {"group_size", scheme.group_size},
                                  {"scale_group_size", scheme.scale_group_size},
                                  {"meta_bits", scheme.meta_bits}}},
                                {"tensors", tensors}};
  return frame(kQuantCheckpointMagic, model.config(), manifest, data);
}

LoadedModel decode_quantized_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(5) != kQuantCheckpointMagic)
    throw Error(ErrorCode::kCorrupt, "not a MOEQ1 checkpoint");
  const auto cfg = ModelConfig::from_json(r.str(r.u32()));
  const nlohmann::json manifest = parse_manifest(r);
  const std::size_t base = r.position();

  ModelParams p = ModelParams::zeros(cfg);
  QuantScheme scheme;
  std::size_t expert_bytes = 0;
  try {
    const auto& js = manifest.at("scheme");
    scheme.bits = js.at("bits").get<unsigned>();
    scheme.group_size = js.at("group_size").get<std::size_t>();
    scheme.scale_group_size = js.at("scale_group_size").get<std::size_t>();
    scheme.meta_bits = js.at("meta_bits").get<unsigned>();
    const auto& tensors = manifest.at("tensors");
    std::size_t i = 0;
    for_each_tensor(p, [&](const std::string& name, const std::vector<std::size_t>& shape,
                           std::span<float> v) {
      if (i >= tensors.size()) throw Error(ErrorCode::kCorrupt, "manifest is missing " + name);
      const auto& entry = tensors[i++];
      if (entry.at("name").get<std::string>() != name ||
          entry.at("shape").get<std::vector<std::size_t>>() != shape)
        throw Error(ErrorCode::kCorrupt, "manifest mismatch at " + name);
      r.seek(base + entry.at("offset").get<std::size_t>());
      if (!is_expert_tensor(name)) {
        r.f32s(v);
        return;
      }
      const auto block = deserialize(r.bytes(entry.at("length").get<std::size_t>()));
      if (!(block.scheme == scheme) || block.rows() != 1 || block.cols() != v.size())
        throw Error(ErrorCode::kCorrupt, "expert block does not match manifest at " + name);
      const Matrix m = dequantize(block);
      std::copy(m.data.begin(), m.data.end(), v.begin());
      expert_bytes = std::max(expert_bytes, block.payload_bytes());
    });
    if (i != tensors.size()) throw Error(ErrorCode::kCorrupt, "manifest has extra tensors");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("checkpoint manifest: ") + e.what());
  }
  return {Model(cfg, std::move(p)), scheme, expert_bytes};
}

LoadedModel load_any_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 5 && std::equal(bytes.begin(), bytes.begin() + 5, kQuantCheckpointMagic))
    return decode_quantized_checkpoint(bytes);
  Model m = decode_checkpoint(bytes);
  const std::size_t fp16_bytes = m.config().expert_floats() * 2;
  return {std::move(m), QuantScheme::preset(16), fp16_bytes};
}

}  // namespace moe
