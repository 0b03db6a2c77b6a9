// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "moe/bytes.hpp"
#include "moe/error.hpp"

namespace moe {

std::uint16_t half_from_float(float x) {
  const std::uint32_t b = std::bit_cast<std::uint32_t>(x);
  const std::uint16_t sign = static_cast<std::uint16_t>((b >> 16) & 0x8000u);
  const std::uint32_t exp = (b >> 23) & 0xffu;
  std::uint32_t mant = b & 0x7fffffu;
  if (exp == 0xff) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
  const int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
  if (e <= 0) {
    if (e < -10) return sign;
    mant |= 0x800000u;
    const int shift = 14 - e;
    std::uint32_t hm = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (hm & 1u))) ++hm;
    return static_cast<std::uint16_t>(sign | hm);
  }
  std::uint32_t out = sign | (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (out & 1u))) ++out;
  return static_cast<std::uint16_t>(out);
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  if (exp == 0) {
    const float v = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -v : v;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

namespace {

constexpr float kHalfMax = 65504.0f;

// Largest fp16 value <= x.
std::uint16_t half_floor(float x) {
  std::uint16_t h = half_from_float(x);
  if (half_to_float(h) > x) {
    if (h & 0x8000u)
      ++h;  // more negative
    else
      --h;
  }
  return h;
}

// Nearest fp16 >= x, except that values within kSnapTolerance below x are
// kept. The tolerance lets a dequantized block reproduce its own scale.
constexpr float kSnapTolerance = 1.0f / 16384.0f;

std::uint16_t half_snap_up(float x) {
  std::uint16_t h = half_from_float(x);
  const float v = half_to_float(h);
  if (v < x && x - v > x * kSnapTolerance) ++h;
  return h;
}

// Spacing of fp16 values around h.
float half_ulp(std::uint16_t h) {
  const int exp = (h >> 10) & 0x1f;
  return exp == 0 ? std::ldexp(1.0f, -24) : std::ldexp(1.0f, exp - 25);
}

float zero_step(const QuantScheme& s, float scale, std::uint16_t z0) {
  const float from_scale =
      std::ldexp(scale, static_cast<int>(s.bits) - static_cast<int>(s.meta_bits));
  return std::max(from_scale, 2.0f * half_ulp(z0));
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

void QuantScheme::validate() const {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 16)
    throw Error(ErrorCode::kInvalidArgument, "bits must be one of 2, 3, 4, 16");
  if (passthrough()) return;
  if (group_size == 0) throw Error(ErrorCode::kInvalidArgument, "group_size must be >= 1");
  if (scale_group_size == 0 || scale_group_size % group_size != 0)
    throw Error(ErrorCode::kInvalidArgument, "scale_group_size must be a multiple of group_size");
  if (meta_bits < 1 || meta_bits > 16)
    throw Error(ErrorCode::kInvalidArgument, "meta_bits must be in [1, 16]");
  if (scale_storage_bits != 16)
    throw Error(ErrorCode::kUnsupported, "scales are stored as fp16");
}

std::string QuantScheme::label() const {
  return passthrough() ? "FP16" : std::to_string(bits) + "-bit";
}

QuantScheme QuantScheme::preset(unsigned bits) {
  switch (bits) {
    case 16: return {16, 1, 1, 0, 16};
    case 4: return {4, 64, 256, 8, 16};
    case 3: return {3, 64, 128, 8, 16};
    case 2: return {2, 16, 128, 8, 16};
    default: throw Error(ErrorCode::kInvalidArgument, "no preset for " + std::to_string(bits) + " bits");
  }
}

std::size_t QuantizedBlock::num_scale_groups() const {
  return ceil_div(num_groups(), groups_per_scale_group());
}

float QuantizedBlock::group_scale(std::size_t group) const {
  return half_to_float(scales.at(2 * (group / groups_per_scale_group())));
}

float QuantizedBlock::group_zero(std::size_t group) const {
  const std::size_t sg = group / groups_per_scale_group();
  const float scale = half_to_float(scales.at(2 * sg));
  const std::uint16_t z0 = scales.at(2 * sg + 1);
  const std::uint32_t zq = unpack_bits(std::span(zeros).subspan(0), scheme.meta_bits,
                                       group + 1)[group];
  return half_to_float(z0) + static_cast<float>(zq) * zero_step(scheme, scale, z0);
}

std::uint32_t QuantizedBlock::code(std::size_t padded_index) const {
  const std::size_t bit = padded_index * scheme.bits;
  std::uint32_t v = 0;
  for (unsigned b = 0; b < scheme.bits; ++b) {
    const std::size_t p = bit + b;
    v |= static_cast<std::uint32_t>((packed_codes.at(p / 8) >> (p % 8)) & 1u) << b;
  }
  return v;
}

std::size_t QuantizedBlock::payload_bytes() const {
  return packed_codes.size() + zeros.size() + 2 * scales.size();
}

std::vector<std::uint8_t> pack_bits(std::span<const std::uint32_t> codes, unsigned bits) {
  if (bits == 0 || bits > 16) throw Error(ErrorCode::kInvalidArgument, "pack width out of range");
  std::vector<std::uint8_t> out(ceil_div(codes.size() * bits, 8), 0);
  const std::uint32_t limit = 1u << bits;
  std::uint64_t acc = 0;
  unsigned filled = 0;
  std::size_t pos = 0;
  for (std::uint32_t c : codes) {
    if (c >= limit) throw Error(ErrorCode::kOutOfRange, "code does not fit bit width");
    acc |= static_cast<std::uint64_t>(c) << filled;
    filled += bits;
    while (filled >= 8) {
      out[pos++] = static_cast<std::uint8_t>(acc & 0xffu);
      acc >>= 8;
      filled -= 8;
    }
  }
  if (filled > 0) out[pos] = static_cast<std::uint8_t>(acc & 0xffu);
  return out;
}

std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> packed, unsigned bits,
                                       std::size_t count) {
  if (bits == 0 || bits > 16) throw Error(ErrorCode::kInvalidArgument, "pack width out of range");
  if (packed.size() < ceil_div(count * bits, 8))
    throw Error(ErrorCode::kCorrupt, "packed buffer too short");
  std::vector<std::uint32_t> out(count);
  const std::uint64_t mask = (1u << bits) - 1u;
  std::uint64_t acc = 0;
  unsigned avail = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    while (avail < bits) {
      acc |= static_cast<std::uint64_t>(packed[pos++]) << avail;
      avail += 8;
    }
    out[i] = static_cast<std::uint32_t>(acc & mask);
    acc >>= bits;
    avail -= bits;
  }
  return out;
}

QuantizedBlock quantize(const Matrix& w, const QuantScheme& scheme) {
  scheme.validate();
  if (scheme.passthrough())
    throw Error(ErrorCode::kInvalidArgument, "quantize requires bits in {2, 3, 4}");
  if (w.rows == 0 || w.cols == 0) throw Error(ErrorCode::kInvalidArgument, "empty matrix");
  if (!all_finite(w.data)) throw Error(ErrorCode::kNonFinite, "quantize input");

  const std::size_t g = scheme.group_size;
  QuantizedBlock out;
  out.scheme = scheme;
  out.shape = {w.rows, w.cols};
  out.pad_count = static_cast<std::uint32_t>(ceil_div(w.cols, g) * g - w.cols);
  const std::size_t pc = out.padded_cols();

  std::vector<float> padded(w.rows * pc);
  for (std::size_t r = 0; r < w.rows; ++r) {
    auto row = w.row(r);
    std::copy(row.begin(), row.end(), padded.begin() + static_cast<std::ptrdiff_t>(r * pc));
    std::fill(padded.begin() + static_cast<std::ptrdiff_t>(r * pc + w.cols),
              padded.begin() + static_cast<std::ptrdiff_t>((r + 1) * pc), row.back());
  }

  const std::size_t n_groups = out.num_groups();
  const std::size_t per_sg = out.groups_per_scale_group();
  const float levels = static_cast<float>((1u << scheme.bits) - 1u);
  const std::uint32_t zlevels = (1u << scheme.meta_bits) - 1u;
  std::vector<std::uint32_t> codes(padded.size()), zcodes(n_groups);
  std::vector<float> gmin(n_groups), gmax(n_groups);
  for (std::size_t j = 0; j < n_groups; ++j) {
    const auto first = padded.begin() + static_cast<std::ptrdiff_t>(j * g);
    const auto [lo, hi] = std::minmax_element(first, first + static_cast<std::ptrdiff_t>(g));
    gmin[j] = *lo;
    gmax[j] = *hi;
  }

  for (std::size_t sg = 0; sg * per_sg < n_groups; ++sg) {
    const std::size_t j0 = sg * per_sg;
    const std::size_t j1 = std::min(n_groups, j0 + per_sg);
    float raw = 0.0f, zmin = gmin[j0];
    for (std::size_t j = j0; j < j1; ++j) {
      raw = std::max(raw, (gmax[j] - gmin[j]) / levels);
      zmin = std::min(zmin, gmin[j]);
    }
    if (raw > kHalfMax || std::abs(zmin) > kHalfMax)
      throw Error(ErrorCode::kOutOfRange, "weights exceed the fp16 metadata range");
    std::uint16_t sh = raw == 0.0f ? half_from_float(1.0f) : half_snap_up(raw);
    if (half_to_float(sh) == 0.0f) sh = 0x0001;  // smallest subnormal
    const float scale = half_to_float(sh);
    const std::uint16_t z0 = half_floor(zmin);
    const float z0f = half_to_float(z0);
    const float zstep = zero_step(scheme, scale, z0);
    out.scales.push_back(sh);
    out.scales.push_back(z0);

    for (std::size_t j = j0; j < j1; ++j) {
      const float zq = std::round((gmin[j] - z0f) / zstep);
      zcodes[j] = static_cast<std::uint32_t>(std::clamp(zq, 0.0f, static_cast<float>(zlevels)));
      for (std::size_t i = j * g; i < (j + 1) * g; ++i) {
        const float q = std::round((padded[i] - gmin[j]) / scale);
        codes[i] = static_cast<std::uint32_t>(std::clamp(q, 0.0f, levels));
      }
    }
  }
  out.packed_codes = pack_bits(codes, scheme.bits);
  out.zeros = pack_bits(zcodes, scheme.meta_bits);
  return out;
}

Matrix dequantize(const QuantizedBlock& block) {
  const auto& s = block.scheme;
  s.validate();
  if (s.passthrough() || block.shape.size() != 2)
    throw Error(ErrorCode::kCorrupt, "block is not a quantized matrix");
  const std::size_t pc = block.padded_cols();
  if (pc % s.group_size != 0) throw Error(ErrorCode::kCorrupt, "padding does not align to groups");
  const std::size_t n = block.rows() * pc;
  const std::size_t n_groups = block.num_groups();
  if (block.scales.size() != 2 * block.num_scale_groups())
    throw Error(ErrorCode::kCorrupt, "scale table length mismatch");
  const auto codes = unpack_bits(block.packed_codes, s.bits, n);
  const auto zcodes = unpack_bits(block.zeros, s.meta_bits, n_groups);

  Matrix out(block.rows(), block.cols());
  const std::size_t per_sg = block.groups_per_scale_group();
  for (std::size_t j = 0; j < n_groups; ++j) {
    const std::size_t sg = j / per_sg;
    const float scale = half_to_float(block.scales[2 * sg]);
    const std::uint16_t z0 = block.scales[2 * sg + 1];
    const float zhat = half_to_float(z0) + static_cast<float>(zcodes[j]) * zero_step(s, scale, z0);
    for (std::size_t i = j * s.group_size; i < (j + 1) * s.group_size; ++i) {
      const std::size_t r = i / pc, c = i % pc;
      if (c < block.cols()) out.at(r, c) = scale * static_cast<float>(codes[i]) + zhat;
    }
  }
  return out;
}

std::vector<std::uint8_t> serialize(const QuantizedBlock& block) {
  ByteWriter w;
  w.u8(1);
  w.u8(static_cast<std::uint8_t>(block.scheme.bits));
  w.u32(static_cast<std::uint32_t>(block.scheme.group_size));
  w.u32(static_cast<std::uint32_t>(block.scheme.scale_group_size));
  w.u8(static_cast<std::uint8_t>(block.scheme.meta_bits));
  w.u8(static_cast<std::uint8_t>(block.shape.size()));
  for (auto d : block.shape) w.u64(d);
  w.u32(block.pad_count);
  w.bytes(block.packed_codes);
  w.bytes(block.zeros);
  for (auto v : block.scales) w.u16(v);
  return w.take();
}

QuantizedBlock deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.u8() != 1) throw Error(ErrorCode::kCorrupt, "unknown quantized block version");
  QuantizedBlock b;
  b.scheme.bits = r.u8();
  b.scheme.group_size = r.u32();
  b.scheme.scale_group_size = r.u32();
  b.scheme.meta_bits = r.u8();
  try {
    b.scheme.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kCorrupt, e.what());
  }
  const std::size_t ndims = r.u8();
  if (ndims != 2) throw Error(ErrorCode::kCorrupt, "quantized block must be 2-D");
  for (std::size_t i = 0; i < ndims; ++i) b.shape.push_back(r.u64());
  b.pad_count = r.u32();
  if (b.rows() == 0 || b.cols() == 0 || b.padded_cols() % b.scheme.group_size != 0 ||
      b.pad_count >= b.scheme.group_size)
    throw Error(ErrorCode::kCorrupt, "shape and padding are inconsistent");
  const std::size_t n = b.rows() * b.padded_cols();
  const std::size_t code_bytes = ceil_div(n * b.scheme.bits, 8);
  const std::size_t zero_bytes = ceil_div(b.num_groups() * b.scheme.meta_bits, 8);
  const std::size_t scale_words = 2 * b.num_scale_groups();
  if (r.remaining() != code_bytes + zero_bytes + 2 * scale_words)
    throw Error(ErrorCode::kCorrupt, "payload length does not match header");
  auto c = r.bytes(code_bytes);
  b.packed_codes.assign(c.begin(), c.end());
  auto z = r.bytes(zero_bytes);
  b.zeros.assign(z.begin(), z.end());
  b.scales.resize(scale_words);
  for (auto& v : b.scales) v = r.u16();
  return b;
}

double bits_per_param(const QuantScheme& scheme) {
  scheme.validate();
  if (scheme.passthrough()) return 16.0;
  const double g = static_cast<double>(scheme.group_size);
  const double sg = static_cast<double>(scheme.scale_group_size);
  // codes + one zero code per group + {fp16 scale, fp16 zero offset} per scale group
  return scheme.bits + scheme.meta_bits / g + 2.0 * scheme.scale_storage_bits / sg;
}

ArchSpec ArchSpec::mixtral8x7b() {
  const double vocab = 32000, d = 4096, layers = 32, ffn = 14336, experts = 8;
  const double kv = 1024;  // 8 key/value heads of width 128
  ArchSpec a;
  a.name = "mixtral8x7b";
  a.experts_params = layers * experts * 3 * d * ffn;
  a.attention_params = layers * (2 * d * d + 2 * d * kv);
  a.embedding_params = vocab * d;
  a.lm_head_params = vocab * d;
  a.gate_params = layers * experts * d;
  a.norm_params = layers * 2 * d + d;
  return a;
}

void MixedQuantConfig::validate() const {
  attn_scheme.validate();
  expert_scheme.validate();
  for (const char* required : {"embeddings", "lm_head", "moe_gates", "layer_norms"})
    if (std::find(fp16_layers.begin(), fp16_layers.end(), required) == fp16_layers.end())
      throw Error(ErrorCode::kInvalidArgument,
                  std::string("fp16_layers must contain ") + required);
}

SizeReport model_size_report(const ArchSpec& arch, const MixedQuantConfig& config) {
  config.validate();
  for (double p : {arch.experts_params, arch.attention_params, arch.embedding_params,
                   arch.lm_head_params, arch.gate_params, arch.norm_params})
    if (p < 0) throw Error(ErrorCode::kInvalidArgument, "negative parameter count");

  SizeReport report;
  auto add = [&](const std::string& name, double params, double bpp) {
    const double gib = params * bpp / 8.0 / 1073741824.0;
    report.rows.push_back({name, params, bpp, gib});
    report.total_gib += gib;
  };
  add("experts", arch.experts_params, bits_per_param(config.expert_scheme));
  add("attention", arch.attention_params, bits_per_param(config.attn_scheme));
  add("embeddings", arch.embedding_params, 16.0);
  add("lm_head", arch.lm_head_params, 16.0);
  add("moe_gates", arch.gate_params, 16.0);
  add("layer_norms", arch.norm_params, 16.0);
  report.experts_fraction = arch.experts_fraction();
  return report;
}

}  // namespace moe
