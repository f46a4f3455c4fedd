// SPDX-License-Identifier: Apache-2.0
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "ctlab/nanolm.hpp"

namespace ctlab::nanolm {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'C', 'T', 'L', '1'};
constexpr std::size_t kHeaderBytes = 4 + 4 * 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 3; b >= 0; --b) v = (v << 8) | in[at + static_cast<std::size_t>(b)];
  return v;
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::string describe(const ModelConfig& c) {
  return "(V=" + std::to_string(c.vocab_size) + ", K=" + std::to_string(c.context) +
         ", d=" + std::to_string(c.embed) + ", h=" + std::to_string(c.hidden) + ")";
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
  const auto& c = params.config;
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  for (const auto dim : {c.vocab_size, c.context, c.embed, c.hidden}) {
    put_u32(out, static_cast<std::uint32_t>(dim));
  }
  const std::size_t payload_begin = out.size();
  for (const auto& a : params.arrays()) {
    for (const float v : a) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  const auto crc = crc_of(std::span<const std::uint8_t>(out).subspan(payload_begin));
  put_u32(out, crc);
  return out;
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() ||
      !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw CorruptHeaderError("checkpoint: bad magic bytes");
  }
  if (bytes.size() < kHeaderBytes) throw TruncatedPayloadError("checkpoint: truncated header");

  ModelConfig cfg;
  cfg.vocab_size = get_u32(bytes, 4);
  cfg.context = get_u32(bytes, 8);
  cfg.embed = get_u32(bytes, 12);
  cfg.hidden = get_u32(bytes, 16);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw CorruptHeaderError(std::string("checkpoint: invalid header dimensions: ") + e.what());
  }
  // Dimensions this large cannot come from a real model; guard the size math.
  if (cfg.parameter_count() > (std::size_t{1} << 32)) {
    throw CorruptHeaderError("checkpoint: implausible header dimensions " + describe(cfg));
  }

  const std::size_t payload_bytes = cfg.parameter_count() * 4;
  const std::size_t expected = kHeaderBytes + payload_bytes + 4;
  if (bytes.size() < expected) {
    throw TruncatedPayloadError("checkpoint: truncated payload: expected " +
                                std::to_string(expected) + " bytes, got " +
                                std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw ChecksumMismatchError("checkpoint: trailing bytes after checksum");
  }
  const auto payload = bytes.subspan(kHeaderBytes, payload_bytes);
  if (crc_of(payload) != get_u32(bytes, kHeaderBytes + payload_bytes)) {
    throw ChecksumMismatchError("checkpoint: payload CRC mismatch");
  }

  ModelParams params(cfg);
  std::size_t at = kHeaderBytes;
  for (auto a : params.arrays()) {
    for (auto& v : a) {
      v = std::bit_cast<float>(get_u32(bytes, at));
      at += 4;
    }
  }
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open: " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open: " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  if (bytes.size() >= kHeaderBytes &&
      std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    ModelConfig header;
    header.vocab_size = get_u32(bytes, 4);
    header.context = get_u32(bytes, 8);
    header.embed = get_u32(bytes, 12);
    header.hidden = get_u32(bytes, 16);
    if (!(header == expected)) {
      throw DimensionMismatchError("checkpoint: dimensions " + describe(header) +
                                   " do not match expected " + describe(expected));
    }
  }
  return decode_checkpoint(bytes);
}

}  // namespace ctlab::nanolm
