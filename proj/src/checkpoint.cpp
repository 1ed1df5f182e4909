// SPDX-License-Identifier: Apache-2.0
#include <limits>

#include "renofeat/io.hpp"

namespace renofeat {

namespace {

constexpr char kMagic[4] = {'R', 'N', 'F', 'C'};

void write_tensor(ByteWriter& w, const NamedTensor& t) {
  if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError(FormatErrorCode::kStructure, "tensor name too long: " + t.name);
  }
  w.u16(static_cast<std::uint16_t>(t.name.size()));
  w.text(t.name);
  w.u8(static_cast<std::uint8_t>(t.value.rank()));
  for (auto d : t.value.shape()) w.u64(d);
  for (float v : t.value.values()) w.f32(v);
}

ParamSet decode_body(std::span<const std::uint8_t> body);

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params) {
  ByteWriter w;
  w.raw({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.backbone.size() + params.head.size()));
  for (const auto& t : params.backbone) write_tensor(w, t);
  for (const auto& t : params.head) write_tensor(w, t);
  w.u32(crc32(w.bytes()));
  return std::move(w.bytes());
}

ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError(FormatErrorCode::kTruncated, "checkpoint shorter than magic");
  if (!std::equal(bytes.begin(), bytes.begin() + 4, reinterpret_cast<const std::uint8_t*>(kMagic))) {
    throw FormatError(FormatErrorCode::kBadMagic, "expected RNFC checkpoint");
  }
  if (bytes.size() < 8) throw FormatError(FormatErrorCode::kTruncated, "checkpoint header");
  ByteReader header(bytes.subspan(4, 4));
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorCode::kVersionMismatch,
                      "checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < 16) throw FormatError(FormatErrorCode::kTruncated, "checkpoint header");
  const auto body = bytes.first(bytes.size() - 4);
  const bool crc_matches = ByteReader(bytes.last(4)).u32() == crc32(body);
  try {
    ParamSet params = decode_body(body);
    if (!crc_matches) throw FormatError(FormatErrorCode::kChecksum, "CRC32 does not match checkpoint contents");
    return params;
  } catch (const FormatError& e) {
    // A flipped byte inside a name or dimension field usually surfaces as a
    // structural inconsistency; the checksum identifies it as corruption.
    if (e.code() == FormatErrorCode::kStructure && !crc_matches) {
      throw FormatError(FormatErrorCode::kChecksum, std::string("CRC32 mismatch (") + e.what() + ")");
    }
    throw;
  }
}

namespace {

ParamSet decode_body(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  r.text(8);
  const std::uint32_t count = r.u32();
  ParamSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.text(r.u16());
    const std::uint8_t rank = r.u8();
    if (rank == 0) throw FormatError(FormatErrorCode::kStructure, "tensor '" + t.name + "' has rank 0");
    Shape shape(rank);
    std::size_t elements = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0 || elements > r.remaining()) {
        throw FormatError(FormatErrorCode::kStructure, "tensor '" + t.name + "' has invalid dims");
      }
      elements *= d;
    }
    if (elements > r.remaining() / 4) {
      throw FormatError(FormatErrorCode::kTruncated, "payload of tensor '" + t.name + "'");
    }
    std::vector<float> values(elements);
    for (auto& v : values) v = r.f32();
    t.value = Tensor(std::move(shape), std::move(values));
    const bool is_head = t.name.rfind("head.", 0) == 0;
    (is_head ? params.head : params.backbone).push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorCode::kStructure,
                      std::to_string(r.remaining()) + " unexpected bytes after the last tensor");
  }
  return params;
}

}  // namespace

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(params));
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

ParamSet load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec) {
  ParamSet params = load_checkpoint(path);
  check_layout(spec, params);
  return params;
}

}  // namespace renofeat
