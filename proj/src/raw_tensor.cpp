// SPDX-License-Identifier: Apache-2.0
#include "renofeat/io.hpp"

namespace renofeat {

namespace {
constexpr char kMagic[4] = {'R', 'T', 'E', 'N'};
}

std::vector<std::uint8_t> encode_raw_tensor(const Tensor& sample) {
  if (sample.rank() != 3) throw ShapeError("raw tensor samples must be [C,H,W]");
  ByteWriter w;
  w.raw({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
  w.u32(kRawTensorVersion);
  w.u8(3);
  for (auto d : sample.shape()) w.u64(d);
  for (float v : sample.values()) w.f32(v);
  return std::move(w.bytes());
}

Tensor decode_raw_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const std::string magic = r.text(4);
  if (magic != std::string(kMagic, 4)) throw FormatError(FormatErrorCode::kBadMagic, "expected RTEN sample");
  const std::uint32_t version = r.u32();
  if (version != kRawTensorVersion) {
    throw FormatError(FormatErrorCode::kVersionMismatch, "RTEN version " + std::to_string(version));
  }
  const std::uint8_t rank = r.u8();
  if (rank != 3) {
    throw FormatError(FormatErrorCode::kStructure, "RTEN rank " + std::to_string(rank) + ", expected 3");
  }
  Shape shape(3);
  for (auto& d : shape) {
    d = r.u64();
    if (d == 0 || d > r.remaining()) throw FormatError(FormatErrorCode::kStructure, "invalid RTEN dims");
  }
  const std::size_t elements = element_count(shape);
  if (elements > r.remaining() / 4) throw FormatError(FormatErrorCode::kTruncated, "RTEN payload");
  std::vector<float> values(elements);
  for (auto& v : values) v = r.f32();
  if (r.remaining() != 0) throw FormatError(FormatErrorCode::kStructure, "trailing bytes after RTEN payload");
  return Tensor(std::move(shape), std::move(values));
}

void save_raw_tensor(const Tensor& sample, const std::filesystem::path& path) {
  write_file(path, encode_raw_tensor(sample));
}

Tensor load_raw_tensor(const std::filesystem::path& path) { return decode_raw_tensor(read_file(path)); }

}  // namespace renofeat
