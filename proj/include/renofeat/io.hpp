// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary containers: "RNFC" checkpoints and "RTEN" raw-tensor
// sample files.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "renofeat/model.hpp"
#include "renofeat/tensor.hpp"

namespace renofeat {

enum class FormatErrorCode {
  kIo,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kChecksum,
  kStructure,
};

const char* to_string(FormatErrorCode code);

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}
  FormatErrorCode code() const noexcept { return code_; }

 private:
  FormatErrorCode code_;
};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void raw(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  void text(const std::string& s) {
    raw({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
  std::vector<std::uint8_t>& bytes() noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked reader; running past the end throws FormatError(kTruncated).
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string text(std::size_t length);
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32(std::span<const std::uint8_t> data);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);

// Checkpoint: "RNFC", u32 version=1, u32 tensor count; per tensor u16 name
// length, name, u8 rank, u64 dims, f32 payload; trailing u32 CRC32.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params);
ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);
/// Loads and checks the tensors against the spec (ShapeError names the first offender).
ParamSet load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec);

// Raw sample: "RTEN", u32 version=1, u8 rank=3, u64 C, H, W, f32 payload.
inline constexpr std::uint32_t kRawTensorVersion = 1;

std::vector<std::uint8_t> encode_raw_tensor(const Tensor& sample);
Tensor decode_raw_tensor(std::span<const std::uint8_t> bytes);
void save_raw_tensor(const Tensor& sample, const std::filesystem::path& path);
Tensor load_raw_tensor(const std::filesystem::path& path);

}  // namespace renofeat
