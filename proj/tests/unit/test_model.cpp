// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "../oracle.hpp"
#include "renofeat/io.hpp"
#include "renofeat/model.hpp"

using namespace renofeat;

namespace {

ModelSpec two_stage(std::uint64_t seed) {
  ModelSpec spec;
  spec.stages = {{1, 4}, {2, 6}};
  spec.height = spec.width = 8;
  spec.num_classes = 5;
  spec.seed = seed;
  return spec;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "renofeat_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("spec validation") {
  ModelSpec spec = two_stage(0);
  CHECK_NOTHROW(spec.validate());
  ModelSpec one = spec;
  one.stages = {{1, 4}};
  CHECK_THROWS_AS(one.validate(), std::invalid_argument);
  ModelSpec tiny = spec;
  tiny.height = tiny.width = 2;  // second pool would see a 1x1 map
  CHECK_THROWS_AS(tiny.validate(), std::invalid_argument);
  ModelSpec unary = spec;
  unary.num_classes = 1;
  CHECK_THROWS_AS(unary.validate(), std::invalid_argument);
  CHECK_NOTHROW(ModelSpec::desk_default(6, 1).validate());
  CHECK(ModelSpec::desk_default(6, 1).stages == std::vector<StageSpec>{{2, 16}, {2, 32}, {2, 64}});
}

TEST_CASE("parameter count of a single (1,4) stage on 3x8x8 with 5 classes") {
  ModelSpec spec;
  spec.stages = {{1, 4}};
  spec.num_classes = 5;
  std::size_t conv = 0, head = 0;
  for (const auto& entry : param_layout(spec)) (entry.head ? head : conv) += element_count(entry.shape);
  CHECK(conv == 112);
  CHECK(head == 25);
}

TEST_CASE("build_model is deterministic and seeds matter") {
  CHECK(build_model(two_stage(3)) == build_model(two_stage(3)));
  CHECK_FALSE(build_model(two_stage(3)) == build_model(two_stage(4)));
  const ParamSet p = build_model(two_stage(3));
  CHECK(p.backbone.size() == 6);
  CHECK(p.head.size() == 2);
  CHECK(p.head[0].value.shape() == Shape{6, 5});
  for (const auto& t : p.backbone) {
    if (t.value.rank() == 1) {
      for (float v : t.value.values()) CHECK(v == 0.0f);
    }
  }
}

TEST_CASE("He initialisation: empirical std of 10,000 weights with fan-in 27") {
  ModelSpec spec;
  spec.stages = {{1, 400}, {1, 2}};  // first conv: 400 * 3 * 3 * 3 = 10,800 weights, fan-in 27
  spec.seed = 17;
  const ParamSet p = build_model(spec);
  const Tensor& w = p.backbone[0].value;
  double sum = 0.0, sq = 0.0;
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i) {
    sum += w[i];
    sq += double(w[i]) * w[i];
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(sd - std::sqrt(2.0 / 27.0)) <= 0.1 * std::sqrt(2.0 / 27.0));
}

TEST_CASE("forward: zero input gives zero features and head-bias logits") {
  const ModelSpec spec = two_stage(5);
  ParamSet p = build_model(spec);
  p.head[1].value = Tensor({5}, std::vector<float>{1, -2, 3, 0.5f, 0});
  const ForwardOutput out = forward(spec, p, Tensor({2, 3, 8, 8}));
  REQUIRE(out.stage_features.size() == 2);
  for (const auto& f : out.stage_features) {
    for (float v : f.values()) CHECK(v == 0.0f);
  }
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t c = 0; c < 5; ++c) CHECK(out.logits[n * 5 + c] == p.head[1].value[c]);
  }
}

TEST_CASE("forward: determinism, penultimate width and agreement with the oracle") {
  const ModelSpec spec = two_stage(6);
  const ParamSet p = build_model(spec);
  const Tensor x = oracle::random_tensor({3, 3, 8, 8}, 61, 0.0, 1.0);
  const ForwardOutput a = forward(spec, p, x);
  const ForwardOutput b = forward(spec, p, x);
  CHECK(a.logits == b.logits);
  CHECK(a.penultimate == b.penultimate);
  CHECK(a.penultimate.shape() == Shape{3, spec.stages.back().width});
  CHECK(a.stage_features[0].shape() == Shape{3, 4, 8, 8});
  CHECK(a.stage_features[1].shape() == Shape{3, 6, 4, 4});

  const oracle::Forward ref = oracle::staged(spec, oracle::to_d(p.backbone), oracle::to_d(p.head), oracle::D(x));
  for (std::size_t i = 0; i < ref.logits.v.size(); ++i) {
    CHECK(a.logits[i] == doctest::Approx(ref.logits.v[i]).epsilon(1e-5));
  }
}

TEST_CASE("forward rejects wrong shapes and out-of-range pixels") {
  const ModelSpec spec = two_stage(7);
  const ParamSet p = build_model(spec);
  CHECK_THROWS_AS(forward(spec, p, Tensor({1, 3, 6, 6})), ShapeError);
  CHECK_THROWS_AS(forward(spec, p, Tensor({1, 3, 8, 8}, 1.5f)), std::domain_error);
}

TEST_CASE("check_layout names the offending tensor") {
  const ModelSpec spec = two_stage(8);
  ParamSet p = build_model(spec);
  CHECK_NOTHROW(check_layout(spec, p));
  ParamSet wrong = p;
  wrong.backbone[2].value = Tensor({6, 3, 3, 3});
  CHECK_THROWS_WITH_AS(check_layout(spec, wrong), doctest::Contains("stage1.conv0.weight"), ShapeError);
  ParamSet missing = p;
  missing.backbone.erase(missing.backbone.begin() + 3);
  CHECK_THROWS_WITH_AS(check_layout(spec, missing), doctest::Contains("stage1.conv0.bias"), ShapeError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const ParamSet p = build_model(two_stage(9));
  const auto path = scratch("roundtrip.rnfc");
  save_checkpoint(p, path);
  CHECK(load_checkpoint(path) == p);
  CHECK(load_checkpoint(path, two_stage(9)) == p);
  CHECK(decode_checkpoint(encode_checkpoint(p)) == p);
}

TEST_CASE("checkpoint error codes") {
  const ParamSet p = build_model(two_stage(10));
  const std::vector<std::uint8_t> good = encode_checkpoint(p);
  auto code_of = [](const std::vector<std::uint8_t>& bytes) {
    try {
      decode_checkpoint(bytes);
    } catch (const FormatError& e) {
      return e.code();
    }
    FAIL("decode unexpectedly succeeded");
    return FormatErrorCode::kIo;
  };
  SUBCASE("corrupting one payload byte fails the checksum") {
    auto bytes = good;
    bytes[bytes.size() - 6] ^= 0x40;
    CHECK(code_of(bytes) == FormatErrorCode::kChecksum);
  }
  SUBCASE("corruption of any single byte past the header is reported") {
    for (std::size_t i = 12; i < good.size(); i += 7) {
      auto bytes = good;
      bytes[i] ^= 0x10;
      const auto code = code_of(bytes);
      CHECK((code == FormatErrorCode::kChecksum || code == FormatErrorCode::kTruncated));
    }
  }
  SUBCASE("bad magic") {
    auto bytes = good;
    bytes[0] = 'X';
    CHECK(code_of(bytes) == FormatErrorCode::kBadMagic);
  }
  SUBCASE("version mismatch") {
    auto bytes = good;
    bytes[4] = 2;
    CHECK(code_of(bytes) == FormatErrorCode::kVersionMismatch);
  }
  SUBCASE("truncated payload") {
    auto bytes = good;
    bytes.resize(bytes.size() - 41);
    const auto code = code_of(bytes);
    CHECK((code == FormatErrorCode::kTruncated || code == FormatErrorCode::kChecksum));
  }
  SUBCASE("truncated header") {
    CHECK(code_of({'R', 'N', 'F', 'C', 1, 0}) == FormatErrorCode::kTruncated);
  }
  SUBCASE("a missing tensor is a structure error naming it") {
    ParamSet partial = p;
    partial.backbone.erase(partial.backbone.begin() + 1);
    const auto path = scratch("partial.rnfc");
    save_checkpoint(partial, path);
    CHECK_THROWS_WITH_AS(load_checkpoint(path, two_stage(10)), doctest::Contains("stage0.conv0.bias"), ShapeError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(scratch("does-not-exist.rnfc")), FormatError);
  }
}

TEST_CASE("checkpoint layout is the documented little-endian container") {
  ParamSet p;
  p.backbone.push_back({"a", Tensor({2}, std::vector<float>{1.0f, -2.0f})});
  const auto bytes = encode_checkpoint(p);
  // magic 4 + version 4 + count 4 + name len 2 + name 1 + rank 1 + dim 8 + payload 8 + crc 4
  REQUIRE(bytes.size() == 36);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RNFC");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 1);
  CHECK(bytes[12] == 1);
  CHECK(bytes[14] == 'a');
  CHECK(bytes[15] == 1);
  CHECK(bytes[16] == 2);
  const std::uint32_t crc = crc32({bytes.data(), bytes.size() - 4});
  CHECK(bytes[32] == (crc & 0xff));
  CHECK(bytes[35] == (crc >> 24));
}

}  // TEST_SUITE
