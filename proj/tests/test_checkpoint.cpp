#include <gtest/gtest.h>

#include <cstring>

#include "bonecheck/checkpoint.hpp"
#include "bonecheck/zoo.hpp"
#include "support.hpp"

using namespace bonecheck;
using testing_support::random_tensor;
using testing_support::TempDir;

namespace {

Model<float> sample_model(const std::string& arch = "micro_cell", std::uint64_t seed = 3) {
  ArchConfig cfg;
  cfg.arch = arch;
  cfg.input_size = {1, 16, 16};
  cfg.stem_width = 4;
  cfg.seed = seed;
  return build_model<float>(cfg);
}

std::uint64_t header_length(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(bytes[12 + i]) << (8 * i);
  return n;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExactForEveryArchitecture) {
  Rng r(1);
  const auto x = random_tensor<float>({2, 1, 16, 16}, r, 0, 1);
  for (const auto arch : kArchitectures) {
    const auto m = sample_model(std::string(arch));
    const auto bytes = encode_checkpoint(m);
    const auto back = decode_checkpoint(bytes);
    EXPECT_EQ(back.params(), m.params()) << arch;
    EXPECT_EQ(back.graph().arch(), m.graph().arch());
    EXPECT_EQ(back.graph().layers().size(), m.graph().layers().size());
    EXPECT_EQ(predict(back, x), predict(m, x));
    EXPECT_EQ(encode_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, EnsembleRoundTrip) {
  std::vector<Model<float>> members{sample_model("micro_dense"), sample_model("micro_mobile")};
  const auto ens = build_ensemble(members, "pair");
  const auto back = decode_checkpoint(encode_checkpoint(ens));
  EXPECT_EQ(back.graph().kind(), ModelKind::ensemble);
  EXPECT_EQ(back.graph().members().size(), 2u);
  EXPECT_EQ(back.params(), ens.params());
}

TEST(Checkpoint, LayoutHasMagicVersionAndLittleEndianBlob) {
  const auto m = sample_model();
  const auto bytes = encode_checkpoint(m);
  ASSERT_GT(bytes.size(), 20u);
  EXPECT_EQ(std::memcmp(bytes.data(), "BONECKPT", 8), 0);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9] | bytes[10] | bytes[11], 0);
  const auto h = header_length(bytes);
  const auto header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<long>(h));
  EXPECT_EQ(header.at("version"), 1);
  std::size_t total = 0;
  for (const auto& p : m.params()) total += p.size();
  EXPECT_EQ(bytes.size() - 20 - h, 4 * total);
  // first float of the blob, decoded by hand
  const std::uint8_t* blob = bytes.data() + 20 + h;
  const std::uint32_t bits = blob[0] | (blob[1] << 8) | (blob[2] << 16) | (static_cast<std::uint32_t>(blob[3]) << 24);
  float first;
  std::memcpy(&first, &bits, 4);
  EXPECT_EQ(first, m.params()[0][0]);
}

TEST(Checkpoint, TruncationIsAFormatError) {
  const auto bytes = encode_checkpoint(sample_model());
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{19}, std::size_t{40}, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(decode_checkpoint(part), FormatError) << cut;
  }
}

TEST(Checkpoint, VersionMismatchIsNamed) {
  auto bytes = encode_checkpoint(sample_model());
  bytes[8] = 2;
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Checkpoint, BadMagicAndCorruptHeader) {
  auto bytes = encode_checkpoint(sample_model());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  auto corrupt = bytes;
  corrupt[21] = '!';
  EXPECT_THROW(decode_checkpoint(corrupt), FormatError);
}

TEST(Checkpoint, ExtraBlobBytesAreRejected) {
  auto bytes = encode_checkpoint(sample_model());
  bytes.push_back(0);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, MissingFileIsAFormatError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/model.ckpt"), FormatError);
}

TEST(Checkpoint, SaveLoadThroughFiles) {
  TempDir dir;
  const auto m = sample_model("micro_xception");
  save_checkpoint(m, dir / "m.ckpt");
  EXPECT_EQ(load_checkpoint(dir / "m.ckpt").params(), m.params());
}

TEST(Checkpoint, LoadIntoMismatchedArchitectureIsAShapeError) {
  TempDir dir;
  save_checkpoint(sample_model("micro_dense"), dir / "dense.ckpt");
  Model<float> target = sample_model("micro_mobile");
  EXPECT_THROW(load_parameters_into(target, dir / "dense.ckpt"), ShapeError);
  Model<float> same = sample_model("micro_dense", 99);
  load_parameters_into(same, dir / "dense.ckpt");
  EXPECT_EQ(same.params(), sample_model("micro_dense").params());
}
