#include <gtest/gtest.h>

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <random>

#include "regconsist/error.hpp"
#include "regconsist/hash.hpp"
#include "regconsist/io.hpp"
#include "test_util.hpp"

using namespace regconsist;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

io::DatasetManifest one_frame_manifest(const fs::path& root, int w, int h, bool with_labels) {
  io::DatasetManifest m;
  m.root = root;
  m.cameras["cam"] = testutil::small_camera(w, h);
  io::FrameRecord rec;
  rec.id = "f0";
  rec.rgb_path = "frames/f0.ppm";
  rec.depth_path = "frames/f0.depth";
  if (with_labels) rec.label_path = "frames/f0.pgm";
  rec.camera_id = "cam";
  rec.pose.translation = {1.0, 2.0, 3.0};
  m.frames.push_back(rec);
  return m;
}

Frame write_one_frame(const io::DatasetManifest& m, float depth) {
  Frame f = testutil::flat_frame("f0", m.cameras.at("cam").width, m.cameras.at("cam").height, depth);
  if (m.frames[0].label_path) f.labels = LabelImage(f.width(), f.height(), 1, 3);
  io::save_frame_files(m, m.frames[0], f);
  io::save_manifest(m, m.root / "manifest.json");
  return f;
}

PixelPair random_pair(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-5, 2000);
  return {{d(rng), d(rng)}, {d(rng), d(rng)}, {d(rng), d(rng)}, {d(rng), d(rng)}};
}

}  // namespace

TEST(IoFrame, ConstantDepthFrameHasAllPixelsValid) {
  TempDir dir("io");
  auto m = one_frame_manifest(dir.path(), 4, 4, false);
  write_one_frame(m, 2.0f);
  const auto loaded = io::load_manifest(dir / "manifest.json");
  const Frame f = io::load_frame(loaded, "f0");
  EXPECT_EQ(f.valid_depth_count(), 16u);
  EXPECT_EQ(f.depth.at(3, 3), 2.0f);
  EXPECT_EQ(f.pose.translation, Eigen::Vector3d(1.0, 2.0, 3.0));
}

TEST(IoFrame, ZeroDepthIsAHole) {
  TempDir dir("io");
  auto m = one_frame_manifest(dir.path(), 4, 4, false);
  Frame f = testutil::flat_frame("f0", 4, 4, 2.0f);
  f.depth.at(0, 0) = 0.0f;
  f.depth.at(1, 1) = std::nanf("");
  io::save_frame_files(m, m.frames[0], f);
  const Frame g = io::load_frame(m, "f0");
  EXPECT_FALSE(g.depth_valid(0, 0));
  EXPECT_FALSE(g.depth_valid(1, 1));
  EXPECT_TRUE(g.depth_valid(0, 1));
  EXPECT_EQ(g.valid_depth_count(), 14u);
}

TEST(IoFrame, AbsentLabelPathLoadsWithoutLabels) {
  TempDir dir("io");
  auto m = one_frame_manifest(dir.path(), 4, 3, false);
  write_one_frame(m, 1.0f);
  EXPECT_FALSE(io::load_frame(m, "f0").labels.has_value());
}

TEST(IoFrame, LabelsRoundTrip) {
  TempDir dir("io");
  auto m = one_frame_manifest(dir.path(), 5, 3, true);
  const Frame f = write_one_frame(m, 1.0f);
  const Frame g = io::load_frame(io::load_manifest(dir / "manifest.json"), "f0");
  ASSERT_TRUE(g.labels.has_value());
  EXPECT_EQ(*g.labels, *f.labels);
  EXPECT_EQ(g.rgb, f.rgb);
}

TEST(IoFrame, ErrorsAreDistinctAndNameTheFile) {
  TempDir dir("io");
  auto m = one_frame_manifest(dir.path(), 4, 4, false);
  write_one_frame(m, 1.0f);

  fs::remove(dir / "frames/f0.depth");
  try {
    io::load_frame(m, "f0");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("f0.depth"), std::string::npos);
  }

  io::write_text(dir / "frames/f0.depth", "NOTDEPTH0000000000000000");
  try {
    io::load_frame(m, "f0");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("f0.depth"), std::string::npos);
  }

  io::write_depth(dir / "frames/f0.depth", DepthImage(5, 4, 1, 1.0f));
  try {
    io::load_frame(m, "f0");
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("f0.depth"), std::string::npos);
  }
}

TEST(IoRaster, Pgm16GoldenBytesAreLittleEndian) {
  TempDir dir("io");
  LabelImage img(2, 1);
  img.at(0, 0) = 0x0102;
  img.at(0, 1) = 0x0304;
  io::write_pgm16(dir / "a.pgm", img);
  const auto bytes = io::read_bytes(dir / "a.pgm");
  const std::string header = "P5\n2 1\n65535\n";
  ASSERT_EQ(bytes.size(), header.size() + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
  const std::vector<std::uint8_t> samples(bytes.begin() + static_cast<long>(header.size()), bytes.end());
  EXPECT_EQ(samples, (std::vector<std::uint8_t>{0x02, 0x01, 0x04, 0x03}));
  EXPECT_EQ(io::read_pgm16(dir / "a.pgm"), img);
}

TEST(IoRaster, DepthGoldenBytes) {
  TempDir dir("io");
  DepthImage img(1, 2);
  img.at(0, 0) = 1.0f;   // 0x3f800000
  img.at(1, 0) = -2.0f;  // 0xc0000000
  io::write_depth(dir / "d.depth", img);
  const auto bytes = io::read_bytes(dir / "d.depth");
  const std::vector<std::uint8_t> expected{'R', 'C', 'D', 'E', 'P', 'T', 'H', '1', 1, 0, 0, 0, 2, 0, 0, 0,
                                           0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  EXPECT_EQ(bytes, expected);
  EXPECT_EQ(io::read_depth(dir / "d.depth"), img);
}

TEST(IoRaster, PpmRoundTripAndComments) {
  TempDir dir("io");
  const Frame f = testutil::flat_frame("x", 7, 5, 1.0f);
  io::write_ppm(dir / "a.ppm", f.rgb);
  EXPECT_EQ(io::read_ppm(dir / "a.ppm"), f.rgb);

  std::string text = "P6\n# a comment\n1 1\n255\n";
  text += std::string("\x01\x02\x03", 3);
  io::write_text(dir / "b.ppm", text);
  const auto img = io::read_ppm(dir / "b.ppm");
  EXPECT_EQ(img.at(0, 0, 2), 3);

  io::write_text(dir / "c.ppm", "P5\n1 1\n255\n\x01");
  EXPECT_THROW(io::read_ppm(dir / "c.ppm"), FormatError);
}

TEST(IoManifest, RoundTripAndHashIgnoresFormatting) {
  TempDir dir("io");
  auto m = one_frame_manifest(dir.path(), 4, 4, true);
  m.class_names = {"a", "b"};
  m.frames[0].pose = yaw_pose({0.5, 1.0, -0.25}, 0.7);
  io::save_manifest(m, dir / "manifest.json");
  const auto loaded = io::load_manifest(dir / "manifest.json");
  EXPECT_EQ(loaded.frames, m.frames);
  EXPECT_EQ(loaded.cameras, m.cameras);
  EXPECT_EQ(loaded.class_names, m.class_names);
  EXPECT_EQ(io::manifest_hash(loaded), io::manifest_hash(m));

  const auto j = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
  io::write_text(dir / "compact.json", j.dump());
  EXPECT_EQ(io::manifest_hash(io::load_manifest(dir / "compact.json")), io::manifest_hash(m));
}

TEST(IoManifest, ValidationRejectsBadInput) {
  TempDir dir("io");
  auto m = one_frame_manifest(dir.path(), 4, 4, false);
  auto dup = m;
  dup.frames.push_back(dup.frames[0]);
  EXPECT_THROW(dup.validate(), InvalidArgument);
  auto cam = m;
  cam.frames[0].camera_id = "other";
  EXPECT_THROW(cam.validate(), InvalidArgument);
  auto pose = m;
  pose.frames[0].pose.rotation(0, 0) = 2.0;
  EXPECT_THROW(pose.validate(), InvalidArgument);

  io::write_text(dir / "bad.json", "{not json");
  EXPECT_THROW(io::load_manifest(dir / "bad.json"), FormatError);
}

TEST(IoPairBatch, EmptyBatchRoundTrips) {
  PairBatch b;
  b.id1 = "a";
  b.id2 = "b";
  b.strategy = "balanced-region";
  const auto bytes = io::encode_pair_batch(b);
  EXPECT_EQ(io::decode_pair_batch(bytes), b);
}

TEST(IoPairBatch, LargeBatchRoundTripsByteIdentically) {
  TempDir dir("io");
  std::mt19937_64 rng(5);
  PairBatch b;
  b.id1 = "view_a";
  b.id2 = "view_b";
  b.strategy = "random-exact";
  b.seed = 0xdeadbeefcafeULL;
  b.requested = 81920;
  b.crop1 = {1.5, 2.25, 100.0, 80.0, 64, 64};
  b.crop2 = CropTransform::identity(128, 128);
  for (int i = 0; i < 81920; ++i) b.pairs.push_back(random_pair(rng));
  io::save_pair_batch(b, dir / "b.rcpairs");
  const auto bytes = io::read_bytes(dir / "b.rcpairs");
  const PairBatch back = io::load_pair_batch(dir / "b.rcpairs");
  EXPECT_EQ(back, b);
  EXPECT_EQ(io::encode_pair_batch(back), bytes);
}

TEST(IoPairBatch, CorruptedRecordLengthNamesOffset) {
  std::mt19937_64 rng(1);
  PairBatch b;
  b.pairs = {random_pair(rng), random_pair(rng)};
  auto bytes = io::encode_pair_batch(b);
  const std::size_t len_at = bytes.size() - 2 * io::kPairRecordBytes - 4;
  ASSERT_EQ(bytes[len_at], io::kPairRecordBytes);
  bytes[len_at] = 31;
  try {
    io::decode_pair_batch(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset " + std::to_string(len_at + 4)), std::string::npos) << e.what();
  }
  auto truncated = io::encode_pair_batch(b);
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(io::decode_pair_batch(truncated), FormatError);
  auto version = io::encode_pair_batch(b);
  version[8] = 9;
  EXPECT_THROW(io::decode_pair_batch(version), FormatError);
}

TEST(IoArchive, RoundTrip) {
  TempDir dir("io");
  io::TensorArchive a;
  a.metadata = R"({"k": 1})";
  a.tensors.push_back({"w", {2, 3}, {1, 2, 3, 4, 5, -6.5f}});
  a.tensors.push_back({"b", {0}, {}});
  io::save_archive(a, dir / "a.ckpt");
  const auto back = io::load_archive(dir / "a.ckpt");
  EXPECT_EQ(back, a);
  EXPECT_EQ(back.get("w").values[5], -6.5f);
  EXPECT_THROW(back.get("missing"), FormatError);
}

TEST(Hash, KnownSha256) {
  EXPECT_EQ(sha256_hex(std::string_view("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
