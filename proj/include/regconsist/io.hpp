#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "regconsist/camera.hpp"
#include "regconsist/frame.hpp"
#include "regconsist/image.hpp"
#include "regconsist/pair_batch.hpp"

namespace regconsist::io {

namespace fs = std::filesystem;

// Raster formats. All multi-byte samples are little-endian.
//   RGB    : binary PPM (P6), maxval 255
//   labels : binary PGM (P5), maxval 65535, 2 bytes per sample, little-endian
//   depth  : 16-byte header {magic "RCDEPTH1", u32 width, u32 height} + f32 samples
void write_ppm(const fs::path& path, const RgbImage& image);
RgbImage read_ppm(const fs::path& path);
void write_pgm16(const fs::path& path, const LabelImage& image);
LabelImage read_pgm16(const fs::path& path);
void write_depth(const fs::path& path, const DepthImage& image);
DepthImage read_depth(const fs::path& path);

inline constexpr char kDepthMagic[8] = {'R', 'C', 'D', 'E', 'P', 'T', 'H', '1'};

struct FrameRecord {
  std::string id;
  std::string rgb_path;    // relative to the manifest directory
  std::string depth_path;
  std::optional<std::string> label_path;
  Pose pose;
  std::string camera_id;

  bool operator==(const FrameRecord&) const = default;
};

struct DatasetManifest {
  static constexpr int kVersion = 1;
  static constexpr const char* kPoseConvention = "camera_to_world";

  fs::path root;  // directory the relative paths resolve against
  std::map<std::string, CameraModel> cameras;
  std::vector<FrameRecord> frames;
  std::string units = "meters";
  std::uint16_t ignore_label = kIgnoreLabel;
  std::vector<std::string> class_names;  // optional, index = label id

  // Throws InvalidArgument on duplicate ids, unknown cameras, or bad poses.
  void validate() const;
  const FrameRecord& frame(const std::string& id) const;
  const CameraModel& camera_for(const std::string& frame_id) const;
  std::vector<std::string> frame_ids() const;
};

void save_manifest(const DatasetManifest& manifest, const fs::path& path);
DatasetManifest load_manifest(const fs::path& path);
// SHA-256 over the canonical JSON form (independent of file formatting).
std::string manifest_hash(const DatasetManifest& manifest);

// Loads and checks one frame. Errors name the offending file:
// IoError (missing/unreadable), FormatError (bad header), DimensionError.
Frame load_frame(const DatasetManifest& manifest, const std::string& id);
// Writes rasters next to the manifest root using the record's relative paths.
void save_frame_files(const DatasetManifest& manifest, const FrameRecord& record,
                      const Frame& frame);

// Pair batches: versioned little-endian binary.
inline constexpr std::uint32_t kPairBatchVersion = 1;
inline constexpr std::uint32_t kPairRecordBytes = 32;
void save_pair_batch(const PairBatch& batch, const fs::path& path);
PairBatch load_pair_batch(const fs::path& path);
std::vector<std::uint8_t> encode_pair_batch(const PairBatch& batch);
PairBatch decode_pair_batch(std::span<const std::uint8_t> bytes);

// Named f32 tensors plus a JSON metadata string; used for model checkpoints.
struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

struct TensorArchive {
  static constexpr std::uint32_t kVersion = 1;
  std::string metadata;
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const;
  bool operator==(const TensorArchive&) const = default;
};

void save_archive(const TensorArchive& archive, const fs::path& path);
TensorArchive load_archive(const fs::path& path);

// Whole-file helpers.
std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes);
std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace regconsist::io
