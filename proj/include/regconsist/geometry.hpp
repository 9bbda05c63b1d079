#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "regconsist/camera.hpp"
#include "regconsist/frame.hpp"
#include "regconsist/image.hpp"

namespace regconsist::io {
struct DatasetManifest;
}

namespace regconsist::geometry {

// Continuous image-2 coordinate of a reprojected pixel plus its camera-2 depth.
struct Projection {
  double row = 0.0;
  double col = 0.0;
  double depth = 0.0;
};

struct Correspondence {
  Pixel p;  // in I1
  Pixel q;  // in I2
  float depth_at_p = 0.0f;

  bool operator==(const Correspondence&) const = default;
};

struct ViewPair {
  std::string id1;
  std::string id2;
  double iou = 0.0;

  bool operator==(const ViewPair&) const = default;
};

inline constexpr double kDefaultEpsilonRel = 0.01;
inline constexpr double kDefaultIouLow = 0.3;
inline constexpr double kDefaultIouHigh = 0.9;

// Back-projects `pixel` (continuous row/col) at `depth` through camera 1 and
// projects it into camera 2. Returns nullopt when the point is not in front of
// camera 2 (depth2 <= 0). No rounding and no bounds check on the output.
std::optional<Projection> project_pixel(const CameraModel& cam, const Pose& pose1, const Pose& pose2,
                                        double row, double col, double depth);

// project_pixel with the relative transform precomputed for one frame pair.
class Reprojector {
 public:
  Reprojector(const CameraModel& cam, const Pose& pose1, const Pose& pose2);
  std::optional<Projection> operator()(double row, double col, double depth) const;

 private:
  CameraModel cam_;
  Eigen::Matrix3d rotation_;
  Eigen::Vector3d translation_;
};

// Nearest pixel of a projection, if inside a width x height raster.
std::optional<Pixel> round_to_pixel(const Projection& proj, int width, int height);

// Relative z-buffer test used everywhere an occlusion decision is made.
inline bool passes_occlusion_test(double projected_depth, double observed_depth, double epsilon_rel) {
  return std::abs(projected_depth - observed_depth) <= epsilon_rel * observed_depth;
}

// Exact correspondence set S_t from frame1 into frame2.
std::vector<Correspondence> compute_correspondences(const Frame& frame1, const Frame& frame2,
                                                    const CameraModel& cam,
                                                    double epsilon_rel = kDefaultEpsilonRel);

// Dense form of S_t: for each I1 pixel index (row * width + col), the linear
// index of its correspondent in I2, or -1. `stride` > 1 evaluates only every
// stride-th row and column of I1 (other entries are -1).
std::vector<std::int32_t> correspondence_index(const Frame& frame1, const Frame& frame2,
                                               const CameraModel& cam, double epsilon_rel,
                                               int stride = 1);

struct OverlapCounts {
  std::size_t covered12 = 0;  // |C12|
  std::size_t covered21 = 0;  // |C21|
  std::size_t valid1 = 0;
  std::size_t valid2 = 0;
};

// Symmetric covered fraction (|C12| + |C21|) / (|valid(I1)| + |valid(I2)|).
// `stride` = 4 gives the opt-in reduced-resolution estimate.
double view_overlap_iou(const Frame& frame1, const Frame& frame2, const CameraModel& cam,
                        double epsilon_rel = kDefaultEpsilonRel, int stride = 1);
OverlapCounts overlap_counts(const Frame& frame1, const Frame& frame2, const CameraModel& cam,
                             double epsilon_rel, int stride = 1);

struct PairSelectionOptions {
  double iou_low = kDefaultIouLow;
  double iou_high = kDefaultIouHigh;
  double epsilon_rel = kDefaultEpsilonRel;
  int stride = 1;
  int jobs = 1;
  // When set, selections are cached here keyed by (manifest hash, band, epsilon, stride).
  std::optional<std::filesystem::path> cache_dir;
};

// All unordered frame pairs with IoU in [iou_low, iou_high], ordered by
// (index of id1, index of id2) in frame order. All frames must share `cam`.
std::vector<ViewPair> select_view_pairs(const std::vector<Frame>& frames, const CameraModel& cam,
                                        const PairSelectionOptions& options);
// Manifest-driven variant; loads frames and honors the cache.
std::vector<ViewPair> select_view_pairs(const io::DatasetManifest& manifest,
                                        const PairSelectionOptions& options);

std::string view_pair_cache_key(const std::string& manifest_hash, const PairSelectionOptions& options);

// JSONL records {"id1": ..., "id2": ..., "iou": ...}.
void save_view_pairs(const std::vector<ViewPair>& pairs, const std::filesystem::path& path);
std::vector<ViewPair> load_view_pairs(const std::filesystem::path& path);

}  // namespace regconsist::geometry
