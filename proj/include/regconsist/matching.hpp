#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "regconsist/camera.hpp"
#include "regconsist/frame.hpp"
#include "regconsist/regions.hpp"

namespace regconsist::matching {

// Cantor pairing pi(k1, k2) = (k1 + k2)(k1 + k2 + 1) / 2 + k2.
// Throws InvalidArgument (naming both inputs) if the result exceeds 64 bits.
std::uint64_t cantor_pair(std::uint64_t k1, std::uint64_t k2);
std::pair<std::uint64_t, std::uint64_t> cantor_unpair(std::uint64_t n);

// Sentinel for warped pixels that received no label. Never paired.
inline constexpr std::int32_t kHole = -1;

// I1 region labels transported into I2's pixel grid.
struct WarpedMap {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> labels;  // kHole where nothing projects

  std::int32_t at(int row, int col) const { return labels[static_cast<std::size_t>(row) * width + col]; }
};

// Each valid-depth pixel of I1 is projected into I2, rounded to the nearest
// pixel and kept if it passes the occlusion test against I2's depth. When
// several land on one pixel the one nearest to camera 2 wins.
WarpedMap warp_region_map(const regions::RegionMap& regmap1, const Frame& frame1, const Frame& frame2,
                          const CameraModel& cam, double epsilon_rel);

struct RegionOverlap {
  std::int32_t u = 0;               // label in the warped I1 map
  std::int32_t v = 0;               // label in the I2 map
  std::uint64_t intersection = 0;
  std::uint64_t size_u = 0;         // over the warped map's non-hole support
  std::uint64_t size_v = 0;         // over the full I2 map
  double iou = 0.0;

  std::uint64_t union_size() const { return size_u + size_v - intersection; }
  bool operator==(const RegionOverlap&) const = default;
};

// Entries with intersection > 0 only, sorted by (u, v).
struct RegionIoUTable {
  std::vector<RegionOverlap> entries;
};

// Operation counts of one region_iou_table call.
struct OpCounter {
  std::uint64_t pixel_visits = 0;
  std::uint64_t histogram_updates = 0;
  std::uint64_t entries_emitted = 0;
};

// One pass over the pixels histograms cantor_pair(u, v) of co-located labels,
// then each distinct key becomes one entry. Holes in `warped` are skipped.
RegionIoUTable region_iou_table(const WarpedMap& warped, const regions::RegionMap& regmap2,
                                OpCounter* ops = nullptr);

struct RegionMatch {
  std::int32_t u = 0;
  std::int32_t v = 0;
  double iou = 0.0;

  bool operator==(const RegionMatch&) const = default;
};
using RegionMatchSet = std::vector<RegionMatch>;

inline constexpr double kDefaultTauRegion = 0.5;

// Mutual-best filtering: (u, v) is kept iff v is u's best partner, u is v's
// best partner (ties to the smaller label) and iou >= tau_region.
RegionMatchSet match_regions(const RegionIoUTable& table, double tau_region = kDefaultTauRegion);

// Exact comparison of a.iou against b.iou via cross-multiplication.
int compare_iou(const RegionOverlap& a, const RegionOverlap& b);

// JSONL {"u", "v", "intersection", "iou"} per entry.
void save_iou_table(const RegionIoUTable& table, const std::filesystem::path& path);

}  // namespace regconsist::matching
