#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "regconsist/image.hpp"

namespace regconsist::regions {

// Dense per-pixel region labels 0..count-1, each label used by >= 1 pixel.
struct RegionMap {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> labels;  // row-major
  int count = 0;

  std::int32_t at(int row, int col) const { return labels[static_cast<std::size_t>(row) * width + col]; }
  std::int32_t at(Pixel p) const { return at(p.row, p.col); }

  // Throws InvalidArgument if labels are not dense or the size is wrong.
  void validate() const;
  bool operator==(const RegionMap&) const = default;
};

// How the `sigma` parameter is interpreted before segmentation.
//   kBlur: Gaussian pre-smoothing with standard deviation `sigma` pixels.
//   kRaw : value is carried through unchanged for an external preprocessor;
//          no smoothing is applied here.
enum class SigmaMode { kBlur, kRaw };

struct SegmentParams {
  double scale = 250.0;  // k in the threshold function k / |C|
  double sigma = 0.8;
  SigmaMode mode = SigmaMode::kBlur;
  int min_size = 64;
};

SigmaMode parse_sigma_mode(const std::string& text);
std::string to_string(SigmaMode mode);

// Efficient graph-based segmentation on the 8-connected pixel grid with
// Euclidean RGB edge weights, union-find merging under threshold
// scale / |C|, and a final merge of components smaller than min_size.
// Labels are assigned in scanline order of first occurrence.
RegionMap segment_graph(const RgbImage& rgb, const SegmentParams& params);

// Gaussian smoothing of each channel (border pixels clamped). Exposed for tests.
std::vector<float> smooth_channels(const RgbImage& rgb, double sigma);

// Pixel count per label; sums to width * height.
std::vector<std::size_t> region_sizes(const RegionMap& map);

// Dense relabeling of an arbitrary label raster (one region per distinct value).
RegionMap region_map_from_labels(const LabelImage& labels);
// Dense relabeling of arbitrary integer labels in scanline first-occurrence order.
RegionMap relabel_dense(int width, int height, const std::vector<std::int32_t>& raw);

// 16-bit PGM with the region labels plus a JSON size table {"count", "sizes"}.
void save_region_map(const RegionMap& map, const std::filesystem::path& pgm_path,
                     const std::filesystem::path& sizes_path);
RegionMap load_region_map(const std::filesystem::path& pgm_path);

}  // namespace regconsist::regions
