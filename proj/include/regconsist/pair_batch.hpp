#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "regconsist/image.hpp"

namespace regconsist {

// Axis-aligned crop of a source image resized to out_width x out_height.
// Continuous pixel-center coordinates map affinely:
//   aug = (src + 0.5 - origin) * out / extent - 0.5
struct CropTransform {
  double left = 0.0;
  double top = 0.0;
  double width = 1.0;
  double height = 1.0;
  int out_width = 1;
  int out_height = 1;

  double scale_x() const { return out_width / width; }
  double scale_y() const { return out_height / height; }

  // Source (row, col) -> augmented (row, col), continuous.
  std::pair<double, double> forward(double row, double col) const {
    return {(row + 0.5 - top) * scale_y() - 0.5, (col + 0.5 - left) * scale_x() - 0.5};
  }
  std::pair<double, double> inverse(double row, double col) const {
    return {(row + 0.5) / scale_y() + top - 0.5, (col + 0.5) / scale_x() + left - 0.5};
  }
  // Nearest augmented pixel, or false if it falls outside the output raster.
  bool map_pixel(Pixel src, Pixel& out) const;

  static CropTransform identity(int width, int height) {
    return {0.0, 0.0, static_cast<double>(width), static_cast<double>(height), width, height};
  }

  bool operator==(const CropTransform&) const = default;
};

// One positive pair. p/q are in augmented coordinates; the *_source fields are
// the original frame pixels they were drawn from.
struct PixelPair {
  Pixel p;
  Pixel q;
  Pixel p_source;
  Pixel q_source;

  bool operator==(const PixelPair&) const = default;
};

struct PairBatch {
  std::string id1;
  std::string id2;
  std::string strategy;  // "<sampler>-<matcher>", e.g. "balanced-region"
  std::uint64_t seed = 0;
  std::uint32_t requested = 0;  // |S| asked for; pairs.size() may be smaller
  CropTransform crop1;
  CropTransform crop2;
  std::vector<PixelPair> pairs;

  bool operator==(const PairBatch&) const = default;
};

}  // namespace regconsist
