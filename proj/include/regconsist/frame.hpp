#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "regconsist/camera.hpp"
#include "regconsist/image.hpp"

namespace regconsist {

// One registered view: color, metric depth, pose, and optional semantic labels.
struct Frame {
  std::string id;
  std::string camera_id;
  RgbImage rgb;        // 3 channels
  DepthImage depth;    // meters, hole = non-positive or non-finite
  std::optional<LabelImage> labels;
  Pose pose;

  int width() const { return rgb.width(); }
  int height() const { return rgb.height(); }
  bool depth_valid(int row, int col) const { return !is_depth_hole(depth.at(row, col)); }
  std::size_t valid_depth_count() const;
};

}  // namespace regconsist
