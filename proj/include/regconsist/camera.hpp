#pragma once

#include <Eigen/Core>

namespace regconsist {

// Pinhole intrinsics. Pixel (row, col) has continuous coordinate (v = row, u = col).
struct CameraModel {
  double fx = 64.0;
  double fy = 64.0;
  double cx = 64.0;
  double cy = 64.0;
  int width = 128;
  int height = 128;

  // Throws InvalidArgument unless fx, fy > 0 and width, height >= 1.
  void validate() const;

  bool operator==(const CameraModel&) const = default;
};

// Rigid transform mapping camera coordinates to world coordinates:
//   X_world = rotation * X_camera + translation.
// Camera axes: x right, y down, z forward (optical axis).
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static constexpr double kOrthonormalTolerance = 1e-6;

  // Throws InvalidArgument unless rotation is orthonormal with det +1.
  void validate() const;

  Eigen::Vector3d camera_to_world(const Eigen::Vector3d& x) const {
    return rotation * x + translation;
  }
  Eigen::Vector3d world_to_camera(const Eigen::Vector3d& x) const {
    return rotation.transpose() * (x - translation);
  }

  bool operator==(const Pose& other) const {
    return rotation == other.rotation && translation == other.translation;
  }
};

// Pose looking horizontally along yaw (radians, about the world +y axis, which
// points up), positioned at `position`. Yaw 0 looks along world +z.
Pose yaw_pose(const Eigen::Vector3d& position, double yaw_radians);

}  // namespace regconsist
