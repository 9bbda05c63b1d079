#include "regconsist/camera.hpp"

#include <cmath>
#include <string>

#include <Eigen/LU>

#include "regconsist/error.hpp"
#include "regconsist/frame.hpp"

namespace regconsist {

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy)) {
    throw InvalidArgument("camera: focal lengths must be positive");
  }
  if (width < 1 || height < 1) {
    throw InvalidArgument("camera: width and height must be >= 1");
  }
  if (!std::isfinite(cx) || !std::isfinite(cy)) {
    throw InvalidArgument("camera: principal point must be finite");
  }
}

void Pose::validate() const {
  const Eigen::Matrix3d gram = rotation.transpose() * rotation;
  const double ortho_err = (gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!(ortho_err <= kOrthonormalTolerance)) {
    throw InvalidArgument("pose: rotation is not orthonormal (max |R^T R - I| = " +
                          std::to_string(ortho_err) + ")");
  }
  const double det = rotation.determinant();
  if (!(std::abs(det - 1.0) <= kOrthonormalTolerance)) {
    throw InvalidArgument("pose: rotation determinant is " + std::to_string(det) + ", expected +1");
  }
  if (!translation.allFinite()) throw InvalidArgument("pose: translation is not finite");
}

Pose yaw_pose(const Eigen::Vector3d& position, double yaw_radians) {
  const double s = std::sin(yaw_radians);
  const double c = std::cos(yaw_radians);
  Pose pose;
  // Columns are the camera axes expressed in world coordinates.
  pose.rotation.col(0) = Eigen::Vector3d(-c, 0.0, s);   // right
  pose.rotation.col(1) = Eigen::Vector3d(0.0, -1.0, 0.0);  // down
  pose.rotation.col(2) = Eigen::Vector3d(s, 0.0, c);    // forward
  pose.translation = position;
  return pose;
}

bool is_depth_hole(float depth) { return !(depth > 0.0f) || !std::isfinite(depth); }

std::size_t Frame::valid_depth_count() const {
  std::size_t n = 0;
  for (float d : depth.data()) n += is_depth_hole(d) ? 0 : 1;
  return n;
}

}  // namespace regconsist
