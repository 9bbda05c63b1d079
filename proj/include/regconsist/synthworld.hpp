#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "regconsist/camera.hpp"
#include "regconsist/frame.hpp"
#include "regconsist/image.hpp"

namespace regconsist::synthworld {

// World frame: x and z span the floor, y points up. All lengths in meters.

enum ClassId : std::uint16_t {
  kWall = 0,
  kFloor = 1,
  kCeiling = 2,
  kCabinet = 3,
  kTable = 4,
  kSofa = 5,
  kBed = 6,
  kPlant = 7,
  kTv = 8,
  kPicture = 9,
};
inline constexpr int kNumClasses = 10;
const std::vector<std::string>& class_names();

struct Box {
  Eigen::Vector3d min = Eigen::Vector3d::Zero();
  Eigen::Vector3d max = Eigen::Vector3d::Ones();
  std::uint16_t label = 0;
  Eigen::Vector3d albedo = Eigen::Vector3d::Constant(0.5);
  double checker_size = 0.25;     // meters per checker square
  double checker_contrast = 0.1;  // darkening of odd squares

  bool contains(const Eigen::Vector3d& p) const {
    return (p.array() > min.array()).all() && (p.array() < max.array()).all();
  }
  bool operator==(const Box&) const = default;
};

struct Scene {
  Box shell;  // room interior; its faces carry wall/floor/ceiling
  std::vector<Box> objects;
  Eigen::Vector3d light_dir = Eigen::Vector3d(0.3, -1.0, 0.5).normalized();  // direction light travels
  std::uint64_t seed = 0;

  bool operator==(const Scene&) const = default;
};

struct RoomExtent {
  double x = 6.0;  // along world x
  double z = 4.0;  // along world z
  double y = 2.5;  // ceiling height
};

// Deterministic procedural room with n_objects boxes (furniture on the floor,
// thin panels on the walls). Throws InvalidArgument if n_objects < 1 or the
// room is too small to place them.
Scene generate_scene(std::uint64_t seed, int n_objects, RoomExtent extent = {});

std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);

struct Hit {
  double t = 0.0;  // ray parameter; equals camera depth when dir has unit camera-z
  std::uint16_t label = 0;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  const Box* box = nullptr;
};

// First surface hit by origin + t * dir, t > 0. The origin must be inside the
// shell, so a hit always exists.
Hit cast_ray(const Scene& scene, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir);

// Ray through continuous pixel (row, col); world direction with unit camera-z.
Eigen::Vector3d pixel_ray(const CameraModel& cam, const Pose& pose, double row, double col);

bool inside_shell(const Scene& scene, const Eigen::Vector3d& p);

// Renders RGB, exact depth (z in camera frame) and class labels. Throws
// InvalidArgument if the pose is outside the shell.
Frame render_view(const Scene& scene, const CameraModel& cam, const Pose& pose, const std::string& id = {});

// Ground-truth visibility: true iff world point `x` projects into the image
// of (cam, pose) and the first surface along the ray from the camera center
// is at x (relative tolerance `rel_tol` on the ray parameter).
bool point_visible(const Scene& scene, const CameraModel& cam, const Pose& pose,
                   const Eigen::Vector3d& x, double rel_tol = 1e-5);

struct GridViewOptions {
  double height = 1.4;     // camera height above the floor
  double grid_step = 1.0;  // meters between grid intersections
  double yaw_step = 45.0;  // degrees, must divide 360
};

// Poses at interior grid intersections (x, z strictly inside the shell and
// outside every object), 360 / yaw_step yaws per intersection, all at the
// same height. Ordered by x, then z, then yaw.
std::vector<Pose> sample_grid_views(const Scene& scene, const GridViewOptions& options);

// Many-to-one label mapping; dropped and unmapped labels become kIgnoreLabel.
class LabelRemap {
 public:
  LabelRemap() = default;
  // Throws InvalidArgument if a source label is both mapped and dropped.
  LabelRemap(std::map<std::uint16_t, std::uint16_t> mapping, std::set<std::uint16_t> dropped = {});

  const std::map<std::uint16_t, std::uint16_t>& mapping() const { return mapping_; }
  const std::set<std::uint16_t>& dropped() const { return dropped_; }
  std::uint16_t apply(std::uint16_t label) const;

 private:
  std::map<std::uint16_t, std::uint16_t> mapping_;
  std::set<std::uint16_t> dropped_;
};

LabelImage remap_labels(const LabelImage& labels, const LabelRemap& remap);

struct WorldOptions {
  std::uint64_t seed = 7;
  int n_objects = 8;
  RoomExtent extent;
  std::optional<double> camera_height;  // drawn from the seed when unset
  double grid_step = 1.0;
  double yaw_step = 45.0;
  CameraModel camera;
};

struct GeneratedWorld {
  Scene scene;
  std::vector<Pose> poses;
  double camera_height = 0.0;
};

// Scene + grid poses for a world configuration.
GeneratedWorld build_world(const WorldOptions& options);

// Renders every pose and writes a dataset manifest (manifest.json, frames/*)
// under `out_dir`. Returns the manifest path.
std::filesystem::path write_world(const WorldOptions& options, const std::filesystem::path& out_dir,
                                  int jobs = 1);

}  // namespace regconsist::synthworld
