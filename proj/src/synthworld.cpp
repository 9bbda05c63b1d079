#include "regconsist/synthworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include <json.hpp>

#include "regconsist/error.hpp"
#include "regconsist/io.hpp"
#include "regconsist/parallel.hpp"

namespace regconsist::synthworld {

using Eigen::Vector3d;
using nlohmann::json;

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = {"wall", "floor", "ceiling", "cabinet", "table",
                                                 "sofa", "bed",   "plant",   "tv",      "picture"};
  return names;
}

namespace {

struct ClassStyle {
  Vector3d albedo;
  double checker_size;
  double checker_contrast;
};

ClassStyle style_for(std::uint16_t label) {
  switch (label) {
    case kWall: return {{0.78, 0.76, 0.70}, 0.6, 0.08};
    case kFloor: return {{0.55, 0.38, 0.24}, 0.4, 0.20};
    case kCeiling: return {{0.92, 0.92, 0.92}, 1.0, 0.04};
    case kCabinet: return {{0.62, 0.42, 0.22}, 0.25, 0.15};
    case kTable: return {{0.40, 0.26, 0.14}, 0.20, 0.10};
    case kSofa: return {{0.22, 0.32, 0.62}, 0.15, 0.20};
    case kBed: return {{0.78, 0.30, 0.30}, 0.30, 0.15};
    case kPlant: return {{0.18, 0.55, 0.20}, 0.08, 0.30};
    case kTv: return {{0.08, 0.08, 0.10}, 0.50, 0.05};
    case kPicture: return {{0.85, 0.70, 0.25}, 0.10, 0.35};
    default: return {{0.5, 0.5, 0.5}, 0.25, 0.1};
  }
}

// Footprint (x/z) and height ranges for floor furniture.
struct FurnitureShape {
  double min_a, max_a, min_b, max_b, min_h, max_h;
};

FurnitureShape furniture_shape(std::uint16_t label) {
  switch (label) {
    case kCabinet: return {0.4, 0.9, 0.35, 0.6, 0.8, 1.3};
    case kTable: return {0.6, 1.2, 0.6, 1.0, 0.70, 0.80};
    case kSofa: return {1.0, 1.8, 0.7, 0.9, 0.45, 0.8};
    case kBed: return {1.4, 1.8, 1.8, 2.1, 0.4, 0.6};
    case kPlant: return {0.3, 0.5, 0.3, 0.5, 0.6, 1.2};
    default: return {0.3, 0.6, 0.3, 0.6, 0.3, 0.6};
  }
}

bool boxes_overlap(const Box& a, const Box& b, double margin) {
  for (int k = 0; k < 3; ++k) {
    if (a.max[k] + margin <= b.min[k] || b.max[k] + margin <= a.min[k]) return false;
  }
  return true;
}

constexpr std::array<std::uint16_t, 7> kObjectClasses = {kCabinet, kTable, kSofa, kBed,
                                                         kPlant,   kTv,    kPicture};

Box styled_box(std::uint16_t label, std::mt19937_64& rng) {
  const ClassStyle s = style_for(label);
  std::uniform_real_distribution<double> jitter(-0.06, 0.06);
  Box b;
  b.label = label;
  for (int k = 0; k < 3; ++k) b.albedo[k] = std::clamp(s.albedo[k] + jitter(rng), 0.0, 1.0);
  b.checker_size = s.checker_size;
  b.checker_contrast = s.checker_contrast;
  return b;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, int n_objects, RoomExtent extent) {
  if (n_objects < 1) throw InvalidArgument("generate_scene: n_objects must be >= 1");
  if (extent.x < 2.0 || extent.z < 2.0 || extent.y < 2.0) {
    throw InvalidArgument("generate_scene: room extents must be at least 2 m in every axis");
  }
  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  Scene scene;
  scene.seed = seed;
  scene.shell.min = Vector3d::Zero();
  scene.shell.max = Vector3d(extent.x, extent.y, extent.z);
  scene.shell.label = kWall;
  const ClassStyle wall = style_for(kWall);
  scene.shell.albedo = wall.albedo;
  scene.shell.checker_size = wall.checker_size;
  scene.shell.checker_contrast = wall.checker_contrast;

  // Cycle through a shuffled catalogue so any two objects differ in class.
  std::vector<std::uint16_t> order(kObjectClasses.begin(), kObjectClasses.end());
  std::shuffle(order.begin(), order.end(), rng);

  constexpr double kWallGap = 0.05;
  constexpr int kMaxAttempts = 2000;
  for (int n = 0; n < n_objects; ++n) {
    const std::uint16_t label = order[static_cast<std::size_t>(n) % order.size()];
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      Box b = styled_box(label, rng);
      if (label == kTv || label == kPicture) {
        const double width = label == kTv ? uniform(0.6, 1.2) : uniform(0.3, 0.9);
        const double height = label == kTv ? uniform(0.35, 0.7) : uniform(0.3, 0.7);
        const double thick = label == kTv ? 0.06 : 0.03;
        const double center_y = label == kTv ? uniform(1.0, 1.5) : uniform(1.2, 1.8);
        const int side = std::uniform_int_distribution<int>(0, 3)(rng);
        const bool along_x = side < 2;  // walls at z = 0 / z = max run along x
        const double run = along_x ? extent.x : extent.z;
        if (width + 2 * kWallGap >= run) continue;
        const double start = uniform(kWallGap, run - width - kWallGap);
        b.min.y() = center_y - height / 2;
        b.max.y() = center_y + height / 2;
        if (b.max.y() >= extent.y) continue;
        if (along_x) {
          b.min.x() = start;
          b.max.x() = start + width;
          b.min.z() = side == 0 ? 0.0 : extent.z - thick;
          b.max.z() = side == 0 ? thick : extent.z;
        } else {
          b.min.z() = start;
          b.max.z() = start + width;
          b.min.x() = side == 2 ? 0.0 : extent.x - thick;
          b.max.x() = side == 2 ? thick : extent.x;
        }
      } else {
        const FurnitureShape s = furniture_shape(label);
        double a = uniform(s.min_a, s.max_a);
        double c = uniform(s.min_b, s.max_b);
        if (std::bernoulli_distribution(0.5)(rng)) std::swap(a, c);
        const double h = uniform(s.min_h, s.max_h);
        if (a + 2 * kWallGap >= extent.x || c + 2 * kWallGap >= extent.z || h >= extent.y) continue;
        const double x0 = uniform(kWallGap, extent.x - a - kWallGap);
        const double z0 = uniform(kWallGap, extent.z - c - kWallGap);
        b.min = Vector3d(x0, 0.0, z0);
        b.max = Vector3d(x0 + a, h, z0 + c);
      }
      const bool clear = std::none_of(scene.objects.begin(), scene.objects.end(),
                                      [&](const Box& o) { return boxes_overlap(o, b, 0.1); });
      if (clear) {
        scene.objects.push_back(b);
        placed = true;
      }
    }
    if (!placed) {
      throw InvalidArgument("generate_scene: room too small to place " + std::to_string(n_objects) + " objects");
    }
  }
  return scene;
}

namespace {

json vec_json(const Vector3d& v) { return {v.x(), v.y(), v.z()}; }
Vector3d vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

json box_json(const Box& b) {
  return {{"min", vec_json(b.min)},       {"max", vec_json(b.max)},
          {"label", b.label},            {"albedo", vec_json(b.albedo)},
          {"checker_size", b.checker_size}, {"checker_contrast", b.checker_contrast}};
}

Box box_from(const json& j) {
  Box b;
  b.min = vec_from(j.at("min"));
  b.max = vec_from(j.at("max"));
  b.label = j.at("label").get<std::uint16_t>();
  b.albedo = vec_from(j.at("albedo"));
  b.checker_size = j.at("checker_size").get<double>();
  b.checker_contrast = j.at("checker_contrast").get<double>();
  return b;
}

}  // namespace

std::string scene_to_json(const Scene& scene) {
  json objects = json::array();
  for (const auto& b : scene.objects) objects.push_back(box_json(b));
  return json{{"seed", scene.seed},
              {"shell", box_json(scene.shell)},
              {"objects", objects},
              {"light_dir", vec_json(scene.light_dir)}}
      .dump(2);
}

Scene scene_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    Scene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.shell = box_from(j.at("shell"));
    for (const auto& o : j.at("objects")) s.objects.push_back(box_from(o));
    s.light_dir = vec_from(j.at("light_dir"));
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed scene JSON: ") + e.what());
  }
}

bool inside_shell(const Scene& scene, const Vector3d& p) { return scene.shell.contains(p); }

namespace {

// Slab test. For a ray starting outside the box returns the entry parameter;
// `entry_axis` receives the axis of the entered face.
bool ray_box_entry(const Box& b, const Vector3d& o, const Vector3d& d, double& t_out, int& entry_axis) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int axis = -1;
  for (int k = 0; k < 3; ++k) {
    if (d[k] == 0.0) {
      if (o[k] < b.min[k] || o[k] > b.max[k]) return false;
      continue;
    }
    double t0 = (b.min[k] - o[k]) / d[k];
    double t1 = (b.max[k] - o[k]) / d[k];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_near) {
      t_near = t0;
      axis = k;
    }
    t_far = std::min(t_far, t1);
  }
  if (axis < 0 || t_near > t_far || !(t_near > 0.0)) return false;
  t_out = t_near;
  entry_axis = axis;
  return true;
}

}  // namespace

Hit cast_ray(const Scene& scene, const Vector3d& origin, const Vector3d& dir) {
  Hit hit;
  hit.t = std::numeric_limits<double>::infinity();
  // Shell: exit parameter of the interior box.
  int shell_axis = 0;
  for (int k = 0; k < 3; ++k) {
    if (dir[k] == 0.0) continue;
    const double bound = dir[k] > 0.0 ? scene.shell.max[k] : scene.shell.min[k];
    const double t = (bound - origin[k]) / dir[k];
    if (t < hit.t) {
      hit.t = t;
      shell_axis = k;
    }
  }
  hit.box = &scene.shell;
  hit.normal = Vector3d::Zero();
  hit.normal[shell_axis] = dir[shell_axis] > 0.0 ? -1.0 : 1.0;
  if (shell_axis == 1) {
    hit.label = dir[1] > 0.0 ? kCeiling : kFloor;
  } else {
    hit.label = kWall;
  }
  for (const Box& b : scene.objects) {
    double t = 0.0;
    int axis = 0;
    if (ray_box_entry(b, origin, dir, t, axis) && t < hit.t) {
      hit.t = t;
      hit.box = &b;
      hit.label = b.label;
      hit.normal = Vector3d::Zero();
      hit.normal[axis] = dir[axis] > 0.0 ? -1.0 : 1.0;
    }
  }
  hit.point = origin + hit.t * dir;
  return hit;
}

Vector3d pixel_ray(const CameraModel& cam, const Pose& pose, double row, double col) {
  return pose.rotation * Vector3d((col - cam.cx) / cam.fx, (row - cam.cy) / cam.fy, 1.0);
}

namespace {

Vector3d shade(const Scene& scene, const Hit& hit) {
  const Box& b = *hit.box;
  Vector3d albedo = b.albedo;
  double checker_size = b.checker_size;
  double contrast = b.checker_contrast;
  if (hit.box == &scene.shell && hit.label != kWall) {
    const ClassStyle s = style_for(hit.label);
    albedo = s.albedo;
    checker_size = s.checker_size;
    contrast = s.checker_contrast;
  }
  // Checker pattern over the two in-plane axes of the hit face.
  int axis = 0;
  for (int k = 0; k < 3; ++k) {
    if (hit.normal[k] != 0.0) axis = k;
  }
  const int a = (axis + 1) % 3;
  const int c = (axis + 2) % 3;
  const auto cell = [&](int k) { return static_cast<long long>(std::floor(hit.point[k] / checker_size)); };
  const bool odd = ((cell(a) + cell(c)) & 1LL) != 0;
  const double texture = odd ? 1.0 - contrast : 1.0;
  const double diffuse = std::max(0.0, -hit.normal.dot(scene.light_dir));
  return albedo * texture * (0.35 + 0.65 * diffuse);
}

}  // namespace

Frame render_view(const Scene& scene, const CameraModel& cam, const Pose& pose, const std::string& id) {
  cam.validate();
  pose.validate();
  if (!inside_shell(scene, pose.translation)) {
    throw InvalidArgument("render_view: camera position is outside the room shell");
  }
  Frame f;
  f.id = id;
  f.camera_id = "synth";
  f.pose = pose;
  f.rgb = RgbImage(cam.width, cam.height, 3);
  f.depth = DepthImage(cam.width, cam.height, 1);
  f.labels = LabelImage(cam.width, cam.height, 1);
  for (int r = 0; r < cam.height; ++r) {
    for (int c = 0; c < cam.width; ++c) {
      const Vector3d dir = pixel_ray(cam, pose, r, c);
      const Hit hit = cast_ray(scene, pose.translation, dir);
      f.depth.at(r, c) = static_cast<float>(hit.t);
      f.labels->at(r, c) = hit.label;
      const Vector3d color = shade(scene, hit);
      for (int ch = 0; ch < 3; ++ch) {
        f.rgb.at(r, c, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(color[ch], 0.0, 1.0) * 255.0));
      }
    }
  }
  return f;
}

bool point_visible(const Scene& scene, const CameraModel& cam, const Pose& pose, const Vector3d& x,
                   double rel_tol) {
  const Vector3d xc = pose.world_to_camera(x);
  if (!(xc.z() > 0.0)) return false;
  const double col = cam.fx * xc.x() / xc.z() + cam.cx;
  const double row = cam.fy * xc.y() / xc.z() + cam.cy;
  if (!(row > -0.5 && col > -0.5 && row < cam.height - 0.5 && col < cam.width - 0.5)) return false;
  // Ray with unit camera-z: x is reached at t = xc.z().
  const Vector3d dir = pose.rotation * Vector3d(xc.x() / xc.z(), xc.y() / xc.z(), 1.0);
  const Hit hit = cast_ray(scene, pose.translation, dir);
  return hit.t >= xc.z() * (1.0 - rel_tol);
}

std::vector<Pose> sample_grid_views(const Scene& scene, const GridViewOptions& options) {
  if (!(options.grid_step > 0.0)) throw InvalidArgument("sample_grid_views: grid_step must be > 0");
  if (!(options.yaw_step > 0.0)) throw InvalidArgument("sample_grid_views: yaw_step must be > 0");
  const double per_turn = 360.0 / options.yaw_step;
  const long yaws = std::lround(per_turn);
  if (std::abs(per_turn - static_cast<double>(yaws)) > 1e-9) {
    throw InvalidArgument("sample_grid_views: yaw_step must divide 360");
  }
  const Vector3d& lo = scene.shell.min;
  const Vector3d& hi = scene.shell.max;
  const double y = lo.y() + options.height;
  if (!(y > lo.y() && y < hi.y())) throw InvalidArgument("sample_grid_views: height outside the room");

  std::vector<Pose> poses;
  constexpr double kEps = 1e-9;
  for (int i = 1;; ++i) {
    const double x = lo.x() + i * options.grid_step;
    if (x >= hi.x() - kEps) break;
    for (int j = 1;; ++j) {
      const double z = lo.z() + j * options.grid_step;
      if (z >= hi.z() - kEps) break;
      const Vector3d position(x, y, z);
      const bool occupied = std::any_of(scene.objects.begin(), scene.objects.end(),
                                        [&](const Box& b) { return b.contains(position); });
      if (occupied) continue;
      for (long k = 0; k < yaws; ++k) {
        const double yaw = static_cast<double>(k) * options.yaw_step * std::numbers::pi / 180.0;
        poses.push_back(yaw_pose(position, yaw));
      }
    }
  }
  if (poses.empty()) throw InvalidArgument("sample_grid_views: no grid point inside the room");
  return poses;
}

LabelRemap::LabelRemap(std::map<std::uint16_t, std::uint16_t> mapping, std::set<std::uint16_t> dropped)
    : mapping_(std::move(mapping)), dropped_(std::move(dropped)) {
  for (auto label : dropped_) {
    if (mapping_.contains(label)) {
      throw InvalidArgument("LabelRemap: label " + std::to_string(label) + " is both mapped and dropped");
    }
  }
}

std::uint16_t LabelRemap::apply(std::uint16_t label) const {
  if (dropped_.contains(label)) return kIgnoreLabel;
  auto it = mapping_.find(label);
  return it == mapping_.end() ? kIgnoreLabel : it->second;
}

LabelImage remap_labels(const LabelImage& labels, const LabelRemap& remap) {
  LabelImage out = labels;
  for (auto& v : out.data()) v = remap.apply(v);
  return out;
}

GeneratedWorld build_world(const WorldOptions& options) {
  GeneratedWorld world;
  world.scene = generate_scene(options.seed, options.n_objects, options.extent);
  if (options.camera_height) {
    world.camera_height = *options.camera_height;
  } else {
    // Fixed per world, drawn once from the seed.
    std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
    world.camera_height = std::uniform_real_distribution<double>(1.2, 1.6)(rng);
  }
  world.poses = sample_grid_views(world.scene, {world.camera_height, options.grid_step, options.yaw_step});
  return world;
}

std::filesystem::path write_world(const WorldOptions& options, const std::filesystem::path& out_dir, int jobs) {
  const GeneratedWorld world = build_world(options);
  io::DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.cameras["synth"] = options.camera;
  manifest.class_names = class_names();
  for (std::size_t i = 0; i < world.poses.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "view%04zu", i);
    io::FrameRecord rec;
    rec.id = id;
    rec.rgb_path = std::string("frames/") + id + ".ppm";
    rec.depth_path = std::string("frames/") + id + ".depth";
    rec.label_path = std::string("frames/") + id + ".pgm";
    rec.pose = world.poses[i];
    rec.camera_id = "synth";
    manifest.frames.push_back(std::move(rec));
  }
  std::filesystem::create_directories(out_dir / "frames");
  parallel_for(manifest.frames.size(), jobs, [&](std::size_t i) {
    const auto& rec = manifest.frames[i];
    const Frame frame = render_view(world.scene, options.camera, rec.pose, rec.id);
    io::save_frame_files(manifest, rec, frame);
  });
  io::write_text(out_dir / "scene.json", scene_to_json(world.scene) + "\n");
  const auto path = out_dir / "manifest.json";
  io::save_manifest(manifest, path);
  return path;
}

}  // namespace regconsist::synthworld
