#include "regconsist/geometry.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "regconsist/error.hpp"
#include "regconsist/hash.hpp"
#include "regconsist/io.hpp"
#include "regconsist/parallel.hpp"

namespace regconsist::geometry {

Reprojector::Reprojector(const CameraModel& cam, const Pose& pose1, const Pose& pose2)
    : cam_(cam),
      rotation_(pose2.rotation.transpose() * pose1.rotation),
      translation_(pose2.rotation.transpose() * (pose1.translation - pose2.translation)) {}

std::optional<Projection> Reprojector::operator()(double row, double col, double depth) const {
  const Eigen::Vector3d x1((col - cam_.cx) / cam_.fx * depth, (row - cam_.cy) / cam_.fy * depth, depth);
  const Eigen::Vector3d x2 = rotation_ * x1 + translation_;
  if (!(x2.z() > 0.0)) return std::nullopt;
  return Projection{cam_.fy * x2.y() / x2.z() + cam_.cy, cam_.fx * x2.x() / x2.z() + cam_.cx, x2.z()};
}

namespace {

void check_pair(const Frame& frame1, const Frame& frame2, const CameraModel& cam) {
  if (!frame1.depth.same_shape(cam.width, cam.height) || !frame2.depth.same_shape(cam.width, cam.height)) {
    throw DimensionError("frames '" + frame1.id + "' and '" + frame2.id +
                         "' do not match the camera resolution");
  }
}

}  // namespace

std::optional<Projection> project_pixel(const CameraModel& cam, const Pose& pose1, const Pose& pose2,
                                        double row, double col, double depth) {
  if (!(depth > 0.0) || !std::isfinite(depth)) {
    throw InvalidArgument("project_pixel: depth must be positive and finite");
  }
  return Reprojector(cam, pose1, pose2)(row, col, depth);
}

std::optional<Pixel> round_to_pixel(const Projection& proj, int width, int height) {
  const double r = std::round(proj.row);
  const double c = std::round(proj.col);
  if (!(r >= 0.0 && c >= 0.0 && r < height && c < width)) return std::nullopt;
  return Pixel{static_cast<int>(r), static_cast<int>(c)};
}

std::vector<std::int32_t> correspondence_index(const Frame& frame1, const Frame& frame2,
                                               const CameraModel& cam, double epsilon_rel, int stride) {
  check_pair(frame1, frame2, cam);
  if (stride < 1) throw InvalidArgument("correspondence_index: stride must be >= 1");
  const int w = cam.width;
  const int h = cam.height;
  const Reprojector reproject(cam, frame1.pose, frame2.pose);
  std::vector<std::int32_t> index(static_cast<std::size_t>(w) * h, -1);
  for (int r = 0; r < h; r += stride) {
    for (int c = 0; c < w; c += stride) {
      const float d1 = frame1.depth.at(r, c);
      if (is_depth_hole(d1)) continue;
      const auto proj = reproject(r, c, d1);
      if (!proj) continue;
      const auto q = round_to_pixel(*proj, w, h);
      if (!q) continue;
      const float d2 = frame2.depth.at(*q);
      if (is_depth_hole(d2)) continue;
      if (!passes_occlusion_test(proj->depth, d2, epsilon_rel)) continue;
      index[static_cast<std::size_t>(r) * w + c] = q->row * w + q->col;
    }
  }
  return index;
}

std::vector<Correspondence> compute_correspondences(const Frame& frame1, const Frame& frame2,
                                                    const CameraModel& cam, double epsilon_rel) {
  const auto index = correspondence_index(frame1, frame2, cam, epsilon_rel);
  const int w = cam.width;
  std::vector<Correspondence> out;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0) continue;
    const Pixel p{static_cast<int>(i / w), static_cast<int>(i % w)};
    const Pixel q{index[i] / w, index[i] % w};
    out.push_back({p, q, frame1.depth.at(p)});
  }
  return out;
}

OverlapCounts overlap_counts(const Frame& frame1, const Frame& frame2, const CameraModel& cam,
                             double epsilon_rel, int stride) {
  OverlapCounts counts;
  auto count_valid = [&](const Frame& f) {
    std::size_t n = 0;
    for (int r = 0; r < cam.height; r += stride) {
      for (int c = 0; c < cam.width; c += stride) n += f.depth_valid(r, c) ? 1 : 0;
    }
    return n;
  };
  auto count_covered = [](const std::vector<std::int32_t>& index) {
    std::size_t n = 0;
    for (auto v : index) n += v >= 0 ? 1 : 0;
    return n;
  };
  counts.covered12 = count_covered(correspondence_index(frame1, frame2, cam, epsilon_rel, stride));
  counts.covered21 = count_covered(correspondence_index(frame2, frame1, cam, epsilon_rel, stride));
  counts.valid1 = count_valid(frame1);
  counts.valid2 = count_valid(frame2);
  return counts;
}

double view_overlap_iou(const Frame& frame1, const Frame& frame2, const CameraModel& cam,
                        double epsilon_rel, int stride) {
  const auto c = overlap_counts(frame1, frame2, cam, epsilon_rel, stride);
  const std::size_t denom = c.valid1 + c.valid2;
  if (denom == 0) {
    throw InvalidArgument("view_overlap_iou: degenerate frames '" + frame1.id + "' and '" + frame2.id +
                          "' have no valid depth");
  }
  return static_cast<double>(c.covered12 + c.covered21) / static_cast<double>(denom);
}

std::vector<ViewPair> select_view_pairs(const std::vector<Frame>& frames, const CameraModel& cam,
                                        const PairSelectionOptions& options) {
  if (frames.size() < 2) throw InvalidArgument("select_view_pairs: need at least 2 frames");
  if (!(options.iou_low < options.iou_high) || options.iou_low < 0.0 || options.iou_high > 1.0) {
    throw InvalidArgument("select_view_pairs: require 0 <= iou_low < iou_high <= 1");
  }
  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    for (std::size_t j = i + 1; j < frames.size(); ++j) candidates.emplace_back(i, j);
  }
  std::vector<double> ious(candidates.size(), -1.0);
  parallel_for(candidates.size(), options.jobs, [&](std::size_t k) {
    const auto [i, j] = candidates[k];
    ious[k] = view_overlap_iou(frames[i], frames[j], cam, options.epsilon_rel, options.stride);
  });
  std::vector<ViewPair> selected;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (ious[k] >= options.iou_low && ious[k] <= options.iou_high) {
      selected.push_back({frames[candidates[k].first].id, frames[candidates[k].second].id, ious[k]});
    }
  }
  return selected;
}

std::string view_pair_cache_key(const std::string& manifest_hash, const PairSelectionOptions& options) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "|%.17g|%.17g|%.17g|%d", options.iou_low, options.iou_high,
                options.epsilon_rel, options.stride);
  return sha256_hex(manifest_hash + buf).substr(0, 32);
}

std::vector<ViewPair> select_view_pairs(const io::DatasetManifest& manifest,
                                        const PairSelectionOptions& options) {
  if (manifest.frames.size() < 2) throw InvalidArgument("select_view_pairs: need at least 2 frames");
  std::optional<std::filesystem::path> cache_file;
  if (options.cache_dir) {
    cache_file = *options.cache_dir /
                 ("view_pairs_" + view_pair_cache_key(io::manifest_hash(manifest), options) + ".jsonl");
    if (std::filesystem::exists(*cache_file)) return load_view_pairs(*cache_file);
  }
  const CameraModel& cam = manifest.cameras.at(manifest.frames.front().camera_id);
  std::vector<Frame> frames(manifest.frames.size());
  parallel_for(frames.size(), options.jobs, [&](std::size_t i) {
    if (manifest.cameras.at(manifest.frames[i].camera_id) != cam) {
      throw InvalidArgument("select_view_pairs: all frames must share one camera model");
    }
    frames[i] = io::load_frame(manifest, manifest.frames[i].id);
  });
  auto pairs = select_view_pairs(frames, cam, options);
  if (cache_file) save_view_pairs(pairs, *cache_file);
  return pairs;
}

void save_view_pairs(const std::vector<ViewPair>& pairs, const std::filesystem::path& path) {
  std::string text;
  for (const auto& p : pairs) {
    text += nlohmann::json{{"id1", p.id1}, {"id2", p.id2}, {"iou", p.iou}}.dump();
    text += '\n';
  }
  io::write_text(path, text);
}

std::vector<ViewPair> load_view_pairs(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<ViewPair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      pairs.push_back({j.at("id1").get<std::string>(), j.at("id2").get<std::string>(),
                       j.at("iou").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("bad view-pair record on line " + std::to_string(line_no) + " of " +
                        path.string() + ": " + e.what());
    }
  }
  return pairs;
}

}  // namespace regconsist::geometry
