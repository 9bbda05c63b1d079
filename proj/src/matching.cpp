#include "regconsist/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>

#include <json.hpp>

#include "regconsist/error.hpp"
#include "regconsist/geometry.hpp"
#include "regconsist/io.hpp"

namespace regconsist::matching {

using u128 = unsigned __int128;

std::uint64_t cantor_pair(std::uint64_t k1, std::uint64_t k2) {
  const u128 s = static_cast<u128>(k1) + k2;
  const u128 n = s * (s + 1) / 2 + k2;
  if (n > std::numeric_limits<std::uint64_t>::max()) {
    throw InvalidArgument("cantor_pair overflow for (" + std::to_string(k1) + ", " + std::to_string(k2) + ")");
  }
  return static_cast<std::uint64_t>(n);
}

std::pair<std::uint64_t, std::uint64_t> cantor_unpair(std::uint64_t n) {
  // w = floor((sqrt(8n + 1) - 1) / 2), corrected to be exact.
  auto tri = [](u128 w) { return w * (w + 1) / 2; };
  u128 w = static_cast<u128>((std::sqrt(8.0L * static_cast<long double>(n) + 1.0L) - 1.0L) / 2.0L);
  while (w > 0 && tri(w) > n) --w;
  while (tri(w + 1) <= n) ++w;
  const auto k2 = static_cast<std::uint64_t>(n - tri(w));
  const auto k1 = static_cast<std::uint64_t>(w - k2);
  return {k1, k2};
}

WarpedMap warp_region_map(const regions::RegionMap& regmap1, const Frame& frame1, const Frame& frame2,
                          const CameraModel& cam, double epsilon_rel) {
  if (regmap1.width != frame1.width() || regmap1.height != frame1.height()) {
    throw DimensionError("warp_region_map: region map does not match frame '" + frame1.id + "'");
  }
  const int w = cam.width;
  const int h = cam.height;
  WarpedMap out{w, h, std::vector<std::int32_t>(static_cast<std::size_t>(w) * h, kHole)};
  std::vector<double> zbuf(out.labels.size(), std::numeric_limits<double>::infinity());
  const geometry::Reprojector reproject(cam, frame1.pose, frame2.pose);
  for (int r = 0; r < frame1.height(); ++r) {
    for (int c = 0; c < frame1.width(); ++c) {
      const float d1 = frame1.depth.at(r, c);
      if (is_depth_hole(d1)) continue;
      const auto proj = reproject(r, c, d1);
      if (!proj) continue;
      const auto q = geometry::round_to_pixel(*proj, w, h);
      if (!q) continue;
      const float d2 = frame2.depth.at(*q);
      if (is_depth_hole(d2) || !geometry::passes_occlusion_test(proj->depth, d2, epsilon_rel)) continue;
      const std::size_t qi = static_cast<std::size_t>(q->row) * w + q->col;
      if (proj->depth < zbuf[qi]) {
        zbuf[qi] = proj->depth;
        out.labels[qi] = regmap1.at(r, c);
      }
    }
  }
  return out;
}

RegionIoUTable region_iou_table(const WarpedMap& warped, const regions::RegionMap& regmap2, OpCounter* ops) {
  if (warped.width != regmap2.width || warped.height != regmap2.height ||
      warped.labels.size() != regmap2.labels.size()) {
    throw DimensionError("region_iou_table: warped map and region map differ in size");
  }
  std::unordered_map<std::uint64_t, std::uint64_t> histogram;
  std::vector<std::uint64_t> size_u;
  std::vector<std::uint64_t> size_v(static_cast<std::size_t>(std::max(regmap2.count, 0)), 0);
  OpCounter local;
  for (std::size_t i = 0; i < warped.labels.size(); ++i) {
    ++local.pixel_visits;
    const std::int32_t v = regmap2.labels[i];
    ++size_v.at(static_cast<std::size_t>(v));
    const std::int32_t u = warped.labels[i];
    if (u == kHole) continue;
    if (static_cast<std::size_t>(u) >= size_u.size()) size_u.resize(static_cast<std::size_t>(u) + 1, 0);
    ++size_u[static_cast<std::size_t>(u)];
    ++histogram[cantor_pair(static_cast<std::uint64_t>(u), static_cast<std::uint64_t>(v))];
    ++local.histogram_updates;
  }
  RegionIoUTable table;
  table.entries.reserve(histogram.size());
  for (const auto& [key, count] : histogram) {
    const auto [u, v] = cantor_unpair(key);
    RegionOverlap e;
    e.u = static_cast<std::int32_t>(u);
    e.v = static_cast<std::int32_t>(v);
    e.intersection = count;
    e.size_u = size_u[u];
    e.size_v = size_v[v];
    e.iou = static_cast<double>(count) / static_cast<double>(e.union_size());
    table.entries.push_back(e);
    ++local.entries_emitted;
  }
  std::sort(table.entries.begin(), table.entries.end(),
            [](const RegionOverlap& a, const RegionOverlap& b) { return std::tie(a.u, a.v) < std::tie(b.u, b.v); });
  if (ops) *ops = local;
  return table;
}

int compare_iou(const RegionOverlap& a, const RegionOverlap& b) {
  const u128 lhs = static_cast<u128>(a.intersection) * b.union_size();
  const u128 rhs = static_cast<u128>(b.intersection) * a.union_size();
  return lhs < rhs ? -1 : (lhs > rhs ? 1 : 0);
}

RegionMatchSet match_regions(const RegionIoUTable& table, double tau_region) {
  if (!(tau_region > 0.0 && tau_region <= 1.0)) {
    throw InvalidArgument("match_regions: tau_region must be in (0, 1]");
  }
  // Best partner per label, as an index into table.entries.
  std::unordered_map<std::int32_t, std::size_t> best_for_u;
  std::unordered_map<std::int32_t, std::size_t> best_for_v;
  const auto& es = table.entries;
  for (std::size_t i = 0; i < es.size(); ++i) {
    auto consider = [&](std::unordered_map<std::int32_t, std::size_t>& best, std::int32_t key, bool by_v) {
      auto [it, inserted] = best.try_emplace(key, i);
      if (inserted) return;
      const RegionOverlap& cur = es[it->second];
      const int cmp = compare_iou(es[i], cur);
      const std::int32_t mine = by_v ? es[i].v : es[i].u;
      const std::int32_t theirs = by_v ? cur.v : cur.u;
      if (cmp > 0 || (cmp == 0 && mine < theirs)) it->second = i;
    };
    consider(best_for_u, es[i].u, /*by_v=*/true);
    consider(best_for_v, es[i].v, /*by_v=*/false);
  }
  RegionMatchSet matches;
  for (std::size_t i = 0; i < es.size(); ++i) {
    if (best_for_u.at(es[i].u) == i && best_for_v.at(es[i].v) == i && es[i].iou >= tau_region) {
      matches.push_back({es[i].u, es[i].v, es[i].iou});
    }
  }
  return matches;
}

void save_iou_table(const RegionIoUTable& table, const std::filesystem::path& path) {
  std::string text;
  for (const auto& e : table.entries) {
    text += nlohmann::json{{"u", e.u}, {"v", e.v}, {"intersection", e.intersection}, {"iou", e.iou}}.dump();
    text += '\n';
  }
  io::write_text(path, text);
}

}  // namespace regconsist::matching
