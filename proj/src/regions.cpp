#include "regconsist/regions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "regconsist/error.hpp"
#include "regconsist/io.hpp"

namespace regconsist::regions {

namespace {

// Disjoint-set forest with union by rank, path compression and sizes.
class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0), size_(n, 1) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    std::size_t root = x;
    while (parent_[root] != root) root = parent_[root];
    while (parent_[x] != root) {
      const std::size_t next = parent_[x];
      parent_[x] = root;
      x = next;
    }
    return root;
  }

  std::size_t join(std::size_t a, std::size_t b) {
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    if (rank_[a] == rank_[b]) ++rank_[a];
    return a;
  }

  std::size_t size(std::size_t root) const { return size_[root]; }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::uint8_t> rank_;
  std::vector<std::size_t> size_;
};

struct Edge {
  float weight;
  std::uint32_t a;
  std::uint32_t b;
};

}  // namespace

SigmaMode parse_sigma_mode(const std::string& text) {
  if (text == "blur") return SigmaMode::kBlur;
  if (text == "raw") return SigmaMode::kRaw;
  throw InvalidArgument("unknown sigma mode '" + text + "' (expected blur or raw)");
}

std::string to_string(SigmaMode mode) { return mode == SigmaMode::kBlur ? "blur" : "raw"; }

void RegionMap::validate() const {
  if (width < 0 || height < 0 || labels.size() != static_cast<std::size_t>(width) * height) {
    throw InvalidArgument("RegionMap: label count does not match dimensions");
  }
  std::vector<char> used(static_cast<std::size_t>(std::max(count, 0)), 0);
  for (auto l : labels) {
    if (l < 0 || l >= count) throw InvalidArgument("RegionMap: label out of range");
    used[static_cast<std::size_t>(l)] = 1;
  }
  if (std::find(used.begin(), used.end(), 0) != used.end()) {
    throw InvalidArgument("RegionMap: labels are not dense");
  }
}

std::vector<float> smooth_channels(const RgbImage& rgb, double sigma) {
  const int w = rgb.width();
  const int h = rgb.height();
  const int ch = rgb.channels();
  std::vector<float> out(rgb.data().begin(), rgb.data().end());
  if (!(sigma > 0.0)) return out;

  sigma = std::max(sigma, 0.01);
  const int len = static_cast<int>(std::ceil(sigma * 4.0)) + 1;
  std::vector<double> mask(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) mask[i] = std::exp(-0.5 * (i / sigma) * (i / sigma));
  double sum = 2.0 * std::accumulate(mask.begin(), mask.end(), 0.0) - mask[0];
  for (auto& m : mask) m /= sum;

  std::vector<float> tmp(out.size());
  auto idx = [&](int r, int c, int k) { return (static_cast<std::size_t>(r) * w + c) * ch + k; };
  // Horizontal then vertical pass, clamping at the borders.
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int k = 0; k < ch; ++k) {
        double acc = mask[0] * out[idx(r, c, k)];
        for (int i = 1; i < len; ++i) {
          acc += mask[i] * (out[idx(r, std::max(c - i, 0), k)] + out[idx(r, std::min(c + i, w - 1), k)]);
        }
        tmp[idx(r, c, k)] = static_cast<float>(acc);
      }
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int k = 0; k < ch; ++k) {
        double acc = mask[0] * tmp[idx(r, c, k)];
        for (int i = 1; i < len; ++i) {
          acc += mask[i] * (tmp[idx(std::max(r - i, 0), c, k)] + tmp[idx(std::min(r + i, h - 1), c, k)]);
        }
        out[idx(r, c, k)] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

RegionMap relabel_dense(int width, int height, const std::vector<std::int32_t>& raw) {
  RegionMap map;
  map.width = width;
  map.height = height;
  map.labels.resize(raw.size());
  std::unordered_map<std::int32_t, std::int32_t> dense;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto [it, inserted] = dense.try_emplace(raw[i], static_cast<std::int32_t>(dense.size()));
    map.labels[i] = it->second;
  }
  map.count = static_cast<int>(dense.size());
  return map;
}

RegionMap segment_graph(const RgbImage& rgb, const SegmentParams& params) {
  if (rgb.empty()) throw InvalidArgument("segment_graph: empty image");
  if (!(params.scale > 0.0)) throw InvalidArgument("segment_graph: scale must be > 0");
  if (!(params.sigma >= 0.0)) throw InvalidArgument("segment_graph: sigma must be >= 0");
  if (params.min_size < 1) throw InvalidArgument("segment_graph: min_size must be >= 1");

  const int w = rgb.width();
  const int h = rgb.height();
  const int ch = rgb.channels();
  const std::vector<float> img =
      smooth_channels(rgb, params.mode == SigmaMode::kBlur ? params.sigma : 0.0);

  auto diff = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (int k = 0; k < ch; ++k) {
      const double d = static_cast<double>(img[a * ch + k]) - img[b * ch + k];
      s += d * d;
    }
    return static_cast<float>(std::sqrt(s));
  };

  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(w) * h * 4);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto a = static_cast<std::uint32_t>(r * w + c);
      auto add = [&](int rr, int cc) {
        const auto b = static_cast<std::uint32_t>(rr * w + cc);
        edges.push_back({diff(a, b), a, b});
      };
      if (c + 1 < w) add(r, c + 1);
      if (r + 1 < h) add(r + 1, c);
      if (c + 1 < w && r + 1 < h) add(r + 1, c + 1);
      if (c + 1 < w && r > 0) add(r - 1, c + 1);
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) {
    if (x.weight != y.weight) return x.weight < y.weight;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });

  const std::size_t n = static_cast<std::size_t>(w) * h;
  DisjointSets sets(n);
  std::vector<double> threshold(n, params.scale);
  for (const Edge& e : edges) {
    std::size_t a = sets.find(e.a);
    std::size_t b = sets.find(e.b);
    if (a == b) continue;
    if (e.weight <= threshold[a] && e.weight <= threshold[b]) {
      a = sets.join(a, b);
      threshold[a] = e.weight + params.scale / static_cast<double>(sets.size(a));
    }
  }
  for (const Edge& e : edges) {
    const std::size_t a = sets.find(e.a);
    const std::size_t b = sets.find(e.b);
    if (a != b && (sets.size(a) < static_cast<std::size_t>(params.min_size) ||
                   sets.size(b) < static_cast<std::size_t>(params.min_size))) {
      sets.join(a, b);
    }
  }

  std::vector<std::int32_t> roots(n);
  for (std::size_t i = 0; i < n; ++i) roots[i] = static_cast<std::int32_t>(sets.find(i));
  return relabel_dense(w, h, roots);
}

std::vector<std::size_t> region_sizes(const RegionMap& map) {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(map.count), 0);
  for (auto l : map.labels) ++sizes.at(static_cast<std::size_t>(l));
  return sizes;
}

RegionMap region_map_from_labels(const LabelImage& labels) {
  std::vector<std::int32_t> raw(labels.data().begin(), labels.data().end());
  return relabel_dense(labels.width(), labels.height(), raw);
}

void save_region_map(const RegionMap& map, const std::filesystem::path& pgm_path,
                     const std::filesystem::path& sizes_path) {
  if (map.count > 65535) throw InvalidArgument("region map has too many regions for a 16-bit PGM");
  LabelImage img(map.width, map.height, 1);
  for (std::size_t i = 0; i < map.labels.size(); ++i) img.data()[i] = static_cast<std::uint16_t>(map.labels[i]);
  io::write_pgm16(pgm_path, img);
  const nlohmann::json j = {{"count", map.count}, {"sizes", region_sizes(map)}};
  io::write_text(sizes_path, j.dump() + "\n");
}

RegionMap load_region_map(const std::filesystem::path& pgm_path) {
  const LabelImage img = io::read_pgm16(pgm_path);
  RegionMap map;
  map.width = img.width();
  map.height = img.height();
  map.labels.assign(img.data().begin(), img.data().end());
  map.count = map.labels.empty() ? 0 : *std::max_element(map.labels.begin(), map.labels.end()) + 1;
  map.validate();
  return map;
}

}  // namespace regconsist::regions
