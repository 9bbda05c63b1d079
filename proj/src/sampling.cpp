#include "regconsist/sampling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>

#include "regconsist/error.hpp"
#include "regconsist/geometry.hpp"

namespace regconsist {

bool CropTransform::map_pixel(Pixel src, Pixel& out) const {
  const auto [r, c] = forward(src.row, src.col);
  const double rr = std::round(r);
  const double cc = std::round(c);
  if (!(rr >= 0.0 && cc >= 0.0 && rr < out_height && cc < out_width)) return false;
  out = {static_cast<int>(rr), static_cast<int>(cc)};
  return true;
}

}  // namespace regconsist

namespace regconsist::sampling {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

void SamplingConfig::validate() const {
  if (pairs < 1) throw InvalidArgument("sampling: pairs per batch must be >= 1");
}

std::string SamplingConfig::strategy() const {
  return std::string(sampler == Sampler::kRandom ? "random" : "balanced") + "-" +
         (matcher == Matcher::kExact ? "exact" : "region");
}

void parse_strategy(const std::string& text, SamplingConfig& config) {
  const auto dash = text.find('-');
  const std::string s = text.substr(0, dash);
  const std::string m = dash == std::string::npos ? "" : text.substr(dash + 1);
  if ((s != "random" && s != "balanced") || (m != "exact" && m != "region")) {
    throw InvalidArgument("unknown sampling strategy '" + text +
                          "' (expected random|balanced-exact|region, e.g. balanced-region)");
  }
  config.sampler = s == "random" ? Sampler::kRandom : Sampler::kBalanced;
  config.matcher = m == "exact" ? Matcher::kExact : Matcher::kRegion;
}

std::vector<std::string> all_strategies() {
  return {"random-exact", "random-region", "balanced-exact", "balanced-region"};
}

AugmentParams AugmentParams::avd() {
  AugmentParams p;
  p.strong_scale = {0.5, 1.0};
  return p;
}

void AugmentParams::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (crop_size < 1) throw InvalidArgument("augment: crop_size must be >= 1");
  for (auto range : {strong_scale, weak_scale}) {
    if (!(range.first > 0.0 && range.first <= range.second && range.second <= 1.0)) {
      throw InvalidArgument("augment: crop scale must satisfy 0 < lo <= hi <= 1");
    }
  }
  if (!(ratio.first > 0.0 && ratio.first <= ratio.second)) throw InvalidArgument("augment: bad ratio range");
  if (!prob(jitter_p) || !prob(grayscale_p) || !prob(blur_p)) {
    throw InvalidArgument("augment: probabilities must lie in [0, 1]");
  }
  if (brightness < 0 || contrast < 0 || saturation < 0 || hue < 0 || hue > 0.5) {
    throw InvalidArgument("augment: bad color jitter strength");
  }
  if (!(blur_sigma.first > 0.0 && blur_sigma.first <= blur_sigma.second)) {
    throw InvalidArgument("augment: bad blur sigma range");
  }
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
bool coin(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Float RGB in [0, 1], interleaved.
using Planar = std::vector<double>;

double gray(const Planar& img, std::size_t i) { return 0.299 * img[i] + 0.587 * img[i + 1] + 0.114 * img[i + 2]; }

Planar to_planar(const RgbImage& rgb) {
  Planar img(rgb.data().size());
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rgb.data()[i] / 255.0;
  return img;
}

void clamp01(Planar& img) {
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
}

void blend(Planar& img, const Planar& other, double factor) {
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = factor * img[i] + (1.0 - factor) * other[i];
  clamp01(img);
}

void adjust_brightness(Planar& img, double f) {
  blend(img, Planar(img.size(), 0.0), f);
}

void adjust_contrast(Planar& img, double f) {
  double mean = 0.0;
  for (std::size_t i = 0; i < img.size(); i += 3) mean += gray(img, i);
  mean /= static_cast<double>(img.size() / 3);
  blend(img, Planar(img.size(), mean), f);
}

void adjust_saturation(Planar& img, double f) {
  Planar g(img.size());
  for (std::size_t i = 0; i < img.size(); i += 3) g[i] = g[i + 1] = g[i + 2] = gray(img, i);
  blend(img, g, f);
}

void adjust_hue(Planar& img, double shift) {
  for (std::size_t i = 0; i < img.size(); i += 3) {
    const double r = img[i], g = img[i + 1], b = img[i + 2];
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    if (d <= 0.0) continue;
    double h;
    if (mx == r) {
      h = std::fmod((g - b) / d, 6.0);
    } else if (mx == g) {
      h = (b - r) / d + 2.0;
    } else {
      h = (r - g) / d + 4.0;
    }
    h = h / 6.0 + shift;
    h -= std::floor(h);
    const double s = d / mx;
    const double v = mx;
    const double hh = h * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double frac = hh - std::floor(hh);
    const double p = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
    const std::array<std::array<double, 3>, 6> rgb{{{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}}};
    img[i] = rgb[sector][0];
    img[i + 1] = rgb[sector][1];
    img[i + 2] = rgb[sector][2];
  }
}

void gaussian_blur(Planar& img, int w, int h, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double sum = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& v : k) v /= sum;
  auto idx = [&](int r, int c, int ch) { return (static_cast<std::size_t>(r) * w + c) * 3 + ch; };
  Planar tmp(img.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img[idx(r, std::clamp(c + i, 0, w - 1), ch)];
        tmp[idx(r, c, ch)] = acc;
      }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[idx(std::clamp(r + i, 0, h - 1), c, ch)];
        img[idx(r, c, ch)] = acc;
      }
}

}  // namespace

RgbImage resample(const RgbImage& rgb, const CropTransform& crop) {
  const int sw = rgb.width();
  const int sh = rgb.height();
  const int ch = rgb.channels();
  if (sw < 1 || sh < 1) throw DimensionError("resample: empty image");
  RgbImage out(crop.out_width, crop.out_height, ch);
  for (int r = 0; r < crop.out_height; ++r) {
    for (int c = 0; c < crop.out_width; ++c) {
      const auto [sr, sc] = crop.inverse(r, c);
      const double yr = std::clamp(sr, 0.0, sh - 1.0);
      const double xc = std::clamp(sc, 0.0, sw - 1.0);
      const int r0 = static_cast<int>(std::floor(yr));
      const int c0 = static_cast<int>(std::floor(xc));
      const int r1 = std::min(r0 + 1, sh - 1);
      const int c1 = std::min(c0 + 1, sw - 1);
      const double fy = yr - r0;
      const double fx = xc - c0;
      for (int k = 0; k < ch; ++k) {
        const double top = (1 - fx) * rgb.at(r0, c0, k) + fx * rgb.at(r0, c1, k);
        const double bot = (1 - fx) * rgb.at(r1, c0, k) + fx * rgb.at(r1, c1, k);
        out.at(r, c, k) = static_cast<std::uint8_t>(std::lround(std::clamp((1 - fy) * top + fy * bot, 0.0, 255.0)));
      }
    }
  }
  return out;
}

CropTransform random_resized_crop(int width, int height, int out_size, std::pair<double, double> scale,
                                  std::pair<double, double> ratio, Rng& rng) {
  const double area = static_cast<double>(width) * height;
  const double log_lo = std::log(ratio.first);
  const double log_hi = std::log(ratio.second);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, scale.first, scale.second);
    const double aspect = std::exp(uniform(rng, log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (w > 0 && w <= width && h > 0 && h <= height) {
      const int top = uniform_int(rng, 0, height - h);
      const int left = uniform_int(rng, 0, width - w);
      return {static_cast<double>(left), static_cast<double>(top), static_cast<double>(w),
              static_cast<double>(h), out_size, out_size};
    }
  }
  const double in_ratio = static_cast<double>(width) / height;
  int w = width;
  int h = height;
  if (in_ratio < ratio.first) {
    h = static_cast<int>(std::lround(w / ratio.first));
  } else if (in_ratio > ratio.second) {
    w = static_cast<int>(std::lround(h * ratio.second));
  }
  return {static_cast<double>((width - w) / 2), static_cast<double>((height - h) / 2), static_cast<double>(w),
          static_cast<double>(h), out_size, out_size};
}

AugmentedView augment(const Frame& frame, Profile profile, Rng& rng, const AugmentParams& params) {
  params.validate();
  const int sw = frame.width();
  const int sh = frame.height();
  if (sw < 1 || sh < 1 || frame.rgb.channels() != 3) throw DimensionError("augment: frame needs a 3-channel image");
  const bool strong = profile == Profile::kStrong;
  AugmentedView view;
  view.crop = random_resized_crop(sw, sh, params.crop_size, strong ? params.strong_scale : params.weak_scale,
                                  params.ratio, rng);
  const int n = params.crop_size;

  Planar img = to_planar(resample(frame.rgb, view.crop));
  view.valid = Image<std::uint8_t>(n, n, 1, 0);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const auto [sr, sc] = view.crop.inverse(r, c);
      const int nr = std::clamp(static_cast<int>(std::lround(sr)), 0, sh - 1);
      const int nc = std::clamp(static_cast<int>(std::lround(sc)), 0, sw - 1);
      view.valid.at(r, c) = frame.depth_valid(nr, nc) ? 1 : 0;
    }
  }

  if (strong) {
    if (coin(rng, params.jitter_p)) {
      const double fb = uniform(rng, std::max(0.0, 1 - params.brightness), 1 + params.brightness);
      const double fc = uniform(rng, std::max(0.0, 1 - params.contrast), 1 + params.contrast);
      const double fs = uniform(rng, std::max(0.0, 1 - params.saturation), 1 + params.saturation);
      const double fh = uniform(rng, -params.hue, params.hue);
      std::array<int, 4> order{0, 1, 2, 3};
      std::shuffle(order.begin(), order.end(), rng);
      for (int op : order) {
        switch (op) {
          case 0: adjust_brightness(img, fb); break;
          case 1: adjust_contrast(img, fc); break;
          case 2: adjust_saturation(img, fs); break;
          default: adjust_hue(img, fh); break;
        }
      }
    }
    if (coin(rng, params.grayscale_p)) {
      for (std::size_t i = 0; i < img.size(); i += 3) img[i] = img[i + 1] = img[i + 2] = gray(img, i);
    }
    if (coin(rng, params.blur_p)) {
      gaussian_blur(img, n, n, uniform(rng, params.blur_sigma.first, params.blur_sigma.second));
    }
  }

  view.rgb = RgbImage(n, n, 3);
  for (std::size_t i = 0; i < img.size(); ++i) {
    view.rgb.storage()[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
  }
  return view;
}

ViewPairData build_view_pair_data(const Frame& frame1, const Frame& frame2, const CameraModel& cam,
                                  regions::RegionMap regions1, regions::RegionMap regions2,
                                  double epsilon_rel, double tau_region) {
  ViewPairData data;
  data.id1 = frame1.id;
  data.id2 = frame2.id;
  data.width = cam.width;
  data.height = cam.height;
  data.correspondence = geometry::correspondence_index(frame1, frame2, cam, epsilon_rel);
  const auto warped = matching::warp_region_map(regions1, frame1, frame2, cam, epsilon_rel);
  data.matches = matching::match_regions(matching::region_iou_table(warped, regions2), tau_region);
  data.regions1 = std::move(regions1);
  data.regions2 = std::move(regions2);
  return data;
}

namespace {

void check_data(const ViewPairData& data) {
  const auto n = static_cast<std::size_t>(data.width) * data.height;
  if (data.regions1.labels.size() != n || data.regions2.labels.size() != n || data.correspondence.size() != n) {
    throw DimensionError("view pair data for '" + data.id1 + "', '" + data.id2 + "' has inconsistent sizes");
  }
}

// k draws from `pool`: without replacement when k fits, otherwise with replacement.
void draw(const std::vector<std::int32_t>& pool, std::size_t k, Rng& rng, std::vector<std::int32_t>& out) {
  if (k <= pool.size()) {
    std::vector<std::int32_t> tmp = pool;
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = std::uniform_int_distribution<std::size_t>(i, tmp.size() - 1)(rng);
      std::swap(tmp[i], tmp[j]);
      out.push_back(tmp[i]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < k; ++i) out.push_back(pool[pick(rng)]);
  }
}

}  // namespace

PairBatch sample_pair_batch(const ViewPairData& data, const SamplingConfig& config, const CropTransform& crop1,
                            const CropTransform& crop2) {
  config.validate();
  check_data(data);
  const int w = data.width;
  const auto n = static_cast<std::int32_t>(data.correspondence.size());
  auto pixel = [w](std::int32_t i) { return Pixel{i / w, i % w}; };
  Pixel scratch;
  auto in1 = [&](std::int32_t i) { return crop1.map_pixel(pixel(i), scratch); };
  auto in2 = [&](std::int32_t i) { return crop2.map_pixel(pixel(i), scratch); };

  // Allocation groups: key -> eligible p pixels; for region matching also the q pool.
  std::map<std::int32_t, std::vector<std::int32_t>> p_pool;
  std::map<std::int32_t, std::vector<std::int32_t>> q_pool;
  if (config.matcher == Matcher::kExact) {
    for (std::int32_t i = 0; i < n; ++i) {
      const auto q = data.correspondence[i];
      if (q >= 0 && in1(i) && in2(q)) p_pool[data.regions1.labels[i]].push_back(i);
    }
  } else {
    std::map<std::int32_t, std::int32_t> partner;
    for (const auto& m : data.matches) partner[m.u] = m.v;
    for (std::int32_t i = 0; i < n; ++i) {
      const auto it = partner.find(data.regions1.labels[i]);
      if (it != partner.end() && in1(i)) p_pool[it->first].push_back(i);
    }
    for (std::int32_t i = 0; i < n; ++i) {
      const auto v = data.regions2.labels[i];
      if (in2(i)) q_pool[v].push_back(i);
    }
    for (auto it = p_pool.begin(); it != p_pool.end();) {
      const auto q = q_pool.find(partner[it->first]);
      it = (q == q_pool.end() || q->second.empty()) ? p_pool.erase(it) : std::next(it);
    }
  }
  if (p_pool.empty()) {
    throw InvalidArgument("no eligible pixels for strategy '" + config.strategy() + "' on view pair ('" +
                          data.id1 + "', '" + data.id2 + "')");
  }

  Rng rng(config.seed);
  std::vector<std::int32_t> ps;
  ps.reserve(config.pairs);
  if (config.sampler == Sampler::kRandom) {
    std::vector<std::int32_t> all;
    for (const auto& [key, pool] : p_pool) all.insert(all.end(), pool.begin(), pool.end());
    std::sort(all.begin(), all.end());
    draw(all, config.pairs, rng, ps);
  } else {
    const std::size_t k = p_pool.size();
    std::vector<std::size_t> quota(k, config.pairs / k);
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < config.pairs % k; ++i) ++quota[order[i]];
    std::size_t g = 0;
    for (const auto& [key, pool] : p_pool) draw(pool, quota[g++], rng, ps);
  }

  PairBatch batch;
  batch.id1 = data.id1;
  batch.id2 = data.id2;
  batch.strategy = config.strategy();
  batch.seed = config.seed;
  batch.requested = config.pairs;
  batch.crop1 = crop1;
  batch.crop2 = crop2;
  batch.pairs.reserve(ps.size());
  std::map<std::int32_t, std::int32_t> partner;
  for (const auto& m : data.matches) partner[m.u] = m.v;
  for (const auto p : ps) {
    std::int32_t q;
    if (config.matcher == Matcher::kExact) {
      q = data.correspondence[p];
    } else {
      const auto& pool = q_pool.at(partner.at(data.regions1.labels[p]));
      q = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    }
    PixelPair pair;
    pair.p_source = pixel(p);
    pair.q_source = pixel(q);
    crop1.map_pixel(pair.p_source, pair.p);
    crop2.map_pixel(pair.q_source, pair.q);
    batch.pairs.push_back(pair);
  }
  return batch;
}

PairBatch sample_pair_batch(const ViewPairData& data, const SamplingConfig& config) {
  return sample_pair_batch(data, config, CropTransform::identity(data.width, data.height),
                           CropTransform::identity(data.width, data.height));
}

std::uint64_t pair_supply_size(const ViewPairData& data, Matcher matcher) {
  check_data(data);
  if (matcher == Matcher::kExact) {
    return static_cast<std::uint64_t>(
        std::count_if(data.correspondence.begin(), data.correspondence.end(), [](auto q) { return q >= 0; }));
  }
  const auto s1 = regions::region_sizes(data.regions1);
  const auto s2 = regions::region_sizes(data.regions2);
  std::uint64_t total = 0;
  for (const auto& m : data.matches) total += static_cast<std::uint64_t>(s1.at(m.u)) * s2.at(m.v);
  return total;
}

bool verify_pair_admissible(const ViewPairData& data, const PairBatch& batch, const PixelPair& pair,
                            Matcher matcher) {
  const auto inside = [&](Pixel p) { return p.row >= 0 && p.col >= 0 && p.row < data.height && p.col < data.width; };
  if (!inside(pair.p_source) || !inside(pair.q_source)) return false;
  Pixel mapped;
  if (!batch.crop1.map_pixel(pair.p_source, mapped) || mapped != pair.p) return false;
  if (!batch.crop2.map_pixel(pair.q_source, mapped) || mapped != pair.q) return false;
  const std::int32_t pi = pair.p_source.row * data.width + pair.p_source.col;
  const std::int32_t qi = pair.q_source.row * data.width + pair.q_source.col;
  if (matcher == Matcher::kExact) return data.correspondence[pi] == qi;
  const auto u = data.regions1.labels[pi];
  const auto v = data.regions2.labels[qi];
  return std::any_of(data.matches.begin(), data.matches.end(),
                     [&](const matching::RegionMatch& m) { return m.u == u && m.v == v; });
}

}  // namespace regconsist::sampling
