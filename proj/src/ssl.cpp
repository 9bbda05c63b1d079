#include "regconsist/ssl.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>

#include <json.hpp>

#include "regconsist/error.hpp"
#include "regconsist/matching.hpp"
#include "regconsist/parallel.hpp"

namespace regconsist::ssl {

namespace {

struct Standardized {
  MatrixXd x;
  VectorXd mean;
  VectorXd norm;
};

Standardized standardize(const MatrixXd& m, bool center, const char* side) {
  Standardized s;
  s.mean = center ? VectorXd(m.colwise().mean().transpose()) : VectorXd::Zero(m.cols());
  s.x = m.rowwise() - s.mean.transpose();
  s.norm = s.x.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double scale = 1.0 + m.col(j).norm();
    if (!(s.norm(j) > 1e-12 * scale) || !std::isfinite(s.norm(j))) {
      throw NumericalError(std::string("zero-variance feature dimension ") + std::to_string(j) + " in " + side);
    }
    s.x.col(j) /= s.norm(j);
  }
  return s;
}

// Gradient through x_hat = (x - mean) / ||x - mean|| for each column.
MatrixXd standardize_backward(const Standardized& s, const MatrixXd& g, bool center) {
  MatrixXd d(g.rows(), g.cols());
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    const auto xh = s.x.col(j);
    d.col(j) = (g.col(j) - xh * xh.dot(g.col(j))) / s.norm(j);
  }
  if (center) d.rowwise() -= d.colwise().mean();
  return d;
}

}  // namespace

CrossCorrelation cross_correlation(const MatrixXd& p, const MatrixXd& q, bool center) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw DimensionError("cross_correlation: P and Q differ in shape");
  if (p.rows() < 2) throw DimensionError("cross_correlation: need at least 2 rows");
  const auto sp = standardize(p, center, "P");
  const auto sq = standardize(q, center, "Q");
  return {sp.x.transpose() * sq.x, sp.mean, sq.mean, sp.norm, sq.norm};
}

double barlow_loss(const MatrixXd& c, double lambda) {
  if (c.rows() != c.cols()) throw DimensionError("barlow_loss: C must be square");
  double on = 0.0;
  double off = 0.0;
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      if (i == j) {
        on += (1.0 - c(i, i)) * (1.0 - c(i, i));
      } else {
        off += c(i, j) * c(i, j);
      }
    }
  }
  return on + lambda * off;
}

BarlowGradient barlow_backward(const MatrixXd& p, const MatrixXd& q, double lambda, bool center) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw DimensionError("barlow_backward: P and Q differ in shape");
  if (p.rows() < 2) throw DimensionError("barlow_backward: need at least 2 rows");
  const auto sp = standardize(p, center, "P");
  const auto sq = standardize(q, center, "Q");
  const MatrixXd c = sp.x.transpose() * sq.x;
  MatrixXd g = 2.0 * lambda * c;
  g.diagonal() = -2.0 * (VectorXd::Ones(c.rows()) - c.diagonal());
  BarlowGradient out;
  out.loss = barlow_loss(c, lambda);
  out.dp = standardize_backward(sp, sq.x * g.transpose(), center);
  out.dq = standardize_backward(sq, sp.x * g, center);
  return out;
}

// ---- encoder --------------------------------------------------------------

void EncoderConfig::validate() const {
  if (channels.empty()) throw ConfigError("encoder: at least one convolution required");
  for (int c : channels) {
    if (c < 1) throw ConfigError("encoder: channel counts must be >= 1");
  }
  if (feature_dim < 1) throw ConfigError("encoder: feature_dim must be >= 1");
}

namespace {

constexpr int kKernel = 3;
constexpr int kStride = 2;
constexpr int kPad = 1;

int conv_out(int n) { return (n + 2 * kPad - kKernel) / kStride + 1; }

// x is C x (h * w); result is (C * 9) x (ho * wo).
MatrixXd im2col(const MatrixXd& x, int h, int w) {
  const int ho = conv_out(h);
  const int wo = conv_out(w);
  const auto ch = x.rows();
  MatrixXd cols = MatrixXd::Zero(ch * kKernel * kKernel, static_cast<Eigen::Index>(ho) * wo);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index o = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < kKernel; ++ky) {
        const int y = oy * kStride - kPad + ky;
        if (y < 0 || y >= h) continue;
        for (int kx = 0; kx < kKernel; ++kx) {
          const int xx = ox * kStride - kPad + kx;
          if (xx < 0 || xx >= w) continue;
          const Eigen::Index src = static_cast<Eigen::Index>(y) * w + xx;
          for (Eigen::Index c = 0; c < ch; ++c) cols(c * 9 + ky * 3 + kx, o) = x(c, src);
        }
      }
    }
  }
  return cols;
}

MatrixXd col2im(const MatrixXd& cols, Eigen::Index ch, int h, int w) {
  const int ho = conv_out(h);
  const int wo = conv_out(w);
  MatrixXd x = MatrixXd::Zero(ch, static_cast<Eigen::Index>(h) * w);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index o = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < kKernel; ++ky) {
        const int y = oy * kStride - kPad + ky;
        if (y < 0 || y >= h) continue;
        for (int kx = 0; kx < kKernel; ++kx) {
          const int xx = ox * kStride - kPad + kx;
          if (xx < 0 || xx >= w) continue;
          const Eigen::Index dst = static_cast<Eigen::Index>(y) * w + xx;
          for (Eigen::Index c = 0; c < ch; ++c) x(c, dst) += cols(c * 9 + ky * 3 + kx, o);
        }
      }
    }
  }
  return x;
}

std::vector<int> kernel_sizes(const EncoderConfig& config) {
  std::vector<int> k(config.channels.size(), kKernel);
  k.push_back(1);
  return k;
}

}  // namespace

Encoder Encoder::zeros(const EncoderConfig& config) {
  config.validate();
  Encoder enc;
  enc.config = config;
  int in = 3;
  for (int out : config.channels) {
    enc.layers.push_back({MatrixXd::Zero(out, in * kKernel * kKernel), VectorXd::Zero(out)});
    in = out;
  }
  enc.layers.push_back({MatrixXd::Zero(config.feature_dim, in), VectorXd::Zero(config.feature_dim)});
  return enc;
}

Encoder Encoder::random_init(const EncoderConfig& config, std::uint64_t seed) {
  Encoder enc = zeros(config);
  std::mt19937_64 rng(seed);
  const auto ks = kernel_sizes(config);
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    auto& w = enc.layers[l].weight;
    const double k2 = static_cast<double>(ks[l]) * ks[l];
    const double fan_in = static_cast<double>(w.cols());
    const double fan_out = static_cast<double>(w.rows()) * k2;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = dist(rng);
    }
  }
  round_to_float(enc.layers);
  return enc;
}

MatrixXd image_to_input(const RgbImage& rgb) {
  if (rgb.channels() != 3) throw DimensionError("encoder input must have 3 channels");
  const auto n = static_cast<Eigen::Index>(rgb.pixel_count());
  MatrixXd x(3, n);
  const auto data = rgb.data();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) x(c, i) = (data[static_cast<std::size_t>(i) * 3 + c] / 255.0 - 0.5) / 0.25;
  }
  return x;
}

FeatureMap encoder_forward(const Encoder& enc, const RgbImage& rgb, EncoderCache* cache) {
  return encoder_forward(enc, image_to_input(rgb), rgb.height(), rgb.width(), cache);
}

FeatureMap encoder_forward(const Encoder& enc, const MatrixXd& input, int height, int width, EncoderCache* cache) {
  if (enc.layers.size() != enc.config.channels.size() + 1) throw DimensionError("encoder: layer count mismatch");
  if (input.rows() * 9 != enc.layers.front().weight.cols() || input.cols() != static_cast<Eigen::Index>(height) * width ||
      height < 1 || width < 1) {
    throw DimensionError("encoder: input shape does not match the model");
  }
  if (cache) *cache = {};
  MatrixXd x = input;
  int h = height;
  int w = width;
  const std::size_t n_conv = enc.config.channels.size();
  for (std::size_t l = 0; l < n_conv; ++l) {
    MatrixXd cols = im2col(x, h, w);
    if (cache) {
      cache->heights.push_back(h);
      cache->widths.push_back(w);
    }
    h = conv_out(h);
    w = conv_out(w);
    x = (enc.layers[l].weight * cols).colwise() + enc.layers[l].bias;
    x = x.array().tanh().matrix();
    if (cache) {
      cache->columns.push_back(std::move(cols));
      cache->activations.push_back(x);
    }
  }
  if (cache) {
    cache->heights.push_back(h);
    cache->widths.push_back(w);
  }
  FeatureMap out;
  out.height = h;
  out.width = w;
  out.values = (enc.layers.back().weight * x).colwise() + enc.layers.back().bias;
  return out;
}

Params encoder_backward(const Encoder& enc, const EncoderCache& cache, const MatrixXd& dfeatures) {
  const std::size_t n_conv = enc.config.channels.size();
  if (cache.activations.size() != n_conv) throw DimensionError("encoder_backward: cache is empty");
  const MatrixXd& last = cache.activations.back();
  if (dfeatures.rows() != enc.layers.back().weight.rows() || dfeatures.cols() != last.cols()) {
    throw DimensionError("encoder_backward: gradient shape does not match the feature map");
  }
  Params grads(enc.layers.size());
  grads.back().weight = dfeatures * last.transpose();
  grads.back().bias = dfeatures.rowwise().sum();
  MatrixXd da = enc.layers.back().weight.transpose() * dfeatures;
  for (std::size_t l = n_conv; l-- > 0;) {
    const MatrixXd& a = cache.activations[l];
    const MatrixXd dz = (da.array() * (1.0 - a.array().square())).matrix();
    grads[l].weight = dz * cache.columns[l].transpose();
    grads[l].bias = dz.rowwise().sum();
    if (l > 0) {
      const MatrixXd dcols = enc.layers[l].weight.transpose() * dz;
      da = col2im(dcols, cache.activations[l - 1].rows(), cache.heights[l], cache.widths[l]);
    }
  }
  return grads;
}

// ---- parameter utilities --------------------------------------------------

Params zeros_like(const Params& params) {
  Params out;
  out.reserve(params.size());
  for (const auto& l : params) {
    out.push_back({MatrixXd::Zero(l.weight.rows(), l.weight.cols()), VectorXd::Zero(l.bias.size())});
  }
  return out;
}

void accumulate(Params& into, const Params& grads) {
  if (into.size() != grads.size()) throw DimensionError("accumulate: parameter lists differ");
  for (std::size_t i = 0; i < into.size(); ++i) {
    into[i].weight += grads[i].weight;
    into[i].bias += grads[i].bias;
  }
}

double global_norm(const Params& params) {
  double s = 0.0;
  for (const auto& l : params) s += l.weight.squaredNorm() + l.bias.squaredNorm();
  return std::sqrt(s);
}

double clip_global_norm(Params& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& l : grads) {
      l.weight *= f;
      l.bias *= f;
    }
  }
  return norm;
}

void round_to_float(Params& params) {
  auto r = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  for (auto& l : params) {
    l.weight = l.weight.unaryExpr(r);
    l.bias = l.bias.unaryExpr(r);
  }
}

void sgd_step(Params& params, const Params& grads, double lr, double weight_decay) {
  if (params.size() != grads.size()) throw DimensionError("sgd_step: parameter lists differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].weight -= lr * (grads[i].weight + weight_decay * params[i].weight);
    params[i].bias -= lr * (grads[i].bias + weight_decay * params[i].bias);
  }
  round_to_float(params);
}

// ---- checkpoints ----------------------------------------------------------

void append_tensors(io::TensorArchive& archive, const std::string& prefix, const Params& params,
                    const std::vector<int>& ks) {
  if (ks.size() != params.size()) throw DimensionError("append_tensors: kernel size list mismatch");
  for (std::size_t l = 0; l < params.size(); ++l) {
    const auto& w = params[l].weight;
    const auto k2 = static_cast<Eigen::Index>(ks[l]) * ks[l];
    io::NamedTensor wt;
    wt.name = prefix + std::to_string(l) + ".weight";
    wt.shape = {static_cast<std::uint32_t>(w.rows()), static_cast<std::uint32_t>(w.cols() / k2),
                static_cast<std::uint32_t>(ks[l]), static_cast<std::uint32_t>(ks[l])};
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) wt.values.push_back(static_cast<float>(w(r, c)));
    }
    io::NamedTensor bt;
    bt.name = prefix + std::to_string(l) + ".bias";
    bt.shape = {static_cast<std::uint32_t>(params[l].bias.size())};
    for (Eigen::Index i = 0; i < params[l].bias.size(); ++i) bt.values.push_back(static_cast<float>(params[l].bias(i)));
    archive.tensors.push_back(std::move(wt));
    archive.tensors.push_back(std::move(bt));
  }
}

Params read_tensors(const io::TensorArchive& archive, const std::string& prefix, std::size_t count) {
  Params params;
  for (std::size_t l = 0; l < count; ++l) {
    const auto& wt = archive.get(prefix + std::to_string(l) + ".weight");
    const auto& bt = archive.get(prefix + std::to_string(l) + ".bias");
    if (wt.shape.size() != 4 || bt.shape.size() != 1 || bt.shape[0] != wt.shape[0]) {
      throw FormatError("checkpoint tensor '" + wt.name + "' has an unexpected shape");
    }
    const Eigen::Index rows = wt.shape[0];
    const Eigen::Index cols = static_cast<Eigen::Index>(wt.shape[1]) * wt.shape[2] * wt.shape[3];
    Layer layer{MatrixXd(rows, cols), VectorXd(rows)};
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) layer.weight(r, c) = wt.values[static_cast<std::size_t>(r * cols + c)];
      layer.bias(r) = bt.values[static_cast<std::size_t>(r)];
    }
    params.push_back(std::move(layer));
  }
  return params;
}

io::TensorArchive encoder_archive(const Encoder& enc) {
  io::TensorArchive archive;
  archive.metadata = nlohmann::json{{"encoder", {{"channels", enc.config.channels}, {"feature_dim", enc.config.feature_dim}}}}.dump();
  append_tensors(archive, "encoder.", enc.layers, kernel_sizes(enc.config));
  return archive;
}

Encoder encoder_from_archive(const io::TensorArchive& archive) {
  EncoderConfig config;
  try {
    const auto meta = nlohmann::json::parse(archive.metadata).at("encoder");
    config.channels = meta.at("channels").get<std::vector<int>>();
    config.feature_dim = meta.at("feature_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata has no usable encoder section: ") + e.what());
  }
  Encoder enc = Encoder::zeros(config);
  Params loaded = read_tensors(archive, "encoder.", enc.layers.size());
  for (std::size_t l = 0; l < loaded.size(); ++l) {
    if (loaded[l].weight.rows() != enc.layers[l].weight.rows() || loaded[l].weight.cols() != enc.layers[l].weight.cols()) {
      throw FormatError("checkpoint layer " + std::to_string(l) + " does not match the encoder config");
    }
  }
  enc.layers = std::move(loaded);
  return enc;
}

// ---- pre-training ---------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lambda > 0.0) || !(grad_clip_norm > 0.0) || !(base_lr > 0.0) || !(final_lr_factor >= 1.0)) {
    throw ConfigError("ssl: lambda, grad_clip_norm and base_lr must be positive, final_lr_factor >= 1");
  }
  if (total_iters < 1 || warmup_iters < 0 || warmup_iters >= total_iters) {
    throw ConfigError("ssl: require 0 <= warmup_iters < total_iters");
  }
  if (view_pairs_per_step < 1) throw ConfigError("ssl: view_pairs_per_step must be >= 1");
  encoder.validate();
}

Encoder initial_encoder(const TrainConfig& config) {
  return Encoder::random_init(config.encoder, sampling::mix_seed(config.seed, 0x1417));
}

double pretrain_lr(const TrainConfig& config, int iter) {
  if (iter < config.warmup_iters) return config.base_lr * iter / config.warmup_iters;
  const double min_lr = config.base_lr / config.final_lr_factor;
  const int span = config.total_iters - 1 - config.warmup_iters;
  if (span <= 0) return config.base_lr;
  const double t = std::min(1.0, static_cast<double>(iter - config.warmup_iters) / span);
  return min_lr + (config.base_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

struct PairWork {
  bool ok = false;
  EncoderCache cache1;
  EncoderCache cache2;
  FeatureMap f1;
  FeatureMap f2;
  std::vector<Eigen::Index> cells1;
  std::vector<Eigen::Index> cells2;
};

}  // namespace

PretrainResult pretrain(const PretrainData& data, const sampling::SamplingConfig& sampling_config,
                        const TrainConfig& config, const sampling::AugmentParams& augment, int jobs,
                        const ProgressFn& progress) {
  config.validate();
  sampling_config.validate();
  augment.validate();
  if (data.view_pairs.empty()) throw InvalidArgument("pretrain: no view pairs");
  if (data.regions.size() != data.frames.size()) throw InvalidArgument("pretrain: need one region map per frame");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.frames.size(); ++i) index[data.frames[i].id] = i;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& vp : data.view_pairs) {
    const auto a = index.find(vp.id1);
    const auto b = index.find(vp.id2);
    if (a == index.end() || b == index.end()) {
      throw InvalidArgument("pretrain: view pair references unknown frame '" + (a == index.end() ? vp.id1 : vp.id2) + "'");
    }
    pairs.emplace_back(a->second, b->second);
  }

  // Keep the view pairs the matcher can draw from at all.
  std::vector<char> usable(pairs.size(), 1);
  if (sampling_config.matcher == sampling::Matcher::kRegion) {
    parallel_for(pairs.size(), jobs, [&](std::size_t i) {
      const auto [a, b] = pairs[i];
      const auto warped = matching::warp_region_map(data.regions[a], data.frames[a], data.frames[b], data.camera,
                                                    data.epsilon_rel);
      usable[i] = !matching::match_regions(matching::region_iou_table(warped, data.regions[b]), data.tau_region).empty();
    });
  }
  std::vector<std::pair<std::size_t, std::size_t>> kept;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (usable[i]) kept.push_back(pairs[i]);
  }
  if (kept.empty()) {
    throw InvalidArgument("pretrain: no view pair has a region match for strategy '" + sampling_config.strategy() + "'");
  }
  pairs = std::move(kept);

  PretrainResult result;
  result.usable_view_pairs = pairs.size();
  result.encoder = initial_encoder(config);
  const int k = config.view_pairs_per_step;
  const int in_size = augment.crop_size;

  for (int iter = 0; iter < config.total_iters; ++iter) {
    std::vector<PairWork> work(static_cast<std::size_t>(k));
    parallel_for(work.size(), jobs, [&](std::size_t slot) {
      sampling::Rng rng(sampling::mix_seed(config.seed, static_cast<std::uint64_t>(iter) + 1, slot));
      const auto [i1, i2] = pairs[std::uniform_int_distribution<std::size_t>(0, pairs.size() - 1)(rng)];
      const Frame& fr1 = data.frames[i1];
      const Frame& fr2 = data.frames[i2];
      const auto vdata = sampling::build_view_pair_data(fr1, fr2, data.camera, data.regions[i1], data.regions[i2],
                                                        data.epsilon_rel, data.tau_region);
      sampling::SamplingConfig sc = sampling_config;
      sc.pairs = sampling_config.pairs / k + (slot < sampling_config.pairs % k ? 1 : 0);
      if (sc.pairs == 0) return;
      PairWork& pw = work[slot];
      for (int attempt = 0; attempt < 10 && !pw.ok; ++attempt) {
        auto a1 = sampling::augment(fr1, sampling::Profile::kStrong, rng, augment);
        auto a2 = sampling::augment(fr2, sampling::Profile::kWeak, rng, augment);
        sc.seed = rng();
        PairBatch batch;
        try {
          batch = sampling::sample_pair_batch(vdata, sc, a1.crop, a2.crop);
        } catch (const InvalidArgument&) {
          continue;
        }
        pw.f1 = encoder_forward(result.encoder, a1.rgb, &pw.cache1);
        pw.f2 = encoder_forward(result.encoder, a2.rgb, &pw.cache2);
        for (const auto& p : batch.pairs) {
          pw.cells1.push_back(pw.f1.cell_for(p.p.row, p.p.col, in_size, in_size));
          pw.cells2.push_back(pw.f2.cell_for(p.q.row, p.q.col, in_size, in_size));
        }
        pw.ok = true;
      }
    });

    Eigen::Index rows = 0;
    for (const auto& pw : work) {
      if (pw.ok) {
        rows += static_cast<Eigen::Index>(pw.cells1.size());
      } else {
        ++result.skipped_view_pairs;
      }
    }
    if (rows < 2) throw NumericalError("pretrain: fewer than 2 pixel pairs at iteration " + std::to_string(iter));
    const Eigen::Index d = config.encoder.feature_dim;
    MatrixXd p(rows, d);
    MatrixXd q(rows, d);
    Eigen::Index r = 0;
    for (const auto& pw : work) {
      if (!pw.ok) continue;
      for (std::size_t b = 0; b < pw.cells1.size(); ++b, ++r) {
        p.row(r) = pw.f1.values.col(pw.cells1[b]).transpose();
        q.row(r) = pw.f2.values.col(pw.cells2[b]).transpose();
      }
    }
    BarlowGradient g;
    try {
      g = barlow_backward(p, q, config.lambda, config.center);
    } catch (const NumericalError& e) {
      throw NumericalError("pretrain: " + std::string(e.what()) + " at iteration " + std::to_string(iter));
    }
    if (!std::isfinite(g.loss)) throw NumericalError("pretrain: non-finite loss at iteration " + std::to_string(iter));

    std::vector<Params> slot_grads(work.size());
    std::vector<Eigen::Index> offsets(work.size(), 0);
    for (std::size_t s = 0, off = 0; s < work.size(); ++s) {
      offsets[s] = static_cast<Eigen::Index>(off);
      if (work[s].ok) off += work[s].cells1.size();
    }
    parallel_for(work.size(), jobs, [&](std::size_t s) {
      const PairWork& pw = work[s];
      if (!pw.ok) return;
      MatrixXd d1 = MatrixXd::Zero(d, pw.f1.values.cols());
      MatrixXd d2 = MatrixXd::Zero(d, pw.f2.values.cols());
      for (std::size_t b = 0; b < pw.cells1.size(); ++b) {
        d1.col(pw.cells1[b]) += g.dp.row(offsets[s] + static_cast<Eigen::Index>(b)).transpose();
        d2.col(pw.cells2[b]) += g.dq.row(offsets[s] + static_cast<Eigen::Index>(b)).transpose();
      }
      slot_grads[s] = encoder_backward(result.encoder, pw.cache1, d1);
      accumulate(slot_grads[s], encoder_backward(result.encoder, pw.cache2, d2));
    });
    Params grads = zeros_like(result.encoder.layers);
    for (const auto& sg : slot_grads) {
      if (!sg.empty()) accumulate(grads, sg);
    }
    if (!std::isfinite(global_norm(grads))) {
      throw NumericalError("pretrain: non-finite gradient at iteration " + std::to_string(iter));
    }
    clip_global_norm(grads, config.grad_clip_norm);
    const double lr = pretrain_lr(config, iter);
    sgd_step(result.encoder.layers, grads, lr);
    result.log.push_back({iter, g.loss, lr});
    if (progress) progress(result.log.back());
  }
  return result;
}

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path) {
  std::string text = "iter,loss,lr\n";
  char buf[96];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", r.iter, r.loss, r.lr);
    text += buf;
  }
  io::write_text(path, text);
}

}  // namespace regconsist::ssl
