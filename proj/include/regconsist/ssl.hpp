#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "regconsist/camera.hpp"
#include "regconsist/frame.hpp"
#include "regconsist/geometry.hpp"
#include "regconsist/io.hpp"
#include "regconsist/regions.hpp"
#include "regconsist/sampling.hpp"

namespace regconsist::ssl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Pair-loss cross-correlation. Column j of P is mean-centred (when `center`)
// and scaled to unit norm, then C = P^T Q.
struct CrossCorrelation {
  MatrixXd c;
  VectorXd mean_p;
  VectorXd mean_q;
  VectorXd norm_p;  // norms of the centred columns
  VectorXd norm_q;
};

// P, Q are |S| x D. Throws NumericalError naming the dimension if a column has zero variance.
CrossCorrelation cross_correlation(const MatrixXd& p, const MatrixXd& q, bool center = true);

inline constexpr double kDefaultLambda = 0.005;

// sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2
double barlow_loss(const MatrixXd& c, double lambda = kDefaultLambda);

struct BarlowGradient {
  double loss = 0.0;
  MatrixXd dp;
  MatrixXd dq;
};

BarlowGradient barlow_backward(const MatrixXd& p, const MatrixXd& q, double lambda = kDefaultLambda,
                               bool center = true);

// ---- encoder --------------------------------------------------------------

struct EncoderConfig {
  std::vector<int> channels{16, 32, 32};  // 3x3 stride-2 convolutions, tanh after each
  int feature_dim = 32;                   // 1x1 projector output

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// Dense layer over im2col columns: out = weight * in + bias.
struct Layer {
  MatrixXd weight;  // (out, in * k * k)
  VectorXd bias;
};

using Params = std::vector<Layer>;

struct Encoder {
  EncoderConfig config;
  Params layers;  // convolutions, then the projector

  // Xavier-uniform weights and zero biases, rounded to f32.
  static Encoder random_init(const EncoderConfig& config, std::uint64_t seed);
  static Encoder zeros(const EncoderConfig& config);
};

// D x (H * W), one column per cell in row-major order.
struct FeatureMap {
  int height = 0;
  int width = 0;
  MatrixXd values;

  // Cell covering input pixel (row, col) of an input_h x input_w image.
  Eigen::Index cell_for(int row, int col, int input_h, int input_w) const {
    return static_cast<Eigen::Index>(row * height / input_h) * width + col * width / input_w;
  }
};

struct EncoderCache {
  std::vector<MatrixXd> columns;      // im2col input of each convolution
  std::vector<MatrixXd> activations;  // tanh output of each convolution
  std::vector<int> heights;           // input height of each convolution, then final
  std::vector<int> widths;
};

// (x / 255 - 0.5) / 0.25 per channel, laid out 3 x (H * W).
MatrixXd image_to_input(const RgbImage& rgb);

FeatureMap encoder_forward(const Encoder& enc, const RgbImage& rgb, EncoderCache* cache = nullptr);
FeatureMap encoder_forward(const Encoder& enc, const MatrixXd& input, int height, int width,
                           EncoderCache* cache = nullptr);
// Parameter gradients for dL/dfeatures (same shape as FeatureMap::values).
Params encoder_backward(const Encoder& enc, const EncoderCache& cache, const MatrixXd& dfeatures);

// ---- parameter utilities --------------------------------------------------

Params zeros_like(const Params& params);
void accumulate(Params& into, const Params& grads);
double global_norm(const Params& params);
// Scales grads so their global norm is at most max_norm. Returns the pre-clip norm.
double clip_global_norm(Params& grads, double max_norm);
// p -= lr * (g + weight_decay * p), then round to f32.
void sgd_step(Params& params, const Params& grads, double lr, double weight_decay = 0.0);
void round_to_float(Params& params);

// ---- checkpoints ----------------------------------------------------------

void append_tensors(io::TensorArchive& archive, const std::string& prefix, const Params& params,
                    const std::vector<int>& kernel_sizes);
Params read_tensors(const io::TensorArchive& archive, const std::string& prefix, std::size_t count);

io::TensorArchive encoder_archive(const Encoder& enc);
Encoder encoder_from_archive(const io::TensorArchive& archive);

// ---- pre-training ---------------------------------------------------------

struct TrainConfig {
  double lambda = kDefaultLambda;
  double grad_clip_norm = 5.0;
  double base_lr = 0.01;
  double final_lr_factor = 10.0;  // cosine decays base_lr to base_lr / factor
  int warmup_iters = 100;
  int total_iters = 2000;
  int view_pairs_per_step = 16;
  bool center = true;
  std::uint64_t seed = 0;
  EncoderConfig encoder;

  void validate() const;
};

// The encoder pre-training starts from; also the random-init baseline.
Encoder initial_encoder(const TrainConfig& config);

// Linear warm-up from 0 to base_lr, then cosine decay reaching base_lr / factor at iter total_iters - 1.
double pretrain_lr(const TrainConfig& config, int iter);

struct LossRecord {
  int iter = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct PretrainData {
  CameraModel camera;
  std::vector<Frame> frames;
  std::vector<regions::RegionMap> regions;  // one per frame
  std::vector<geometry::ViewPair> view_pairs;
  double epsilon_rel = geometry::kDefaultEpsilonRel;
  double tau_region = 0.5;
};

struct PretrainResult {
  Encoder encoder;
  std::vector<LossRecord> log;
  std::size_t usable_view_pairs = 0;     // view pairs the matcher can sample from
  std::uint64_t skipped_view_pairs = 0;  // draws with no eligible pixels after augmentation
};

using ProgressFn = std::function<void(const LossRecord&)>;

// Each step draws view_pairs_per_step view pairs, augments view 1 strongly and
// view 2 weakly, samples sampling.pairs pairs split over them, and takes one
// SGD step on the Barlow loss of all gathered features.
PretrainResult pretrain(const PretrainData& data, const sampling::SamplingConfig& sampling,
                        const TrainConfig& config, const sampling::AugmentParams& augment, int jobs = 1,
                        const ProgressFn& progress = {});

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path);

}  // namespace regconsist::ssl
