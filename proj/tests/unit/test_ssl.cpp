#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "regconsist/error.hpp"
#include "regconsist/io.hpp"
#include "regconsist/ssl.hpp"
#include "regconsist/synthworld.hpp"
#include "test_util.hpp"

using namespace regconsist;
using namespace regconsist::ssl;

namespace {

MatrixXd random_matrix(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Cross-correlation evaluated entry by entry, with optional mean subtraction.
MatrixXd naive_correlation(const MatrixXd& p, const MatrixXd& q, bool center) {
  const auto n = p.rows();
  const auto d = p.cols();
  auto prep = [&](const MatrixXd& x) {
    MatrixXd y = x;
    for (Eigen::Index j = 0; j < d; ++j) {
      double mean = 0.0;
      if (center) {
        for (Eigen::Index b = 0; b < n; ++b) mean += x(b, j);
        mean /= static_cast<double>(n);
      }
      for (Eigen::Index b = 0; b < n; ++b) y(b, j) = x(b, j) - mean;
    }
    return y;
  };
  const MatrixXd a = prep(p), b = prep(q);
  MatrixXd c(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      double num = 0.0, sa = 0.0, sb = 0.0;
      for (Eigen::Index k = 0; k < n; ++k) {
        num += a(k, i) * b(k, j);
        sa += a(k, i) * a(k, i);
        sb += b(k, j) * b(k, j);
      }
      c(i, j) = num / (std::sqrt(sa) * std::sqrt(sb));
    }
  }
  return c;
}

double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central differences of f over every entry of x.
template <typename F>
MatrixXd numeric_gradient(MatrixXd x, F f, double h) {
  MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.channels = {4, 5, 3};
  c.feature_dim = 3;
  return c;
}

RgbImage random_image(std::mt19937_64& rng, int w, int h) {
  RgbImage img(w, h, 3);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& v : img.storage()) v = static_cast<std::uint8_t>(d(rng));
  return img;
}

Encoder random_biases(Encoder enc, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& l : enc.layers) {
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = u(rng);
  }
  return enc;
}

// Two frames of one synthetic room, the second shifted sideways, with GT labels as regions.
PretrainData small_pretrain_data(int size) {
  synthworld::WorldOptions opts;
  opts.seed = 4;
  opts.camera = testutil::small_camera(size, size);
  const auto world = synthworld::build_world(opts);
  PretrainData data;
  data.camera = opts.camera;
  for (int k = 0; k < 3; ++k) {
    Pose p = world.poses[0];
    p.translation += 0.15 * k * p.rotation.col(0);
    data.frames.push_back(synthworld::render_view(world.scene, opts.camera, p, "f" + std::to_string(k)));
    data.regions.push_back(regions::region_map_from_labels(*data.frames.back().labels));
  }
  data.view_pairs = {{"f0", "f1", 0.8}, {"f1", "f2", 0.8}, {"f0", "f2", 0.7}};
  return data;
}

}  // namespace

TEST(CrossCorrelation, SelfCorrelationOfOrthogonalColumnsIsIdentity) {
  MatrixXd p(4, 3);
  p << 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1;
  const auto cc = cross_correlation(p, p);
  EXPECT_LT((cc.c - MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(barlow_loss(cc.c, 0.3), 0.0, 1e-20);
  const auto g = barlow_backward(p, p, 0.005);
  EXPECT_LT(std::sqrt(g.dp.squaredNorm() + g.dq.squaredNorm()), 1e-8);
}

TEST(CrossCorrelation, AntiCorrelationIsMinusOne) {
  std::mt19937_64 rng(1);
  const MatrixXd p = random_matrix(rng, 9, 1);
  const auto cc = cross_correlation(p, -p);
  EXPECT_NEAR(cc.c(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(barlow_loss(cc.c), 4.0, 1e-10);
}

TEST(CrossCorrelation, MatchesNaiveDoubleLoop) {
  std::mt19937_64 rng(2);
  for (bool center : {true, false}) {
    for (int trial = 0; trial < 20; ++trial) {
      const MatrixXd p = random_matrix(rng, 8, 3) + MatrixXd::Constant(8, 3, 0.7);
      const MatrixXd q = random_matrix(rng, 8, 3);
      const auto cc = cross_correlation(p, q, center);
      EXPECT_LT((cc.c - naive_correlation(p, q, center)).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_LE(cc.c.cwiseAbs().maxCoeff(), 1.0 + 1e-6);
    }
  }
}

TEST(CrossCorrelation, ZeroVarianceColumnNamesDimension) {
  std::mt19937_64 rng(3);
  MatrixXd p = random_matrix(rng, 6, 4);
  p.col(2).setConstant(1.5);
  try {
    cross_correlation(p, random_matrix(rng, 6, 4));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cross_correlation(random_matrix(rng, 1, 2), random_matrix(rng, 1, 2)), std::exception);
}

TEST(BarlowLoss, ClosedForms) {
  EXPECT_EQ(barlow_loss(MatrixXd::Identity(5, 5), 7.0), 0.0);
  EXPECT_EQ(barlow_loss(MatrixXd::Constant(1, 1, -1.0)), 4.0);
  MatrixXd c(2, 2);
  c << 1, 0.5, 0.5, 1;
  EXPECT_NEAR(barlow_loss(c, 0.005), 0.0025, 1e-15);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) EXPECT_GT(barlow_loss(random_matrix(rng, 3, 3)), 0.0);
}

TEST(BarlowBackward, MatchesFiniteDifferencesOnRandomShapes) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> batch(4, 32), dim(1, 8);
  std::uniform_real_distribution<double> lam(0.001, 0.5);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = batch(rng), d = dim(rng);
    const double lambda = lam(rng);
    const bool center = trial % 4 != 0;
    const MatrixXd p = random_matrix(rng, n, d);
    const MatrixXd q = random_matrix(rng, n, d) + 0.5 * p;
    const auto g = barlow_backward(p, q, lambda, center);
    EXPECT_NEAR(g.loss, barlow_loss(cross_correlation(p, q, center).c, lambda), 1e-12);
    const auto fp = [&](const MatrixXd& x) { return barlow_loss(cross_correlation(x, q, center).c, lambda); };
    const auto fq = [&](const MatrixXd& x) { return barlow_loss(cross_correlation(p, x, center).c, lambda); };
    const MatrixXd np = numeric_gradient(p, fp, 1e-4);
    const MatrixXd nq = numeric_gradient(q, fq, 1e-4);
    // Entries far below the largest gradient are compared against a floor scaled to it.
    const double floor = 1e-3 * std::max(np.cwiseAbs().maxCoeff(), nq.cwiseAbs().maxCoeff());
    double worst = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      worst = std::max(worst, rel_error(g.dp.data()[i], np.data()[i], floor));
      worst = std::max(worst, rel_error(g.dq.data()[i], nq.data()[i], floor));
    }
    EXPECT_LT(worst, 1e-4) << "n=" << n << " d=" << d;
  }
}

TEST(BarlowBackward, ColumnScalingInvariance) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    MatrixXd p = random_matrix(rng, 16, 4);
    const MatrixXd q = random_matrix(rng, 16, 4) + p;
    const auto g = barlow_backward(p, q);
    const int j = trial % 4;
    MatrixXd scaled = p;
    scaled.col(j) *= 2.0;
    EXPECT_NEAR(barlow_backward(scaled, q).loss, g.loss, 1e-12);
    // Scaling about the column mean leaves the loss unchanged, so the gradient has no component along it.
    const VectorXd dir = (p.col(j).array() - p.col(j).mean()).matrix();
    EXPECT_LT(std::abs(g.dp.col(j).dot(dir)), 1e-10 * (1 + g.dp.col(j).norm() * dir.norm()));
  }
}

TEST(Encoder, ZeroWeightsGiveBiasOutput) {
  Encoder enc = Encoder::zeros(tiny_config());
  enc.layers.back().bias << 0.25, -1.0, 3.0;
  std::mt19937_64 rng(7);
  const FeatureMap f = encoder_forward(enc, random_image(rng, 16, 16));
  for (Eigen::Index c = 0; c < f.values.cols(); ++c) {
    EXPECT_EQ(f.values(0, c), 0.25);
    EXPECT_EQ(f.values(1, c), -1.0);
    EXPECT_EQ(f.values(2, c), 3.0);
  }
}

TEST(Encoder, ShapeArithmetic) {
  const Encoder enc = Encoder::random_init(EncoderConfig{}, 1);
  std::mt19937_64 rng(8);
  const FeatureMap f = encoder_forward(enc, random_image(rng, 64, 64));
  EXPECT_EQ(f.height, 8);
  EXPECT_EQ(f.width, 8);
  EXPECT_EQ(f.values.rows(), 32);
  EXPECT_EQ(f.values.cols(), 64);
  EXPECT_EQ(f.cell_for(63, 63, 64, 64), 63);
  EXPECT_EQ(f.cell_for(8, 15, 64, 64), 8 + 1);
  const FeatureMap odd = encoder_forward(enc, random_image(rng, 30, 18));
  EXPECT_EQ(odd.height, 3);
  EXPECT_EQ(odd.width, 4);
  EXPECT_THROW(encoder_forward(enc, MatrixXd::Zero(2, 64), 8, 8), DimensionError);
}

TEST(Encoder, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 3; ++trial) {
    const Encoder enc = random_biases(Encoder::random_init(tiny_config(), 10 + trial), rng);
    const MatrixXd input = image_to_input(random_image(rng, 8, 8));
    EncoderCache cache;
    const FeatureMap f = encoder_forward(enc, input, 8, 8, &cache);
    const MatrixXd weights = random_matrix(rng, static_cast<int>(f.values.rows()), static_cast<int>(f.values.cols()));
    const Params grads = encoder_backward(enc, cache, weights);
    ASSERT_EQ(grads.size(), enc.layers.size());

    Encoder probe = enc;
    const auto loss = [&]() { return encoder_forward(probe, input, 8, 8).values.cwiseProduct(weights).sum(); };
    const double h = 1e-5;
    double worst = 0.0, largest = 0.0;
    std::vector<std::pair<double, double>> all;
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
      auto visit = [&](double& x, double analytic) {
        const double keep = x;
        x = keep + h;
        const double up = loss();
        x = keep - h;
        const double down = loss();
        x = keep;
        all.emplace_back(analytic, (up - down) / (2 * h));
        largest = std::max(largest, std::abs(analytic));
      };
      for (Eigen::Index i = 0; i < probe.layers[l].weight.size(); ++i) {
        visit(probe.layers[l].weight.data()[i], grads[l].weight.data()[i]);
      }
      for (Eigen::Index i = 0; i < probe.layers[l].bias.size(); ++i) visit(probe.layers[l].bias[i], grads[l].bias[i]);
    }
    for (const auto& [a, n] : all) worst = std::max(worst, rel_error(a, n, 1e-3 * largest));
    EXPECT_LT(worst, 1e-3) << "trial " << trial;
  }
}

TEST(Encoder, InputNormalisation) {
  RgbImage img(1, 1, 3);
  img.at(0, 0, 0) = 0;
  img.at(0, 0, 1) = 255;
  img.at(0, 0, 2) = 51;
  const MatrixXd x = image_to_input(img);
  EXPECT_DOUBLE_EQ(x(0, 0), -2.0);
  EXPECT_DOUBLE_EQ(x(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(x(2, 0), (0.2 - 0.5) / 0.25);
}

TEST(Schedule, WarmupThenCosineToTenth) {
  TrainConfig c;
  c.base_lr = 0.01;
  c.warmup_iters = 100;
  c.total_iters = 2000;
  EXPECT_EQ(pretrain_lr(c, 0), 0.0);
  EXPECT_DOUBLE_EQ(pretrain_lr(c, 50), 0.005);
  EXPECT_DOUBLE_EQ(pretrain_lr(c, 100), 0.01);
  EXPECT_NEAR(pretrain_lr(c, 1999), 0.001, 1e-15);
  for (int i = 101; i < 2000; ++i) EXPECT_LE(pretrain_lr(c, i), pretrain_lr(c, i - 1));
  c.warmup_iters = 2000;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Params, ClippingBoundsGlobalNorm) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    Params g = Encoder::random_init(tiny_config(), trial).layers;
    for (auto& l : g) {
      l.weight = random_matrix(rng, static_cast<int>(l.weight.rows()), static_cast<int>(l.weight.cols())) * trial;
      l.bias = random_matrix(rng, static_cast<int>(l.bias.size()), 1).col(0);
    }
    const double before = global_norm(g);
    const double reported = clip_global_norm(g, 5.0);
    EXPECT_DOUBLE_EQ(reported, before);
    EXPECT_LE(global_norm(g), 5.0 + 1e-9);
    if (before <= 5.0) {
      EXPECT_DOUBLE_EQ(global_norm(g), before);
    }
  }
}

TEST(Params, SgdStepRoundsToFloat) {
  Params p = Encoder::random_init(tiny_config(), 3).layers;
  Params g = zeros_like(p);
  g[0].weight.setConstant(1.0 / 3.0);
  const double w0 = p[0].weight(0, 0);
  sgd_step(p, g, 0.1, 0.0);
  EXPECT_EQ(p[0].weight(0, 0), static_cast<double>(static_cast<float>(w0 - 0.1 / 3.0)));
  for (const auto& l : p) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) {
      EXPECT_EQ(l.weight.data()[i], static_cast<double>(static_cast<float>(l.weight.data()[i])));
    }
  }
  Params acc = zeros_like(p);
  accumulate(acc, g);
  accumulate(acc, g);
  EXPECT_DOUBLE_EQ(acc[0].weight(1, 1), 2.0 / 3.0);
}

TEST(Checkpoint, ReloadGivesBitIdenticalFeatures) {
  testutil::TempDir dir("ssl");
  std::mt19937_64 rng(12);
  Encoder enc = Encoder::random_init(EncoderConfig{}, 5);
  Params g = zeros_like(enc.layers);
  for (auto& l : g) l.weight.setConstant(0.01);
  sgd_step(enc.layers, g, 0.3);
  io::save_archive(encoder_archive(enc), dir / "e.ckpt");
  const Encoder back = encoder_from_archive(io::load_archive(dir / "e.ckpt"));
  EXPECT_EQ(back.config, enc.config);
  const RgbImage img = random_image(rng, 32, 32);
  EXPECT_EQ(encoder_forward(back, img).values, encoder_forward(enc, img).values);
}

TEST(Pretrain, TenIterationSmokeRun) {
  testutil::TempDir dir("ssl");
  const PretrainData data = small_pretrain_data(32);
  sampling::SamplingConfig sc;
  sc.pairs = 128;
  TrainConfig tc;
  tc.total_iters = 10;
  tc.warmup_iters = 2;
  tc.view_pairs_per_step = 2;
  tc.encoder = tiny_config();
  sampling::AugmentParams aug;
  aug.crop_size = 16;
  aug.strong_scale = {0.5, 1.0};
  const PretrainResult r = pretrain(data, sc, tc, aug);
  ASSERT_EQ(r.log.size(), 10u);
  for (int i = 0; i < 10; ++i) {
    EXPECT_EQ(r.log[i].iter, i);
    EXPECT_TRUE(std::isfinite(r.log[i].loss));
    EXPECT_DOUBLE_EQ(r.log[i].lr, pretrain_lr(tc, i));
  }
  io::save_archive(encoder_archive(r.encoder), dir / "e.ckpt");
  const Encoder back = encoder_from_archive(io::load_archive(dir / "e.ckpt"));
  for (std::size_t l = 0; l < back.layers.size(); ++l) {
    EXPECT_EQ(back.layers[l].weight, r.encoder.layers[l].weight);
    EXPECT_EQ(back.layers[l].bias, r.encoder.layers[l].bias);
  }
  const PretrainResult again = pretrain(data, sc, tc, aug);
  EXPECT_EQ(again.log.back().loss, r.log.back().loss);

  write_loss_csv(r.log, dir / "loss.csv");
  const std::string csv = io::read_text(dir / "loss.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iter,loss,lr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
}

TEST(Pretrain, LossDecreasesOverTraining) {
  const PretrainData data = small_pretrain_data(32);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    sampling::SamplingConfig sc;
    sc.pairs = 256;
    sc.seed = seed;
    TrainConfig tc;
    tc.total_iters = 2000;
    tc.warmup_iters = 100;
    tc.view_pairs_per_step = 2;
    tc.base_lr = 0.05;
    tc.seed = seed;
    tc.encoder = tiny_config();
    tc.encoder.feature_dim = 8;
    sampling::AugmentParams aug;
    aug.crop_size = 16;
    aug.strong_scale = {0.5, 1.0};
    const PretrainResult r = pretrain(data, sc, tc, aug);
    const std::size_t tenth = r.log.size() / 10;
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < tenth; ++i) {
      first += r.log[i].loss;
      last += r.log[r.log.size() - 1 - i].loss;
    }
    EXPECT_LT(last, first) << "seed " << seed;
  }
}
