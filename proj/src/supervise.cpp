#include "regconsist/supervise.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "regconsist/error.hpp"
#include "regconsist/parallel.hpp"
#include "regconsist/sampling.hpp"

namespace regconsist::supervise {

namespace {

// Loss and dL/dz for one column whose true class is t.
double focal_column(const Eigen::Ref<const Eigen::VectorXd>& z, int t, double gamma, Eigen::Ref<Eigen::VectorXd> dz) {
  const double zmax = z.maxCoeff();
  const Eigen::VectorXd e = (z.array() - zmax).exp().matrix();
  const double sum = e.sum();
  const Eigen::VectorXd p = e / sum;
  const double log_pt = z(t) - zmax - std::log(sum);
  const double pt = p(t);
  const double one_minus = std::max(0.0, sum - e(t)) / sum;
  const double w = gamma == 0.0 ? 1.0 : std::pow(one_minus, gamma);
  const double loss = -w * log_pt;
  // dL/dz_j = A (delta_tj - p_j) with A = gamma (1-p)^(gamma-1) p log p - (1-p)^gamma.
  double a = -w;
  if (gamma != 0.0 && one_minus > 0.0) a += gamma * std::pow(one_minus, gamma - 1.0) * pt * log_pt;
  dz = -a * p;
  dz(t) += a;
  return loss;
}

void check_gamma(double gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidArgument("focal_loss: gamma must be >= 0");
}

}  // namespace

FocalResult focal_loss(const MatrixXd& logits, const std::vector<std::uint16_t>& targets, double gamma,
                       std::uint16_t ignore_label) {
  check_gamma(gamma);
  if (static_cast<std::size_t>(logits.cols()) != targets.size()) {
    throw DimensionError("focal_loss: one target per logit column required");
  }
  FocalResult out{0.0, MatrixXd::Zero(logits.rows(), logits.cols())};
  std::size_t n = 0;
  Eigen::VectorXd dz(logits.rows());
  for (Eigen::Index m = 0; m < logits.cols(); ++m) {
    const auto t = targets[static_cast<std::size_t>(m)];
    if (t == ignore_label) continue;
    if (t >= logits.rows()) throw InvalidArgument("focal_loss: target " + std::to_string(t) + " out of class range");
    out.loss += focal_column(logits.col(m), t, gamma, dz);
    out.grad.col(m) = dz;
    ++n;
  }
  if (n == 0) throw InvalidArgument("focal_loss: every pixel is ignore-labeled");
  out.loss /= static_cast<double>(n);
  out.grad /= static_cast<double>(n);
  return out;
}

FocalResult focal_loss_counts(const MatrixXd& logits, const MatrixXd& counts, double gamma) {
  check_gamma(gamma);
  if (logits.rows() != counts.rows() || logits.cols() != counts.cols()) {
    throw DimensionError("focal_loss_counts: counts must match logits");
  }
  const double total = counts.sum();
  if (!(total > 0.0)) throw InvalidArgument("focal_loss: every pixel is ignore-labeled");
  FocalResult out{0.0, MatrixXd::Zero(logits.rows(), logits.cols())};
  Eigen::VectorXd dz(logits.rows());
  for (Eigen::Index m = 0; m < logits.cols(); ++m) {
    for (Eigen::Index k = 0; k < logits.rows(); ++k) {
      const double c = counts(k, m);
      if (c == 0.0) continue;
      out.loss += c * focal_column(logits.col(m), static_cast<int>(k), gamma, dz);
      out.grad.col(m) += c * dz;
    }
  }
  out.loss /= total;
  out.grad /= total;
  return out;
}

SegModel SegModel::create(ssl::Encoder encoder, int num_classes, std::uint64_t seed) {
  if (num_classes < 1) throw InvalidArgument("SegModel: num_classes must be >= 1");
  SegModel m;
  const int d = encoder.config.feature_dim;
  m.encoder = std::move(encoder);
  m.head.weight = MatrixXd(num_classes, d);
  m.head.bias = Eigen::VectorXd::Zero(num_classes);
  std::mt19937_64 rng(seed);
  const double limit = std::sqrt(6.0 / (d + num_classes));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index c = 0; c < m.head.weight.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.head.weight.rows(); ++r) m.head.weight(r, c) = dist(rng);
  }
  ssl::Params head{m.head};
  ssl::round_to_float(head);
  m.head = head.front();
  return m;
}

io::TensorArchive model_archive(const SegModel& model) {
  io::TensorArchive archive = ssl::encoder_archive(model.encoder);
  auto meta = nlohmann::json::parse(archive.metadata);
  meta["num_classes"] = model.num_classes();
  archive.metadata = meta.dump();
  ssl::append_tensors(archive, "head.", {model.head}, {1});
  return archive;
}

SegModel model_from_archive(const io::TensorArchive& archive) {
  SegModel m;
  m.encoder = ssl::encoder_from_archive(archive);
  m.head = ssl::read_tensors(archive, "head.", 1).front();
  if (m.head.weight.cols() != m.encoder.config.feature_dim) {
    throw FormatError("checkpoint head does not match the encoder feature dimension");
  }
  return m;
}

void FinetuneConfig::validate() const {
  if (!(base_lr > 0.0) || !(power > 0.0) || weight_decay < 0.0) {
    throw ConfigError("finetune: base_lr and power must be > 0, weight_decay >= 0");
  }
  check_gamma(gamma);
  if (iters < 1 || input_size < 8 || frames_per_step < 0) {
    throw ConfigError("finetune: iters >= 1, input_size >= 8, frames_per_step >= 0 required");
  }
}

double poly_lr(const FinetuneConfig& config, int iter) {
  return config.base_lr * std::pow(1.0 - static_cast<double>(iter) / config.iters, config.power);
}

namespace {

RgbImage model_input(const Frame& frame, int size) {
  auto crop = CropTransform::identity(frame.width(), frame.height());
  crop.out_width = size;
  crop.out_height = size;
  return sampling::resample(frame.rgb, crop);
}

// K x cells label histogram of `labels` under nearest-neighbour upsampling of an fh x fw map.
MatrixXd cell_counts(const LabelImage& labels, int fh, int fw, int num_classes, std::uint16_t ignore_label) {
  MatrixXd counts = MatrixXd::Zero(num_classes, static_cast<Eigen::Index>(fh) * fw);
  const int h = labels.height();
  const int w = labels.width();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto l = labels.at(r, c);
      if (l == ignore_label) continue;
      if (l >= num_classes) {
        throw InvalidArgument("label id " + std::to_string(l) + " exceeds num_classes " + std::to_string(num_classes));
      }
      counts(l, static_cast<Eigen::Index>(r * fh / h) * fw + c * fw / w) += 1.0;
    }
  }
  return counts;
}

MatrixXd head_logits(const ssl::Layer& head, const MatrixXd& features) {
  return (head.weight * features).colwise() + head.bias;
}

}  // namespace

FinetuneResult finetune(SegModel model, const std::vector<Frame>& train, const FinetuneConfig& config,
                        std::uint16_t ignore_label, int jobs) {
  config.validate();
  if (train.empty()) throw InvalidArgument("finetune: at least one labeled frame required");
  const int k = model.num_classes();
  const std::size_t n = train.size();
  std::vector<RgbImage> inputs(n);
  std::vector<MatrixXd> counts(n);
  std::vector<MatrixXd> cached(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    if (!train[i].labels) throw InvalidArgument("finetune: frame '" + train[i].id + "' has no labels");
    inputs[i] = model_input(train[i], config.input_size);
    const auto f = ssl::encoder_forward(model.encoder, inputs[i]);
    counts[i] = cell_counts(*train[i].labels, f.height, f.width, k, ignore_label);
    if (config.linear_probe) cached[i] = f.values;
  });

  FinetuneResult result;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t per_step = config.frames_per_step == 0 ? n : std::min<std::size_t>(n, config.frames_per_step);

  for (int iter = 0; iter < config.iters; ++iter) {
    if (per_step < n) std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> batch(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(per_step));
    std::vector<MatrixXd> features(per_step);
    std::vector<ssl::EncoderCache> caches(per_step);
    parallel_for(per_step, jobs, [&](std::size_t s) {
      if (config.linear_probe) {
        features[s] = cached[batch[s]];
      } else {
        features[s] = ssl::encoder_forward(model.encoder, inputs[batch[s]], &caches[s]).values;
      }
    });
    Eigen::Index cols = 0;
    for (const auto& f : features) cols += f.cols();
    MatrixXd all_f(model.encoder.config.feature_dim, cols);
    MatrixXd all_c(k, cols);
    for (std::size_t s = 0, off = 0; s < per_step; off += features[s].cols(), ++s) {
      all_f.middleCols(static_cast<Eigen::Index>(off), features[s].cols()) = features[s];
      all_c.middleCols(static_cast<Eigen::Index>(off), features[s].cols()) = counts[batch[s]];
    }
    const auto fl = focal_loss_counts(head_logits(model.head, all_f), all_c, config.gamma);
    if (!std::isfinite(fl.loss)) throw NumericalError("finetune: non-finite loss at iteration " + std::to_string(iter));
    ssl::Params head_grad{{fl.grad * all_f.transpose(), fl.grad.rowwise().sum()}};
    const double lr = poly_lr(config, iter);
    if (!config.linear_probe) {
      const MatrixXd dfeat = model.head.weight.transpose() * fl.grad;
      std::vector<ssl::Params> grads(per_step);
      std::vector<Eigen::Index> offsets(per_step, 0);
      for (std::size_t s = 1; s < per_step; ++s) offsets[s] = offsets[s - 1] + features[s - 1].cols();
      parallel_for(per_step, jobs, [&](std::size_t s) {
        grads[s] = ssl::encoder_backward(model.encoder, caches[s], dfeat.middleCols(offsets[s], features[s].cols()));
      });
      ssl::Params enc_grad = ssl::zeros_like(model.encoder.layers);
      for (const auto& g : grads) ssl::accumulate(enc_grad, g);
      ssl::sgd_step(model.encoder.layers, enc_grad, lr, config.weight_decay);
    }
    ssl::Params head{model.head};
    ssl::sgd_step(head, head_grad, lr, config.weight_decay);
    model.head = head.front();
    result.losses.push_back(fl.loss);
  }
  result.model = std::move(model);
  return result;
}

LabelImage predict(const SegModel& model, const Frame& frame, int input_size) {
  const auto f = ssl::encoder_forward(model.encoder, model_input(frame, input_size));
  const MatrixXd logits = head_logits(model.head, f.values);
  std::vector<std::uint16_t> cell_label(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index m = 0; m < logits.cols(); ++m) {
    Eigen::Index best;
    logits.col(m).maxCoeff(&best);
    cell_label[static_cast<std::size_t>(m)] = static_cast<std::uint16_t>(best);
  }
  LabelImage out(frame.width(), frame.height(), 1);
  for (int r = 0; r < frame.height(); ++r) {
    for (int c = 0; c < frame.width(); ++c) {
      out.at(r, c) = cell_label[static_cast<std::size_t>(f.cell_for(r, c, frame.height(), frame.width()))];
    }
  }
  return out;
}

std::uint64_t accumulate_confusion(std::vector<std::uint64_t>& confusion, int num_classes, const LabelImage& pred,
                                   const LabelImage& gt, std::uint16_t ignore_label) {
  if (!pred.same_shape(gt)) throw DimensionError("accumulate_confusion: prediction and label sizes differ");
  confusion.resize(static_cast<std::size_t>(num_classes) * num_classes, 0);
  std::uint64_t ignored = 0;
  const auto p = pred.data();
  const auto g = gt.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] == ignore_label) {
      ++ignored;
      continue;
    }
    if (g[i] >= num_classes || p[i] >= num_classes) {
      throw InvalidArgument("accumulate_confusion: label id out of class range");
    }
    ++confusion[static_cast<std::size_t>(g[i]) * num_classes + p[i]];
  }
  return ignored;
}

EvalReport report_from_confusion(std::vector<std::uint64_t> confusion, int num_classes, std::uint64_t ignored) {
  if (confusion.size() != static_cast<std::size_t>(num_classes) * num_classes) {
    throw DimensionError("report_from_confusion: confusion size does not match num_classes");
  }
  EvalReport rep;
  rep.num_classes = num_classes;
  rep.confusion = std::move(confusion);
  rep.ignored = ignored;
  rep.pixels = std::accumulate(rep.confusion.begin(), rep.confusion.end(), std::uint64_t{0});
  if (rep.pixels == 0) throw InvalidArgument("evaluate: no labeled pixels");
  double sum_all = 0.0;
  double sum_gt = 0.0;
  int n_all = 0;
  int n_gt = 0;
  for (int k = 0; k < num_classes; ++k) {
    std::uint64_t row = 0;
    std::uint64_t col = 0;
    for (int j = 0; j < num_classes; ++j) {
      row += rep.at(k, j);
      col += rep.at(j, k);
    }
    const std::uint64_t tp = rep.at(k, k);
    const std::uint64_t denom = row + col - tp;
    if (denom == 0) {
      rep.class_iou.push_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    rep.class_iou.push_back(iou);
    sum_all += iou;
    ++n_all;
    if (row > 0) {
      sum_gt += iou;
      ++n_gt;
    }
  }
  rep.miou = sum_all / n_all;
  rep.miou_gt = n_gt > 0 ? sum_gt / n_gt : 0.0;
  return rep;
}

EvalReport evaluate_miou(const SegModel& model, const std::vector<Frame>& test, int num_classes, int input_size,
                         std::uint16_t ignore_label, int jobs) {
  if (model.num_classes() != num_classes) throw InvalidArgument("evaluate_miou: model class count differs");
  std::vector<std::vector<std::uint64_t>> partial(test.size());
  std::vector<std::uint64_t> ignored(test.size(), 0);
  parallel_for(test.size(), jobs, [&](std::size_t i) {
    if (!test[i].labels) throw InvalidArgument("evaluate_miou: frame '" + test[i].id + "' has no labels");
    ignored[i] = accumulate_confusion(partial[i], num_classes, predict(model, test[i], input_size), *test[i].labels,
                                      ignore_label);
  });
  std::vector<std::uint64_t> confusion(static_cast<std::size_t>(num_classes) * num_classes, 0);
  std::uint64_t total_ignored = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (std::size_t j = 0; j < confusion.size(); ++j) confusion[j] += partial[i][j];
    total_ignored += ignored[i];
  }
  return report_from_confusion(std::move(confusion), num_classes, total_ignored);
}

std::string report_to_json(const EvalReport& report, const std::vector<std::string>& class_names) {
  nlohmann::json j;
  j["num_classes"] = report.num_classes;
  j["miou"] = report.miou;
  j["miou_gt_classes"] = report.miou_gt;
  j["miou_definition"] = "mean over classes present in ground truth or prediction; absent classes excluded";
  j["pixels"] = report.pixels;
  j["ignored"] = report.ignored;
  nlohmann::json per_class = nlohmann::json::array();
  for (int k = 0; k < report.num_classes; ++k) {
    nlohmann::json e;
    e["class"] = k;
    e["name"] = k < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(k)] : "";
    e["iou"] = report.class_iou[static_cast<std::size_t>(k)] ? nlohmann::json(*report.class_iou[static_cast<std::size_t>(k)])
                                                             : nlohmann::json(nullptr);
    per_class.push_back(e);
  }
  j["per_class"] = per_class;
  nlohmann::json rows = nlohmann::json::array();
  for (int k = 0; k < report.num_classes; ++k) {
    rows.push_back(std::vector<std::uint64_t>(report.confusion.begin() + static_cast<std::ptrdiff_t>(k) * report.num_classes,
                                              report.confusion.begin() + static_cast<std::ptrdiff_t>(k + 1) * report.num_classes));
  }
  j["confusion"] = rows;
  return j.dump(2) + "\n";
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_labeled(const std::vector<std::string>& ids,
                                                                            double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidArgument("split_labeled: fraction must lie in (0, 1)");
  const std::size_t n = ids.size();
  if (n < 2) throw InvalidArgument("split_labeled: need at least 2 labeled frames");
  std::vector<std::string> shuffled = ids;
  std::sort(shuffled.begin(), shuffled.end());
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(seed));
  auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  count = std::clamp<std::size_t>(count, 1, n - 1);
  std::vector<std::string> train(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(count));
  std::vector<std::string> test(shuffled.begin() + static_cast<std::ptrdiff_t>(count), shuffled.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_labeled(const io::DatasetManifest& manifest,
                                                                            double fraction, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& f : manifest.frames) {
    if (f.label_path) ids.push_back(f.id);
  }
  return split_labeled(ids, fraction, seed);
}

void write_overlay(const Frame& frame, const LabelImage& prediction, const std::filesystem::path& path) {
  if (!prediction.same_shape(frame.rgb)) throw DimensionError("write_overlay: prediction size differs from frame");
  static constexpr std::uint8_t kPalette[][3] = {
      {230, 25, 75},  {60, 180, 75},  {255, 225, 25}, {0, 130, 200}, {245, 130, 48}, {145, 30, 180},
      {70, 240, 240}, {240, 50, 230}, {210, 245, 60}, {250, 190, 212}, {0, 128, 128}, {170, 110, 40}};
  constexpr std::size_t kColors = sizeof(kPalette) / sizeof(kPalette[0]);
  RgbImage out(frame.width(), frame.height(), 3);
  for (int r = 0; r < frame.height(); ++r) {
    for (int c = 0; c < frame.width(); ++c) {
      const auto l = prediction.at(r, c);
      for (int k = 0; k < 3; ++k) {
        const int base = frame.rgb.at(r, c, k);
        out.at(r, c, k) = l == kIgnoreLabel ? static_cast<std::uint8_t>(base)
                                            : static_cast<std::uint8_t>((base + kPalette[l % kColors][k]) / 2);
      }
    }
  }
  io::write_ppm(path, out);
}

}  // namespace regconsist::supervise
