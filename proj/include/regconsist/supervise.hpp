#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "regconsist/frame.hpp"
#include "regconsist/io.hpp"
#include "regconsist/ssl.hpp"

namespace regconsist::supervise {

using Eigen::MatrixXd;

inline constexpr double kDefaultGamma = 2.0;

struct FocalResult {
  double loss = 0.0;
  MatrixXd grad;  // same shape as logits
};

// logits is K x N, one column per pixel. Mean over non-ignored pixels of
// -(1 - p_t)^gamma log p_t. Throws if every target is ignored.
FocalResult focal_loss(const MatrixXd& logits, const std::vector<std::uint16_t>& targets, double gamma = kDefaultGamma,
                       std::uint16_t ignore_label = kIgnoreLabel);

// Same loss where column m stands for counts(k, m) pixels of class k sharing
// the logits of column m. Normalised by the total count.
FocalResult focal_loss_counts(const MatrixXd& logits, const MatrixXd& counts, double gamma = kDefaultGamma);

// Encoder plus a linear D -> K head over nearest-upsampled features.
struct SegModel {
  ssl::Encoder encoder;
  ssl::Layer head;  // weight K x D

  int num_classes() const { return static_cast<int>(head.weight.rows()); }
  static SegModel create(ssl::Encoder encoder, int num_classes, std::uint64_t seed);
};

io::TensorArchive model_archive(const SegModel& model);
SegModel model_from_archive(const io::TensorArchive& archive);

struct FinetuneConfig {
  double base_lr = 0.01;
  double power = 0.9;
  double weight_decay = 5e-4;
  double gamma = kDefaultGamma;
  int iters = 300;
  int input_size = 64;          // frames are resized to input_size x input_size
  bool linear_probe = true;     // freeze the encoder and train the head only
  int frames_per_step = 0;      // 0: every training frame each step
  std::uint64_t seed = 0;

  void validate() const;
};

// base_lr * (1 - iter / iters)^power
double poly_lr(const FinetuneConfig& config, int iter);

struct FinetuneResult {
  SegModel model;
  std::vector<double> losses;
};

// Throws InvalidArgument if a label id is >= num_classes and not ignore_label.
FinetuneResult finetune(SegModel model, const std::vector<Frame>& train, const FinetuneConfig& config,
                        std::uint16_t ignore_label = kIgnoreLabel, int jobs = 1);

// Per-pixel class prediction at the frame's resolution.
LabelImage predict(const SegModel& model, const Frame& frame, int input_size);

struct EvalReport {
  int num_classes = 0;
  std::vector<std::uint64_t> confusion;  // row = ground truth, col = prediction
  std::vector<std::optional<double>> class_iou;  // empty when the class is absent from both
  double miou = 0.0;          // over classes present in ground truth or prediction
  double miou_gt = 0.0;       // over classes present in ground truth
  std::uint64_t pixels = 0;   // non-ignored
  std::uint64_t ignored = 0;

  std::uint64_t at(int gt, int pred) const {
    return confusion[static_cast<std::size_t>(gt) * num_classes + pred];
  }
};

// Adds one label pair per pixel; returns ignored count. Sizes must match.
std::uint64_t accumulate_confusion(std::vector<std::uint64_t>& confusion, int num_classes, const LabelImage& pred,
                                   const LabelImage& gt, std::uint16_t ignore_label = kIgnoreLabel);
EvalReport report_from_confusion(std::vector<std::uint64_t> confusion, int num_classes, std::uint64_t ignored);

EvalReport evaluate_miou(const SegModel& model, const std::vector<Frame>& test, int num_classes, int input_size,
                         std::uint16_t ignore_label = kIgnoreLabel, int jobs = 1);

std::string report_to_json(const EvalReport& report, const std::vector<std::string>& class_names);

// Seeded split of frame ids into (train, test); train count max(1, round(f N)) capped at N - 1.
std::pair<std::vector<std::string>, std::vector<std::string>> split_labeled(const std::vector<std::string>& ids,
                                                                            double fraction, std::uint64_t seed);
// Uses the frames of `manifest` that have label rasters.
std::pair<std::vector<std::string>, std::vector<std::string>> split_labeled(const io::DatasetManifest& manifest,
                                                                            double fraction, std::uint64_t seed);

// Colour-coded prediction blended over the frame's RGB, as PPM.
void write_overlay(const Frame& frame, const LabelImage& prediction, const std::filesystem::path& path);

}  // namespace regconsist::supervise
