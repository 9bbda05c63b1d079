#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "regconsist/camera.hpp"
#include "regconsist/frame.hpp"
#include "regconsist/matching.hpp"
#include "regconsist/pair_batch.hpp"
#include "regconsist/regions.hpp"

namespace regconsist::sampling {

using Rng = std::mt19937_64;

// SplitMix64 finaliser; derives independent stream seeds from (seed, a, b).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0);

enum class Sampler { kRandom, kBalanced };
enum class Matcher { kExact, kRegion };

struct SamplingConfig {
  Sampler sampler = Sampler::kBalanced;
  Matcher matcher = Matcher::kRegion;
  std::uint32_t pairs = 2048;
  std::uint64_t seed = 0;

  void validate() const;
  // "<sampler>-<matcher>", e.g. "balanced-region".
  std::string strategy() const;
};

// Parses "random-exact", "balanced-region", ... into the sampler/matcher fields.
void parse_strategy(const std::string& text, SamplingConfig& config);
std::vector<std::string> all_strategies();

enum class Profile { kStrong, kWeak };

struct AugmentParams {
  int crop_size = 64;
  std::pair<double, double> strong_scale{0.08, 1.0};
  std::pair<double, double> weak_scale{0.9, 1.0};
  std::pair<double, double> ratio{0.75, 1.25};
  double brightness = 0.3;
  double contrast = 0.3;
  double saturation = 0.3;
  double hue = 0.15;
  double jitter_p = 0.8;
  double grayscale_p = 0.2;
  double blur_p = 0.5;
  std::pair<double, double> blur_sigma{0.1, 2.0};

  // Strong crop scale (0.5, 1.0), used for the AVD-style setting.
  static AugmentParams avd();
  void validate() const;
};

struct AugmentedView {
  RgbImage rgb;
  CropTransform crop;
  // 1 where the source pixel behind the augmented pixel has valid depth.
  Image<std::uint8_t> valid;
};

// RandomResizedCrop (bilinear), then for the strong profile ColorJitter,
// RandomGrayscale and GaussianBlur. Only the crop moves coordinates.
AugmentedView augment(const Frame& frame, Profile profile, Rng& rng, const AugmentParams& params = {});

// Bilinear resample of the `crop` region of `rgb` to crop.out_width x crop.out_height.
RgbImage resample(const RgbImage& rgb, const CropTransform& crop);

// Crop box chosen as torchvision's RandomResizedCrop does, with its
// centre-crop fallback after 10 failed attempts.
CropTransform random_resized_crop(int width, int height, int out_size, std::pair<double, double> scale,
                                  std::pair<double, double> ratio, Rng& rng);

// Everything the sampler needs about one view pair, in original pixel coordinates.
struct ViewPairData {
  std::string id1;
  std::string id2;
  int width = 0;
  int height = 0;
  regions::RegionMap regions1;
  regions::RegionMap regions2;
  std::vector<std::int32_t> correspondence;  // p linear index -> q linear index or -1 (S_t)
  matching::RegionMatchSet matches;
};

ViewPairData build_view_pair_data(const Frame& frame1, const Frame& frame2, const CameraModel& cam,
                                  regions::RegionMap regions1, regions::RegionMap regions2,
                                  double epsilon_rel, double tau_region);

// Draws up to config.pairs pairs. Only pixels whose augmented position lands
// inside both crops are eligible, so every draw is kept.
PairBatch sample_pair_batch(const ViewPairData& data, const SamplingConfig& config,
                            const CropTransform& crop1, const CropTransform& crop2);
PairBatch sample_pair_batch(const ViewPairData& data, const SamplingConfig& config);

// Number of distinct admissible (p, q) pairs, ignoring augmentation.
std::uint64_t pair_supply_size(const ViewPairData& data, Matcher matcher);

// Recomputes the justification of one pair from scratch.
bool verify_pair_admissible(const ViewPairData& data, const PairBatch& batch, const PixelPair& pair,
                            Matcher matcher);

}  // namespace regconsist::sampling
