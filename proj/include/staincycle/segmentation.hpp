#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "staincycle/augment.hpp"
#include "staincycle/image.hpp"

namespace staincycle::seg {

struct SegConfig {
  int epochs = 40;  // paper-scale preset: 250
  double lr = 1e-3;
  int batch_size = 4;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  bool flips = true;  // baseline augmentation: horizontal/vertical flips only
  int base_channels = 32;
  int depth = 4;

  nlohmann::json to_json() const;
  static SegConfig from_json(const nlohmann::json& j);
};

class UNetImpl : public torch::nn::Module {
 public:
  UNetImpl(int base_channels = 32, int depth = 4);
  torch::Tensor forward(torch::Tensor x);  // logits, Nx1xHxW

 private:
  std::vector<torch::nn::Sequential> enc_, dec_;
  std::vector<torch::nn::ConvTranspose2d> up_;
  torch::nn::Sequential bottleneck_{nullptr};
  torch::nn::Conv2d head_{nullptr};
  int depth_;
};
TORCH_MODULE(UNet);

struct SegModel {
  UNet net{nullptr};
  SegConfig config;
  // per-channel stats of the training set in [0,1] space; inputs are
  // standardised to [0,1] then normalised by these before the net sees them
  std::array<double, 3> norm_mean{0.5, 0.5, 0.5};
  std::array<double, 3> norm_std{0.25, 0.25, 0.25};
  int best_epoch = 0;
  double best_val_f1 = 0;
  std::uint64_t config_hash = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_f1 = 0;
};
using SegHistory = std::vector<EpochRecord>;

struct MetricsReport {
  double f1 = 0, precision = 0, recall = 0;         // pixel level
  double obj_f1 = 0, obj_precision = 0, obj_recall = 0;  // object level, IoU >= 0.5 matching
  std::string data_fraction_label;
  bool augmented = false;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  std::string csv_row() const;
  static std::string csv_header();
};

// f1 = 2pr/(p+r) with the 0/0 convention; shared oracle-facing helper.
MetricsReport metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn);

std::array<double, 3> compute_norm_stats_mean(const std::vector<aug::LabeledSample>& train);
std::array<double, 3> compute_norm_stats_std(const std::vector<aug::LabeledSample>& train,
                                             const std::array<double, 3>& mean);

// Supervised training with best-validation-F1 model selection. Refuses
// overlapping train/val sample ids. Augmenter, when given, runs before
// normalisation (augment first, normalise second).
std::pair<SegModel, SegHistory> train_unet(const std::vector<aug::LabeledSample>& train,
                                           const std::vector<aug::LabeledSample>& val,
                                           const SegConfig& config,
                                           const aug::Augmenter* augmenter = nullptr);

// Per-pixel foreground probability in [0,1]; input patch in [-1,1].
torch::Tensor predict(const SegModel& model, const ImagePatch& patch);

MetricsReport evaluate(const SegModel& model, const std::vector<aug::LabeledSample>& test,
                       double threshold = 0.5);

void save_model(const std::filesystem::path& dir, const SegModel& model);
SegModel load_model(const std::filesystem::path& dir);

// Samples from a labeled dataset directory (see synth::build_labeled_dataset).
std::vector<aug::LabeledSample> load_labeled(const std::filesystem::path& dir);

}  // namespace staincycle::seg
