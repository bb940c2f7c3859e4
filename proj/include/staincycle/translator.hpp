#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "staincycle/image.hpp"

namespace staincycle::gan {

// ---- network specs -------------------------------------------------------

struct GeneratorSpec {
  int n_resnet_blocks = 4;  // paper-scale preset uses 9
  int base_channels = 32;
  nlohmann::json to_json() const;
  static GeneratorSpec from_json(const nlohmann::json& j);
};

struct DiscriminatorSpec {
  int depth = 3;  // number of strided conv stages
  int base_channels = 64;
  nlohmann::json to_json() const;
  static DiscriminatorSpec from_json(const nlohmann::json& j);
};

// ---- modules ---------------------------------------------------------------

class ResnetBlockImpl : public torch::nn::Module {
 public:
  explicit ResnetBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResnetBlock);

// Fully convolutional encoder / resnet blocks / decoder generator with a
// tanh output, so outputs stay in [-1,1] and keep the input's spatial size.
class ResnetGeneratorImpl : public torch::nn::Module {
 public:
  explicit ResnetGeneratorImpl(const GeneratorSpec& spec = {});
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(ResnetGenerator);

// PatchGAN: a spatial grid of realness scores.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const DiscriminatorSpec& spec = {});
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

void init_weights(torch::nn::Module& module);  // N(0, 0.02), original-article convention

// ---- translator pair --------------------------------------------------------

enum class Direction { ABA, BAB };

struct TranslatorPair {
  ResnetGenerator g_ab{nullptr}, g_ba{nullptr};
  PatchDiscriminator d_a{nullptr}, d_b{nullptr};
  std::uint64_t config_hash = 0;
  int epoch = 0;
  bool trained = false;
  std::string domain_tag;  // stain preset the pair was trained for

  static TranslatorPair create(const GeneratorSpec& gen, const DiscriminatorSpec& dis,
                               std::uint64_t seed);
};

// A generator as a plain function; lets tests substitute identity or
// constant stubs for the loss arithmetic.
using GenFn = std::function<torch::Tensor(const torch::Tensor&)>;

GenFn as_fn(ResnetGenerator gen);

// Deterministic inference with contract checks (range, shape, divisibility).
ImagePatch translate(const GenFn& gen, const ImagePatch& patch);
ImagePatch translate(ResnetGenerator gen, const ImagePatch& patch);

// Returns (intermediate, reconstruction).
std::pair<ImagePatch, ImagePatch> cycle_reconstruct(const TranslatorPair& pair,
                                                    const ImagePatch& patch, Direction dir);

// Eq-style cycle consistency: mean-L1 of each direction's reconstruction,
// summed over the two expectation terms.
double cycle_loss(const std::vector<ImagePatch>& batch_a, const std::vector<ImagePatch>& batch_b,
                  const GenFn& g_ab, const GenFn& g_ba);

struct CycleGANLossReport {
  double adv_ab = 0, adv_ba = 0;  // generator-side least-squares terms
  double cyc = 0;
  double lambda_cyc = 10.0;
  double total = 0;
  nlohmann::json to_json() const;
};

CycleGANLossReport adversarial_step_losses(const TranslatorPair& pair,
                                           const std::vector<ImagePatch>& batch_a,
                                           const std::vector<ImagePatch>& batch_b,
                                           double lambda_cyc = 10.0);

// Stub-friendly variant: discriminators as plain functions too.
CycleGANLossReport adversarial_step_losses(const GenFn& g_ab, const GenFn& g_ba,
                                           const GenFn& d_a, const GenFn& d_b,
                                           const std::vector<ImagePatch>& batch_a,
                                           const std::vector<ImagePatch>& batch_b,
                                           double lambda_cyc = 10.0);

// ---- training ----------------------------------------------------------------

struct TrainConfig {
  GeneratorSpec gen;
  DiscriminatorSpec dis;
  int epochs = 50;
  double lr = 2e-4;
  double lambda_cyc = 10.0;
  bool identity_loss = false;  // off by default; flag kept for experimentation
  double lambda_identity = 5.0;
  int pool_size = 50;  // history buffer of previous fakes for D updates
  std::uint64_t seed = 0;
  int checkpoint_every = 10;
  // Stop once held-out (or training) cycle mean-L1 per direction drops below
  // this value; <= 0 disables.
  double early_stop_cycle_l1 = -1.0;
  std::string domain_tag = "cd68";

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochStats {
  int epoch = 0;
  double adv_ab = 0, adv_ba = 0, cyc = 0, total = 0;
  double d_a = 0, d_b = 0;
  double eval_cycle_l1 = 0;  // mean of per-direction mean-L1 on eval patches
};

using TrainHistory = std::vector<EpochStats>;

// History buffer of generated images fed to discriminator updates.
class ImagePool {
 public:
  ImagePool(int capacity, std::uint64_t seed);
  torch::Tensor query(const torch::Tensor& image);

 private:
  int capacity_;
  std::vector<torch::Tensor> images_;
  std::mt19937_64 rng_;
};

// Unpaired CycleGAN training. eval_a/eval_b, when nonempty, drive the
// per-epoch eval_cycle_l1 and the early stop. Checkpoints and a loss-history
// CSV are written under out_dir. Aborts with a partial checkpoint on a
// non-finite loss.
std::pair<TranslatorPair, TrainHistory> train_cyclegan(
    const std::vector<ImagePatch>& data_a, const std::vector<ImagePatch>& data_b,
    const TrainConfig& config, const std::filesystem::path& out_dir,
    const std::vector<ImagePatch>& eval_a = {}, const std::vector<ImagePatch>& eval_b = {});

// Checkpoint round trips carry the network specs in their metadata, so
// loading needs only the directory.
void save_pair(const std::filesystem::path& dir, const TranslatorPair& pair,
               const GeneratorSpec& gen, const DiscriminatorSpec& dis);
TranslatorPair load_pair(const std::filesystem::path& dir);

void write_history_csv(const std::filesystem::path& path, const TrainHistory& history);

}  // namespace staincycle::gan
