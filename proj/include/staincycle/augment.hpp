#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "staincycle/image.hpp"
#include "staincycle/translator.hpp"

namespace staincycle::aug {

struct AugmentConfig {
  double epsilon = 0.05;     // max sigma; sigma ~ Uniform(0, epsilon]
  double probability = 0.5;  // per-sample application chance
  std::string preset = "cd68";  // must match the translator pair's domain tag

  void validate() const;
  nlohmann::json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j);
};

struct LabeledSample {
  ImagePatch image;     // [-1,1]
  torch::Tensor mask;   // bool HxW; never touched by augmentation
  std::string id;
  double applied_sigma = -1.0;  // -1 means "none"
};

// Per-seed decision record; exposed so the composition-correctness test can
// chain translate -> perturb -> translate manually with identical draws.
struct AugmentDraw {
  bool apply = false;
  double sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

AugmentDraw augment_draw(const AugmentConfig& config, std::uint64_t seed);

// Stateless transform closed over (config, pair); safe for concurrent apply
// calls with distinct seeds.
class Augmenter {
 public:
  Augmenter(const AugmentConfig& config, std::shared_ptr<const gan::TranslatorPair> pair);

  // With probability p: image <- G_AB(perturb(G_BA(image), sigma)),
  // sigma ~ U(0, eps]; mask and identity metadata pass through bit-exactly.
  LabeledSample apply(const LabeledSample& sample, std::uint64_t seed) const;

  const AugmentConfig& config() const { return config_; }
  const gan::TranslatorPair& pair() const { return *pair_; }

 private:
  AugmentConfig config_;
  std::shared_ptr<const gan::TranslatorPair> pair_;
};

Augmenter make_augmenter(const AugmentConfig& config,
                         std::shared_ptr<const gan::TranslatorPair> pair);

}  // namespace staincycle::aug
