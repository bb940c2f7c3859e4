#include "staincycle/augment.hpp"

#include <nlohmann/json.hpp>

#include "staincycle/attack_probe.hpp"
#include "staincycle/rng.hpp"

namespace staincycle::aug {

using nlohmann::json;

void AugmentConfig::validate() const {
  if (epsilon <= 0) throw std::invalid_argument("epsilon must be > 0");
  if (probability < 0 || probability > 1) throw std::invalid_argument("probability must be in [0,1]");
}

json AugmentConfig::to_json() const {
  return json{{"epsilon", epsilon}, {"probability", probability}, {"preset", preset}};
}

AugmentConfig AugmentConfig::from_json(const json& j) {
  AugmentConfig c;
  c.epsilon = j.value("epsilon", c.epsilon);
  c.probability = j.value("probability", c.probability);
  c.preset = j.value("preset", c.preset);
  c.validate();
  return c;
}

AugmentDraw augment_draw(const AugmentConfig& config, std::uint64_t seed) {
  auto rng = make_rng(mix_seeds(0xA06ULL, seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentDraw d;
  d.apply = unit(rng) < config.probability;
  // (1 - u) maps U[0,1) onto (0,1], keeping sigma strictly positive
  d.sigma = (1.0 - unit(rng)) * config.epsilon;
  d.noise_seed = rng();
  return d;
}

Augmenter::Augmenter(const AugmentConfig& config, std::shared_ptr<const gan::TranslatorPair> pair)
    : config_(config), pair_(std::move(pair)) {
  config_.validate();
  if (!pair_) throw std::invalid_argument("augmenter requires a translator pair");
  if (!pair_->domain_tag.empty() && pair_->domain_tag != config_.preset) {
    throw std::invalid_argument("augmenter preset '" + config_.preset +
                                "' does not match translator pair domain '" + pair_->domain_tag +
                                "'");
  }
}

LabeledSample Augmenter::apply(const LabeledSample& sample, std::uint64_t seed) const {
  const AugmentDraw draw = augment_draw(config_, seed);
  if (!draw.apply) return sample;

  auto intermediate = gan::translate(pair_->g_ba, sample.image);
  auto perturbed = probe::perturb(intermediate, {draw.sigma, draw.noise_seed});
  torch::NoGradGuard no_grad;
  auto g_ab = pair_->g_ab;
  auto image = g_ab->forward(perturbed.unsqueeze(0)).squeeze(0);

  LabeledSample out = sample;  // mask and id pass through untouched
  out.image = image;
  out.applied_sigma = draw.sigma;
  return out;
}

Augmenter make_augmenter(const AugmentConfig& config,
                         std::shared_ptr<const gan::TranslatorPair> pair) {
  return Augmenter(config, std::move(pair));
}

}  // namespace staincycle::aug
