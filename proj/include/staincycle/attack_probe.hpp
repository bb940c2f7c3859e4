#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "staincycle/image.hpp"
#include "staincycle/translator.hpp"

namespace staincycle::probe {

struct NoiseSpec {
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

// intermediate + N(0, sigma^2), i.i.d. per element, deterministic per seed.
// Deliberately not clamped: clamping at high sigma would skew the noise
// statistics near the range ends.
ImagePatch perturb(const ImagePatch& intermediate, const NoiseSpec& spec);

// Mean absolute difference; symmetric, zero iff bit-identical.
double divergence(const ImagePatch& x, const ImagePatch& y);

// Gaussian blur with reflective padding. sigma_px <= 0 returns the input.
ImagePatch gaussian_blur(const ImagePatch& image, double sigma_px);

// second-generator(perturb(first-generator(patch), spec)); the perturbed
// intermediate bypasses the translate range check by design.
ImagePatch perturbed_reconstruct(const gan::TranslatorPair& pair, const ImagePatch& patch,
                                 gan::Direction dir, const NoiseSpec& spec);

struct DivergenceCurve {
  std::vector<double> sigmas;
  std::vector<double> mean;     // divergence(clean recon, perturbed recon)
  std::vector<double> stddev;   // over patches x repeats
  std::vector<double> realness; // mean discriminator score of perturbed recons
  int n_patches = 0;
  int n_repeats = 0;
  bool pair_trained = true;  // untrained pairs are allowed but flagged

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

DivergenceCurve sigma_sweep(const gan::TranslatorPair& pair, const std::vector<ImagePatch>& patches,
                            const std::vector<double>& sigmas, int n_repeats,
                            gan::Direction dir = gan::Direction::BAB, std::uint64_t seed = 0);

// Mean pairwise divergence among n_seeds perturbed reconstructions of one
// patch; quantifies how much same-sigma noise varies the output.
double variation_at_sigma(const gan::TranslatorPair& pair, const ImagePatch& patch, double sigma,
                          int n_seeds, gan::Direction dir = gan::Direction::BAB,
                          std::uint64_t seed = 0);

struct SpectrumSummary {
  torch::Tensor radial_power;     // 1D, power per integer radius bin
  double high_frequency_fraction = 0;  // energy above half-Nyquist / total
  double total_energy = 0;
};

// Spectrum of (fake - smoothed_fake), the residual band where the hidden
// signal lives.
SpectrumSummary residual_spectrum(const ImagePatch& fake, const ImagePatch& smoothed_fake);

struct BlurAttackResult {
  double clean_recon_divergence = 0;
  double blurred_recon_divergence = 0;
};

// Reconstruct once from the raw intermediate and once from the low-pass
// filtered intermediate; blurring destroys the hidden high-frequency band.
BlurAttackResult blur_attack(const gan::TranslatorPair& pair, const ImagePatch& patch,
                             gan::Direction dir, double blur_sigma_px = 1.0);

// ---- reporting artifacts -------------------------------------------------------

// Rows of (original | reconstructions per sigma), one row per patch.
ImagePatch contact_sheet(const gan::TranslatorPair& pair, const std::vector<ImagePatch>& patches,
                         const std::vector<double>& sigmas, gan::Direction dir,
                         std::uint64_t seed = 0);

// Simple line plot of the curve, written as a PNG.
void plot_divergence_curve(const DivergenceCurve& curve, const std::filesystem::path& path);

}  // namespace staincycle::probe
