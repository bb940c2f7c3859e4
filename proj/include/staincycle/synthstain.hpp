#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "staincycle/image.hpp"
#include "staincycle/io_store.hpp"

namespace staincycle::synth {

// Two-domain synthetic stain analog. Domain A (the routine-stain analog)
// renders tissue structures and nuclei only; domain B additionally paints
// stain markers. Markers never influence domain-A pixels, so A carries no
// marker information by construction.

enum class Domain { A, B };

struct SynthConfig {
  int patch_size = 128;
  std::array<int, 2> structure_count_range{1, 3};
  double nuclei_density = 6.0;  // expected nuclei per 10^4 px^2
  std::array<double, 2> marker_density_range{3.0, 8.0};  // markers per structure
  double noise_floor = 0.02;    // std of additive texture noise, image scale
  double stain_variation = 0.0;  // 0..1, per-patch staining-strength gradient in domain B
  std::string preset = "cd68";  // "cd68" (brown, larger) or "cd34" (red, smaller)
  std::uint64_t seed = 0;

  void validate() const;  // throws on invariant violation
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct Marker {
  float x, y, radius;
};

struct MorphologyMap {
  torch::Tensor structure_mask;  // bool HxW
  std::vector<std::array<float, 2>> nuclei;
  std::vector<Marker> markers;
  int patch_size = 0;
};

struct RenderedPatch {
  ImagePatch image;  // 3xHxW in [-1,1]
  Domain domain;
};

// Rendering color conventions, shared with the mask-estimation threshold
// logic and the probe's marker-region measurements. RGB in [0,1].
struct Palette {
  std::array<float, 3> background{0.92f, 0.87f, 0.90f};
  std::array<float, 3> structure{0.70f, 0.52f, 0.70f};
  std::array<float, 3> nucleus{0.28f, 0.18f, 0.45f};
  std::array<float, 3> marker_cd68{0.47f, 0.30f, 0.12f};  // brown
  std::array<float, 3> marker_cd34{0.72f, 0.13f, 0.13f};  // red
};

MorphologyMap generate_morphology(const SynthConfig& config, std::uint64_t seed);

// Deterministic given (morph, domain, texture_seed, config); domain-A output
// is independent of morph.markers.
RenderedPatch render_stain(const MorphologyMap& morph, Domain domain, std::uint64_t texture_seed,
                           const SynthConfig& config);

// Nearest-palette-color classification of a rendered image followed by a
// small morphological closing (nuclei dots sit inside structures). Used as
// the "structure mask derived from pixels" proxy throughout the probe and
// augmentation invariants.
torch::Tensor estimate_structure_mask(const ImagePatch& image);

// Boolean HxW footprint of the markers (disk of radius r + 1px soft rim).
torch::Tensor marker_footprint(const MorphologyMap& morph);

// Expected fraction of patch area covered by structures, from the ellipse
// area formula and the config's sampling ranges. Oracle for tests.
double expected_structure_fraction(const SynthConfig& config);

// ---- dataset construction ----------------------------------------------------

struct DatasetPaths {
  std::filesystem::path dir;
  io::Manifest manifest;
};

// Unpaired: domain-A and domain-B samples use disjoint morphology seeds.
// Paired: shared morphology per sample (evaluation only); refuse paired
// output for translator training downstream.
DatasetPaths build_dataset(const SynthConfig& config, int n_samples, bool paired,
                           const std::filesystem::path& out_dir);

// Labeled segmentation dataset: domain-B images with structure masks,
// negatives (structure-free patches) mixed in at neg_per_pos per positive.
DatasetPaths build_labeled_dataset(const SynthConfig& config, int n_positive, int neg_per_pos,
                                   const std::filesystem::path& out_dir,
                                   std::uint64_t seed_base = 0);

// Load every image with the given role from a dataset directory.
std::vector<ImagePatch> load_images(const std::filesystem::path& dir, const std::string& role);

}  // namespace staincycle::synth
