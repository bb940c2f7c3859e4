#include "staincycle/synthstain.hpp"

#include <cmath>
#include <numbers>

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "staincycle/rng.hpp"

namespace staincycle::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

// Ellipse sampling ranges, fractions of patch_size. Centers stay far enough
// from the border that clipping is negligible for the area oracle.
constexpr double kCenterLo = 0.25, kCenterHi = 0.75;
constexpr double kAxisLo = 0.10, kAxisHi = 0.20;

torch::Tensor coord_grid(int n) {
  return torch::arange(n, torch::kFloat32);
}

// alpha in [0,1], 1 inside the disk, linear 1px falloff at the rim
torch::Tensor disk_alpha(int ps, float cx, float cy, float r) {
  auto ys = coord_grid(ps).view({ps, 1});
  auto xs = coord_grid(ps).view({1, ps});
  auto dist = torch::sqrt((xs - cx).pow(2) + (ys - cy).pow(2));
  return (r + 0.5f - dist).clamp(0.0f, 1.0f);
}

void paint(torch::Tensor& rgb, const torch::Tensor& alpha, const std::array<float, 3>& color) {
  for (int c = 0; c < 3; ++c) {
    auto ch = rgb[c];
    ch.mul_(1.0f - alpha).add_(alpha * color[c]);
  }
}

const std::array<float, 3>& marker_color(const std::string& preset) {
  static const Palette pal;
  if (preset == "cd34") return pal.marker_cd34;
  return pal.marker_cd68;
}

std::array<float, 2> marker_radius_range(const std::string& preset) {
  if (preset == "cd34") return {1.5f, 3.0f};
  return {2.5f, 5.0f};
}

}  // namespace

void SynthConfig::validate() const {
  if (patch_size < 32 || patch_size % 4 != 0) {
    throw std::invalid_argument("patch_size must be >= 32 and divisible by 4");
  }
  if (structure_count_range[0] < 0 || structure_count_range[1] < structure_count_range[0]) {
    throw std::invalid_argument("invalid structure_count_range");
  }
  if (marker_density_range[0] < 0 || marker_density_range[1] < marker_density_range[0]) {
    throw std::invalid_argument("marker_density_range lower bound must be >= 0");
  }
  if (nuclei_density < 0 || noise_floor < 0) {
    throw std::invalid_argument("nuclei_density and noise_floor must be >= 0");
  }
  if (stain_variation < 0.0 || stain_variation > 1.0) {
    throw std::invalid_argument("stain_variation must be in [0, 1]");
  }
  if (preset != "cd68" && preset != "cd34") {
    throw std::invalid_argument("unknown preset: " + preset);
  }
}

json SynthConfig::to_json() const {
  return json{{"patch_size", patch_size},
              {"structure_count_range", structure_count_range},
              {"nuclei_density", nuclei_density},
              {"marker_density_range", marker_density_range},
              {"noise_floor", noise_floor},
              {"stain_variation", stain_variation},
              {"preset", preset},
              {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  c.patch_size = j.value("patch_size", c.patch_size);
  if (j.contains("structure_count_range")) {
    c.structure_count_range = j.at("structure_count_range").get<std::array<int, 2>>();
  }
  c.nuclei_density = j.value("nuclei_density", c.nuclei_density);
  if (j.contains("marker_density_range")) {
    c.marker_density_range = j.at("marker_density_range").get<std::array<double, 2>>();
  }
  c.noise_floor = j.value("noise_floor", c.noise_floor);
  c.stain_variation = j.value("stain_variation", c.stain_variation);
  c.preset = j.value("preset", c.preset);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

MorphologyMap generate_morphology(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  auto rng = make_rng(mix_seeds(config.seed, seed));
  const int ps = config.patch_size;

  MorphologyMap morph;
  morph.patch_size = ps;
  morph.structure_mask = torch::zeros({ps, ps}, torch::kBool);

  std::uniform_int_distribution<int> count_dist(config.structure_count_range[0],
                                                config.structure_count_range[1]);
  const int n_structures = count_dist(rng);

  struct Ellipse {
    double cx, cy, a, b, theta;
  };
  std::vector<Ellipse> ellipses;
  std::uniform_real_distribution<double> cdist(kCenterLo * ps, kCenterHi * ps);
  std::uniform_real_distribution<double> adist(kAxisLo * ps, kAxisHi * ps);
  std::uniform_real_distribution<double> tdist(0.0, kPi);

  auto ys = coord_grid(ps).view({ps, 1});
  auto xs = coord_grid(ps).view({1, ps});
  for (int i = 0; i < n_structures; ++i) {
    Ellipse e{cdist(rng), cdist(rng), adist(rng), adist(rng), tdist(rng)};
    ellipses.push_back(e);
    auto dx = xs - static_cast<float>(e.cx);
    auto dy = ys - static_cast<float>(e.cy);
    const float ct = static_cast<float>(std::cos(e.theta));
    const float st = static_cast<float>(std::sin(e.theta));
    auto u = (dx * ct + dy * st) / static_cast<float>(e.a);
    auto v = (-dx * st + dy * ct) / static_cast<float>(e.b);
    morph.structure_mask |= (u.pow(2) + v.pow(2)) <= 1.0f;
  }

  // Nuclei scattered over the whole patch.
  std::poisson_distribution<int> ndist(config.nuclei_density * ps * ps / 1e4);
  std::uniform_real_distribution<double> pos(0.0, ps);
  const int n_nuclei = ndist(rng);
  for (int i = 0; i < n_nuclei; ++i) {
    morph.nuclei.push_back({static_cast<float>(pos(rng)), static_cast<float>(pos(rng))});
  }

  // Markers co-locate with structures: sampled uniformly inside an ellipse.
  std::uniform_real_distribution<double> mdist(config.marker_density_range[0],
                                               config.marker_density_range[1]);
  auto rrange = marker_radius_range(config.preset);
  std::uniform_real_distribution<float> rdist(rrange[0], rrange[1]);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const auto& e : ellipses) {
    const int n_markers = static_cast<int>(std::lround(mdist(rng)));
    for (int m = 0; m < n_markers; ++m) {
      const double ang = 2.0 * kPi * unit(rng);
      const double rad = std::sqrt(unit(rng));
      const double ex = rad * std::cos(ang) * e.a;
      const double ey = rad * std::sin(ang) * e.b;
      const double ct = std::cos(e.theta), st = std::sin(e.theta);
      const float mx = static_cast<float>(e.cx + ex * ct - ey * st);
      const float my = static_cast<float>(e.cy + ex * st + ey * ct);
      morph.markers.push_back({std::clamp(mx, 0.0f, static_cast<float>(ps - 1)),
                               std::clamp(my, 0.0f, static_cast<float>(ps - 1)), rdist(rng)});
    }
  }
  return morph;
}

RenderedPatch render_stain(const MorphologyMap& morph, Domain domain, std::uint64_t texture_seed,
                           const SynthConfig& config) {
  config.validate();
  const int ps = morph.patch_size;
  if (ps <= 0 || morph.structure_mask.size(0) != ps) {
    throw std::invalid_argument("invalid morphology map");
  }
  const Palette pal;

  auto rgb = torch::empty({3, ps, ps}, torch::kFloat32);
  for (int c = 0; c < 3; ++c) rgb[c].fill_(pal.background[c]);

  auto smask = morph.structure_mask.to(torch::kFloat32);
  paint(rgb, smask, pal.structure);

  std::uniform_real_distribution<float> nucr(1.2f, 2.4f);
  auto nrng = make_rng(mix_seeds(0x6e75636cULL, texture_seed));
  for (const auto& n : morph.nuclei) {
    paint(rgb, disk_alpha(ps, n[0], n[1], nucr(nrng)), pal.nucleus);
  }

  if (domain == Domain::B) {
    const auto& mc = marker_color(config.preset);
    for (const auto& m : morph.markers) {
      paint(rgb, disk_alpha(ps, m.x, m.y, m.radius), mc);
    }
  }

  // Slide-to-slide staining variability: a per-patch linear gain gradient on the
  // stain signal (deviation from background), domain B only. Driven by the texture
  // seed so it is independent of marker placement, like the noise below.
  if (domain == Domain::B && config.stain_variation > 0.0) {
    auto grng = make_rng(mix_seeds(0x7374696eULL, texture_seed));
    std::uniform_real_distribution<double> udir(0.0, 2.0 * kPi);
    std::uniform_real_distribution<double> umag(0.0, 0.45);
    const double theta = udir(grng);
    const double s = config.stain_variation * umag(grng);
    auto ax = torch::arange(ps, torch::kFloat32) / static_cast<float>(ps - 1) - 0.5f;
    auto gain = 1.0 + 2.0 * s *
                          (std::cos(theta) * ax.view({1, -1}) + std::sin(theta) * ax.view({-1, 1}));
    auto bg = torch::tensor({pal.background[0], pal.background[1], pal.background[2]},
                            torch::kFloat32)
                  .view({3, 1, 1});
    rgb = bg + gain.unsqueeze(0) * (rgb - bg);
  }

  // Texture noise depends only on the texture seed, never on markers.
  auto gen = at::make_generator<at::CPUGeneratorImpl>(splitmix64(texture_seed));
  auto noise = torch::randn({3, ps, ps}, gen, torch::kFloat32) * config.noise_floor;
  rgb = (rgb + noise).clamp(0.0f, 1.0f);

  return RenderedPatch{from_unit_range(rgb), domain};
}

torch::Tensor estimate_structure_mask(const ImagePatch& image) {
  check_image(image, "estimate_structure_mask input");
  const Palette pal;
  auto unit = to_unit_range(image);  // 3xHxW in [0,1]
  const std::vector<std::array<float, 3>> protos = {pal.background, pal.structure, pal.nucleus,
                                                    pal.marker_cd68, pal.marker_cd34};
  std::vector<torch::Tensor> dists;
  for (const auto& p : protos) {
    auto proto = torch::tensor({p[0], p[1], p[2]}).view({3, 1, 1});
    dists.push_back((unit - proto).pow(2).sum(0));
  }
  auto label = torch::stack(dists).argmin(0);
  // structure=1, markers=3/4.  Markers are only ever painted inside a
  // structure, so marker pixels count as structure.  Nuclei are excluded
  // (they also occur on the background outside any structure); inside a
  // structure they leave holes, which the fill below closes.
  auto mask = ((label == 1) | (label == 3) | (label == 4)).to(torch::kUInt8).contiguous();
  const int h = static_cast<int>(mask.size(0)), w = static_cast<int>(mask.size(1));
  cv::Mat mat(h, w, CV_8UC1, mask.data_ptr<std::uint8_t>());
  cv::Mat closed;
  cv::morphologyEx(mat, closed, cv::MORPH_CLOSE,
                   cv::getStructuringElement(cv::MORPH_ELLIPSE, {3, 3}));
  // Fill interior holes: flood the background from the border (on a 1px
  // padded copy so structures touching the edge don't block the flood) and
  // call everything the flood cannot reach foreground.
  cv::Mat padded;
  cv::copyMakeBorder(closed, padded, 1, 1, 1, 1, cv::BORDER_CONSTANT, 0);
  cv::Mat flooded = padded.clone();
  cv::floodFill(flooded, {0, 0}, 2);
  cv::Mat filled = (flooded != 2);  // 255 where structure or enclosed hole
  // Drop specks far below the smallest possible structure (area >= pi*(0.1*ps)^2):
  // the anti-aliased rim of an isolated nucleus blends towards the structure
  // colour and would otherwise survive as a small blob on the background.
  cv::Mat labels, stats, centroids;
  cv::connectedComponentsWithStats(filled, labels, stats, centroids, 4);
  const double min_area = 0.02 * h * w;
  auto out = torch::zeros({h, w}, torch::kBool);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int lbl = labels.at<std::int32_t>(y + 1, x + 1);
      out[y][x] = lbl > 0 && stats.at<std::int32_t>(lbl, cv::CC_STAT_AREA) >= min_area;
    }
  }
  return out;
}

torch::Tensor marker_footprint(const MorphologyMap& morph) {
  const int ps = morph.patch_size;
  auto fp = torch::zeros({ps, ps}, torch::kBool);
  for (const auto& m : morph.markers) {
    fp |= disk_alpha(ps, m.x, m.y, m.radius + 1.0f) > 0.0f;
  }
  return fp;
}

double expected_structure_fraction(const SynthConfig& config) {
  const double mean_count =
      0.5 * (config.structure_count_range[0] + config.structure_count_range[1]);
  const double mean_axis = 0.5 * (kAxisLo + kAxisHi) * config.patch_size;
  const double area = kPi * mean_axis * mean_axis;
  // E[a]*E[b] = E[a]^2 since axes are iid; overlap between structures is
  // ignored, which the test tolerance absorbs.
  return mean_count * area / (config.patch_size * config.patch_size);
}

// ---- dataset construction ----------------------------------------------------

namespace {

std::string zero_pad(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", i);
  return buf;
}

std::uint64_t texture_seed_for(std::uint64_t morph_seed, Domain d) {
  return mix_seeds(morph_seed, d == Domain::A ? 0xA11CEULL : 0xB0B0ULL);
}

}  // namespace

DatasetPaths build_dataset(const SynthConfig& config, int n_samples, bool paired,
                           const fs::path& out_dir) {
  config.validate();
  if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
  fs::create_directories(out_dir);

  io::Manifest manifest;
  json cfg_j = config.to_json();
  cfg_j["n_samples"] = n_samples;
  cfg_j["paired"] = paired;
  manifest.config_hash = io::config_hash(cfg_j);
  const std::string split = paired ? "paired" : "unpaired";

  for (int i = 0; i < n_samples; ++i) {
    const std::uint64_t seed_a = static_cast<std::uint64_t>(i);
    const std::uint64_t seed_b = paired ? seed_a : static_cast<std::uint64_t>(n_samples + i);

    auto morph_a = generate_morphology(config, seed_a);
    auto morph_b = paired ? morph_a : generate_morphology(config, seed_b);

    auto pa = render_stain(morph_a, Domain::A, texture_seed_for(seed_a, Domain::A), config);
    auto pb = render_stain(morph_b, Domain::B, texture_seed_for(seed_b, Domain::B), config);

    const std::string id = zero_pad(i);
    const std::string fa = "a_" + id + ".png";
    const std::string fb = "b_" + id + ".png";
    const std::string ma = "a_" + id + "_mask.png";
    const std::string mb = "b_" + id + "_mask.png";
    io::save_image(out_dir / fa, pa.image);
    io::save_image(out_dir / fb, pb.image);
    io::save_mask(out_dir / ma, morph_a.structure_mask);
    io::save_mask(out_dir / mb, morph_b.structure_mask);
    manifest.entries.push_back({fa, "imageA", seed_a, split});
    manifest.entries.push_back({fb, "imageB", seed_b, split});
    manifest.entries.push_back({ma, "mask", seed_a, split});
    manifest.entries.push_back({mb, "mask", seed_b, split});
  }
  io::save_manifest(out_dir / "manifest.json", manifest);
  return {out_dir, manifest};
}

DatasetPaths build_labeled_dataset(const SynthConfig& config, int n_positive, int neg_per_pos,
                                   const fs::path& out_dir, std::uint64_t seed_base) {
  config.validate();
  if (n_positive < 1 || neg_per_pos < 0) throw std::invalid_argument("bad dataset sizes");
  fs::create_directories(out_dir);

  SynthConfig neg_config = config;
  neg_config.structure_count_range = {0, 0};

  io::Manifest manifest;
  json cfg_j = config.to_json();
  cfg_j["n_positive"] = n_positive;
  cfg_j["neg_per_pos"] = neg_per_pos;
  cfg_j["seed_base"] = seed_base;
  manifest.config_hash = io::config_hash(cfg_j);

  int index = 0;
  auto emit = [&](const SynthConfig& c, std::uint64_t seed, const std::string& split) {
    auto morph = generate_morphology(c, seed);
    auto patch = render_stain(morph, Domain::B, texture_seed_for(seed, Domain::B), c);
    const std::string id = zero_pad(index++);
    const std::string fi = "b_" + id + ".png";
    const std::string fm = "b_" + id + "_mask.png";
    io::save_image(out_dir / fi, patch.image);
    io::save_mask(out_dir / fm, morph.structure_mask);
    manifest.entries.push_back({fi, "imageB", seed, split});
    manifest.entries.push_back({fm, "mask", seed, split});
  };

  for (int i = 0; i < n_positive; ++i) {
    emit(config, seed_base + static_cast<std::uint64_t>(i), "pos");
    for (int k = 0; k < neg_per_pos; ++k) {
      emit(neg_config,
           seed_base + static_cast<std::uint64_t>(n_positive + i * neg_per_pos + k), "neg");
    }
  }
  io::save_manifest(out_dir / "manifest.json", manifest);
  return {out_dir, manifest};
}

std::vector<ImagePatch> load_images(const fs::path& dir, const std::string& role) {
  auto manifest = io::load_manifest(dir / "manifest.json");
  std::vector<ImagePatch> out;
  for (const auto& e : manifest.entries) {
    if (e.role == role) out.push_back(io::load_image(dir / e.path));
  }
  return out;
}

}  // namespace staincycle::synth
