#include "staincycle/attack_probe.hpp"

#include <cmath>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "staincycle/io_store.hpp"
#include "staincycle/rng.hpp"

namespace staincycle::probe {

namespace fs = std::filesystem;
using nlohmann::json;

ImagePatch perturb(const ImagePatch& intermediate, const NoiseSpec& spec) {
  check_image(intermediate, "perturb input");
  if (spec.sigma < 0) throw std::invalid_argument("sigma must be >= 0");
  if (spec.sigma == 0) return intermediate;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(splitmix64(spec.seed));
  auto noise = torch::randn(intermediate.sizes(), gen, torch::kFloat32);
  return intermediate + noise * spec.sigma;
}

double divergence(const ImagePatch& x, const ImagePatch& y) {
  if (x.sizes() != y.sizes()) throw std::invalid_argument("divergence: shape mismatch");
  return (x - y).abs().mean().item<double>();
}

ImagePatch gaussian_blur(const ImagePatch& image, double sigma_px) {
  check_image(image, "gaussian_blur input");
  if (sigma_px <= 0) return image;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_px)));
  auto x = torch::arange(-radius, radius + 1, torch::kFloat32);
  auto k1 = torch::exp(-x.pow(2) / (2.0 * sigma_px * sigma_px));
  k1 /= k1.sum();

  namespace F = torch::nn::functional;
  auto inp = image.unsqueeze(0);  // 1x3xHxW
  inp = F::pad(inp, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReflect));
  auto kh = k1.view({1, 1, 1, -1}).repeat({3, 1, 1, 1});
  auto kv = k1.view({1, 1, -1, 1}).repeat({3, 1, 1, 1});
  auto out = F::conv2d(inp, kh, F::Conv2dFuncOptions().groups(3));
  out = F::conv2d(out, kv, F::Conv2dFuncOptions().groups(3));
  return out.squeeze(0);
}

namespace {

// Inference that tolerates out-of-range inputs (perturbed intermediates).
torch::Tensor raw_forward(gan::ResnetGenerator gen, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  return gen->forward(x.unsqueeze(0)).squeeze(0);
}

double mean_realness(gan::PatchDiscriminator dis, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  return dis->forward(x.unsqueeze(0)).mean().item<double>();
}

}  // namespace

ImagePatch perturbed_reconstruct(const gan::TranslatorPair& pair, const ImagePatch& patch,
                                 gan::Direction dir, const NoiseSpec& spec) {
  auto first = dir == gan::Direction::ABA ? pair.g_ab : pair.g_ba;
  auto second = dir == gan::Direction::ABA ? pair.g_ba : pair.g_ab;
  auto intermediate = gan::translate(first, patch);
  return raw_forward(second, perturb(intermediate, spec));
}

std::string DivergenceCurve::to_csv() const {
  std::ostringstream os;
  os << "sigma,mean,stddev,realness,n_patches,n_repeats,pair_trained\n";
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    os << sigmas[i] << "," << mean[i] << "," << stddev[i] << "," << realness[i] << ","
       << n_patches << "," << n_repeats << "," << (pair_trained ? 1 : 0) << "\n";
  }
  return os.str();
}

json DivergenceCurve::to_json() const {
  return json{{"sigmas", sigmas},     {"mean", mean},
              {"stddev", stddev},     {"realness", realness},
              {"n_patches", n_patches}, {"n_repeats", n_repeats},
              {"pair_trained", pair_trained}};
}

DivergenceCurve sigma_sweep(const gan::TranslatorPair& pair, const std::vector<ImagePatch>& patches,
                            const std::vector<double>& sigmas, int n_repeats, gan::Direction dir,
                            std::uint64_t seed) {
  if (patches.empty()) throw std::invalid_argument("sigma_sweep: no patches");
  if (n_repeats < 1) throw std::invalid_argument("sigma_sweep: n_repeats must be >= 1");
  for (std::size_t i = 1; i < sigmas.size(); ++i) {
    if (sigmas[i] <= sigmas[i - 1]) throw std::invalid_argument("sigmas must strictly increase");
  }

  auto realness_dis = dir == gan::Direction::BAB ? pair.d_b : pair.d_a;

  DivergenceCurve curve;
  curve.sigmas = sigmas;
  curve.n_patches = static_cast<int>(patches.size());
  curve.n_repeats = n_repeats;
  curve.pair_trained = pair.trained;

  std::vector<ImagePatch> clean;
  clean.reserve(patches.size());
  for (const auto& p : patches) clean.push_back(gan::cycle_reconstruct(pair, p, dir).second);

  for (double sigma : sigmas) {
    std::vector<double> divs;
    double realness_sum = 0;
    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
      for (int r = 0; r < n_repeats; ++r) {
        NoiseSpec spec{sigma, mix_seeds(seed, (pi << 20) ^ static_cast<std::uint64_t>(r) ^
                                                  static_cast<std::uint64_t>(sigma * 1e6))};
        auto rec = perturbed_reconstruct(pair, patches[pi], dir, spec);
        divs.push_back(divergence(clean[pi], rec));
        realness_sum += mean_realness(realness_dis, rec);
      }
    }
    const double n = static_cast<double>(divs.size());
    double m = 0;
    for (double d : divs) m += d;
    m /= n;
    double var = 0;
    for (double d : divs) var += (d - m) * (d - m);
    curve.mean.push_back(m);
    curve.stddev.push_back(n > 1 ? std::sqrt(var / (n - 1)) : 0.0);
    curve.realness.push_back(realness_sum / n);
  }
  return curve;
}

double variation_at_sigma(const gan::TranslatorPair& pair, const ImagePatch& patch, double sigma,
                          int n_seeds, gan::Direction dir, std::uint64_t seed) {
  if (n_seeds < 2) throw std::invalid_argument("variation_at_sigma: n_seeds must be >= 2");
  std::vector<ImagePatch> recs;
  for (int i = 0; i < n_seeds; ++i) {
    recs.push_back(perturbed_reconstruct(pair, patch, dir,
                                         {sigma, mix_seeds(seed, static_cast<std::uint64_t>(i))}));
  }
  double sum = 0;
  int count = 0;
  for (int i = 0; i < n_seeds; ++i) {
    for (int j = i + 1; j < n_seeds; ++j) {
      sum += divergence(recs[i], recs[j]);
      ++count;
    }
  }
  return sum / count;
}

SpectrumSummary residual_spectrum(const ImagePatch& fake, const ImagePatch& smoothed_fake) {
  if (fake.sizes() != smoothed_fake.sizes()) {
    throw std::invalid_argument("residual_spectrum: shape mismatch");
  }
  auto residual = (fake - smoothed_fake).to(torch::kFloat32);
  auto spec = torch::fft::fft2(residual);
  auto power = spec.abs().pow(2).sum(0);  // HxW, summed over channels

  const int64_t h = power.size(0), w = power.size(1);
  // frequency magnitude per bin, in cycles/pixel, accounting for wrap-around
  auto fy = torch::fft::fftfreq(h).view({h, 1});
  auto fx = torch::fft::fftfreq(w).view({1, w});
  auto freq = torch::sqrt(fy.pow(2) + fx.pow(2));  // 0 .. ~0.707

  SpectrumSummary s;
  s.total_energy = power.sum().item<double>();
  const double high = (freq > 0.25).to(torch::kFloat32).mul(power).sum().item<double>();
  s.high_frequency_fraction = s.total_energy > 0 ? high / s.total_energy : 0.0;

  const int n_bins = static_cast<int>(std::min(h, w)) / 2 + 1;
  auto bins = (freq * 2.0 * static_cast<double>(std::min(h, w)) / 2.0)
                  .to(torch::kLong)
                  .clamp(0, n_bins - 1);
  auto radial = torch::zeros({n_bins}, torch::kFloat32);
  radial.scatter_add_(0, bins.flatten(), power.flatten().to(torch::kFloat32));
  s.radial_power = radial;
  return s;
}

BlurAttackResult blur_attack(const gan::TranslatorPair& pair, const ImagePatch& patch,
                             gan::Direction dir, double blur_sigma_px) {
  auto first = dir == gan::Direction::ABA ? pair.g_ab : pair.g_ba;
  auto second = dir == gan::Direction::ABA ? pair.g_ba : pair.g_ab;
  auto intermediate = gan::translate(first, patch);
  auto clean_rec = raw_forward(second, intermediate);
  auto blurred_rec = raw_forward(second, gaussian_blur(intermediate, blur_sigma_px));
  return {divergence(patch, clean_rec), divergence(patch, blurred_rec)};
}

// ---- reporting artifacts -------------------------------------------------------

ImagePatch contact_sheet(const gan::TranslatorPair& pair, const std::vector<ImagePatch>& patches,
                         const std::vector<double>& sigmas, gan::Direction dir,
                         std::uint64_t seed) {
  if (patches.empty()) throw std::invalid_argument("contact_sheet: no patches");
  const int64_t h = patches[0].size(1), w = patches[0].size(2);
  const int64_t cols = 1 + static_cast<int64_t>(sigmas.size());
  const int64_t rows = static_cast<int64_t>(patches.size());
  const int64_t pad = 2;
  auto sheet = torch::ones({3, rows * (h + pad) - pad, cols * (w + pad) - pad}, torch::kFloat32);
  for (int64_t r = 0; r < rows; ++r) {
    auto place = [&](int64_t c, const ImagePatch& img) {
      sheet.slice(1, r * (h + pad), r * (h + pad) + h)
          .slice(2, c * (w + pad), c * (w + pad) + w)
          .copy_(img.clamp(-1, 1));
    };
    place(0, patches[r]);
    for (std::size_t si = 0; si < sigmas.size(); ++si) {
      place(1 + static_cast<int64_t>(si),
            perturbed_reconstruct(pair, patches[r], dir,
                                  {sigmas[si], mix_seeds(seed, (r << 8) ^ si)}));
    }
  }
  return sheet;
}

void plot_divergence_curve(const DivergenceCurve& curve, const fs::path& path) {
  const int W = 640, H = 480, margin = 60;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  double max_y = 1e-9, max_x = 1e-9;
  for (std::size_t i = 0; i < curve.sigmas.size(); ++i) {
    max_y = std::max(max_y, curve.mean[i] + curve.stddev[i]);
    max_x = std::max(max_x, curve.sigmas[i]);
  }
  auto px = [&](double sx) { return margin + static_cast<int>((W - 2 * margin) * sx / max_x); };
  auto py = [&](double sy) {
    return H - margin - static_cast<int>((H - 2 * margin) * sy / max_y);
  };
  cv::line(img, {margin, H - margin}, {W - margin, H - margin}, {0, 0, 0});
  cv::line(img, {margin, H - margin}, {margin, margin}, {0, 0, 0});
  cv::putText(img, "sigma", {W / 2, H - margin / 3}, cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0});
  cv::putText(img, "divergence (mean L1)", {5, margin / 2}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
              {0, 0, 0});
  cv::Point prev;
  for (std::size_t i = 0; i < curve.sigmas.size(); ++i) {
    cv::Point p(px(curve.sigmas[i]), py(curve.mean[i]));
    cv::circle(img, p, 3, {180, 60, 20}, cv::FILLED);
    cv::line(img, {p.x, py(std::max(0.0, curve.mean[i] - curve.stddev[i]))},
             {p.x, py(curve.mean[i] + curve.stddev[i])}, {180, 60, 20});
    if (i > 0) cv::line(img, prev, p, {180, 60, 20}, 2);
    prev = p;
  }
  cv::imwrite(path.string(), img);
}

}  // namespace staincycle::probe
