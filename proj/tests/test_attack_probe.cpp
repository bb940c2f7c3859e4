#include <cmath>
#include <numbers>
#include <vector>

#include <torch/torch.h>

#include "staincycle/attack_probe.hpp"
#include "staincycle/image.hpp"
#include "staincycle/translator.hpp"

// doctest last so its CHECK macro wins over torch's logging macro
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

using namespace staincycle;

namespace {

gan::TranslatorPair tiny_pair(std::uint64_t seed) {
  gan::GeneratorSpec g;
  g.n_resnet_blocks = 1;
  g.base_channels = 8;
  gan::DiscriminatorSpec d;
  d.depth = 2;
  d.base_channels = 8;
  return gan::TranslatorPair::create(g, d, seed);
}

// A pair whose generators are identity maps: problematic to build from real
// nets, but save/load is not needed -- we monkey-patch via translate(GenFn)
// only where the API takes a pair, so instead supply near-identity by using
// the probe free functions directly.
ImagePatch random_patch(int size, std::uint64_t seed) {
  torch::manual_seed(seed);
  return torch::rand({3, size, size}) * 2.0f - 1.0f;
}

}  // namespace

TEST_CASE("perturb with sigma 0 is bit-identical; negative sigma throws") {
  auto x = random_patch(32, 1);
  auto y = probe::perturb(x, {0.0, 42});
  CHECK(torch::equal(x, y));
  CHECK_THROWS(probe::perturb(x, {-0.1, 42}));
}

TEST_CASE("perturb adds noise with the requested statistics") {
  // LLN oracle: over 3*256*256 = 196608 draws the sample std of the residual
  // estimates sigma to better than 1%.
  auto x = torch::zeros({3, 256, 256});
  auto y = probe::perturb(x, {0.1, 7});
  auto resid = y - x;
  CHECK(resid.std().item<double>() == doctest::Approx(0.1).epsilon(0.01));
  CHECK(resid.mean().item<double>() == doctest::Approx(0.0).epsilon(1).scale(0.002));
  // Deterministic per seed, different across seeds, and unclamped.
  CHECK(torch::equal(probe::perturb(x, {0.1, 7}), y));
  CHECK_FALSE(torch::equal(probe::perturb(x, {0.1, 8}), y));
  auto big = probe::perturb(torch::ones({3, 64, 64}), {1.0, 3});
  CHECK(big.max().item<float>() > 1.0f);  // not clamped by design
}

TEST_CASE("divergence matches a brute-force mean absolute difference") {
  auto x = random_patch(16, 2);
  auto y = random_patch(16, 3);
  double acc = 0;
  auto xa = x.accessor<float, 3>(), ya = y.accessor<float, 3>();
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) acc += std::abs(xa[c][i][j] - ya[c][i][j]);
  acc /= 3.0 * 16 * 16;
  CHECK(probe::divergence(x, y) == doctest::Approx(acc).epsilon(1e-6));
  CHECK(probe::divergence(x, x) == 0.0);
  CHECK(probe::divergence(x, y) == doctest::Approx(probe::divergence(y, x)));
  CHECK_THROWS(probe::divergence(x, random_patch(32, 4)));
  // Range extremes: all-(-1) vs all-(+1) diverge by exactly 2.
  CHECK(probe::divergence(torch::full({3, 8, 8}, -1.0f), torch::full({3, 8, 8}, 1.0f)) ==
        doctest::Approx(2.0));
}

TEST_CASE("gaussian_blur: sigma <= 0 is the identity, constants are fixed points") {
  auto x = random_patch(32, 5);
  CHECK(torch::equal(probe::gaussian_blur(x, 0.0), x));
  CHECK(torch::equal(probe::gaussian_blur(x, -1.0), x));
  // A constant image is invariant under any normalised blur with reflective
  // padding (no edge darkening).
  auto flat = torch::full({3, 32, 32}, 0.3f);
  auto b = probe::gaussian_blur(flat, 2.0);
  CHECK((b - flat).abs().max().item<float>() < 1e-5f);
  // Blur preserves the mean and strictly reduces variance of noise.
  auto noisy = random_patch(64, 6);
  auto nb = probe::gaussian_blur(noisy, 1.0);
  CHECK(nb.mean().item<double>() == doctest::Approx(noisy.mean().item<double>()).epsilon(0.02));
  CHECK(nb.var().item<double>() < 0.5 * noisy.var().item<double>());
}

TEST_CASE("sigma_sweep on an untrained pair: sigma=0 row is exactly zero divergence") {
  auto pair = tiny_pair(3);
  std::vector<ImagePatch> patches = {random_patch(32, 7), random_patch(32, 8)};
  auto curve = probe::sigma_sweep(pair, patches, {0.0, 0.1, 0.5}, 2);
  REQUIRE(curve.sigmas.size() == 3);
  CHECK(curve.mean[0] == 0.0);
  CHECK(curve.stddev[0] == 0.0);
  CHECK(curve.mean[1] > 0.0);
  CHECK(curve.n_patches == 2);
  CHECK(curve.n_repeats == 2);
  CHECK_FALSE(curve.pair_trained);
  // sigmas must be strictly increasing
  CHECK_THROWS(probe::sigma_sweep(pair, patches, {0.5, 0.1}, 1));
  // CSV has a header plus one row per sigma
  auto csv = curve.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("sigma_sweep is deterministic per seed") {
  auto pair = tiny_pair(5);
  std::vector<ImagePatch> patches = {random_patch(32, 9)};
  auto c1 = probe::sigma_sweep(pair, patches, {0.1, 0.3}, 2, gan::Direction::BAB, 11);
  auto c2 = probe::sigma_sweep(pair, patches, {0.1, 0.3}, 2, gan::Direction::BAB, 11);
  auto c3 = probe::sigma_sweep(pair, patches, {0.1, 0.3}, 2, gan::Direction::BAB, 12);
  CHECK(c1.mean == c2.mean);
  CHECK(c1.stddev == c2.stddev);
  CHECK(c1.mean != c3.mean);
}

TEST_CASE("variation_at_sigma: closed form for an identity second generator") {
  // If both generators were identity, the perturbed reconstruction is just
  // input + noise, so the pairwise divergence is E|n1 - n2| where n1, n2 are
  // iid N(0, sigma^2): the difference is N(0, 2 sigma^2), whose mean absolute
  // value is 2 sigma / sqrt(pi). We verify that closed form on the raw
  // perturb/divergence primitives that variation_at_sigma composes.
  const double sigma = 0.2;
  auto x = torch::zeros({3, 128, 128});
  double acc = 0;
  const int pairs = 6;
  for (int i = 0; i < pairs; ++i) {
    auto a = probe::perturb(x, {sigma, 100 + 2ull * i});
    auto b = probe::perturb(x, {sigma, 101 + 2ull * i});
    acc += probe::divergence(a, b);
  }
  acc /= pairs;
  const double expected = 2.0 * sigma / std::sqrt(std::numbers::pi);
  CHECK(acc == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("variation_at_sigma: zero at sigma 0, positive otherwise, needs 2+ seeds") {
  auto pair = tiny_pair(9);
  auto x = random_patch(32, 10);
  CHECK(probe::variation_at_sigma(pair, x, 0.0, 3) == 0.0);
  CHECK(probe::variation_at_sigma(pair, x, 0.3, 3) > 0.0);
  CHECK_THROWS(probe::variation_at_sigma(pair, x, 0.1, 1));
}

TEST_CASE("residual_spectrum: a checkerboard residual is almost all high frequency") {
  // Checkerboard = Nyquist frequency in both axes; all its energy sits above
  // the 0.25 cycles/px cutoff.
  auto idx = torch::arange(64);
  auto board = ((idx.unsqueeze(0) + idx.unsqueeze(1)) % 2).to(torch::kFloat32) * 0.2f;
  auto fake = board.unsqueeze(0).repeat({3, 1, 1}) - 0.1f;
  auto smooth = torch::zeros_like(fake);
  auto s = probe::residual_spectrum(fake, smooth);
  CHECK(s.high_frequency_fraction > 0.9);
  CHECK(s.total_energy > 0.0);
  CHECK(s.radial_power.dim() == 1);
}

TEST_CASE("residual_spectrum: a smooth gradient residual is almost all low frequency") {
  auto ramp = torch::linspace(-0.5, 0.5, 64).unsqueeze(0).repeat({64, 1});
  auto fake = ramp.unsqueeze(0).repeat({3, 1, 1});
  auto s = probe::residual_spectrum(fake, torch::zeros_like(fake));
  CHECK(s.high_frequency_fraction < 0.1);
}

TEST_CASE("blur_attack: blur sigma -> 0 recovers the clean reconstruction") {
  auto pair = tiny_pair(13);
  auto x = random_patch(32, 11);
  auto r = probe::blur_attack(pair, x, gan::Direction::BAB, 1e-9);
  CHECK(r.blurred_recon_divergence ==
        doctest::Approx(r.clean_recon_divergence).epsilon(1e-4));
  auto r1 = probe::blur_attack(pair, x, gan::Direction::BAB, 1.0);
  CHECK(r1.clean_recon_divergence == doctest::Approx(r.clean_recon_divergence).epsilon(1e-6));
  CHECK(r1.blurred_recon_divergence >= 0.0);
}

TEST_CASE("perturbed_reconstruct at sigma 0 equals the plain cycle reconstruction") {
  auto pair = tiny_pair(17);
  auto x = random_patch(32, 12);
  auto [mid, rec] = gan::cycle_reconstruct(pair, x, gan::Direction::ABA);
  auto pr = probe::perturbed_reconstruct(pair, x, gan::Direction::ABA, {0.0, 5});
  CHECK(torch::equal(pr, rec));
}

TEST_CASE("contact sheet has one row per patch and one column per sigma plus the original") {
  auto pair = tiny_pair(19);
  std::vector<ImagePatch> patches = {random_patch(32, 13), random_patch(32, 14)};
  auto sheet = probe::contact_sheet(pair, patches, {0.0, 0.2, 0.5}, gan::Direction::BAB);
  CHECK(sheet.size(0) == 3);
  // 2 rows x 4 columns of 32px tiles with a 2px gutter between tiles
  CHECK(sheet.size(1) == 2 * 32 + 2);
  CHECK(sheet.size(2) == 4 * 32 + 3 * 2);
  // the original occupies the first tile of each row
  CHECK(torch::equal(sheet.slice(1, 0, 32).slice(2, 0, 32), patches[0].clamp(-1, 1)));
}
