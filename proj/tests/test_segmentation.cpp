#include <cmath>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "staincycle/image.hpp"
#include "staincycle/segmentation.hpp"
#include "staincycle/synthstain.hpp"

// doctest last so its CHECK macro wins over torch's logging macro
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

using namespace staincycle;
namespace fs = std::filesystem;

namespace {

// Tiny labeled set rendered from the synthetic generator: real colors and
// real masks, so the net has something learnable even in two epochs.
std::vector<aug::LabeledSample> synthetic_set(int n, std::uint64_t seed0, int size = 32) {
  synth::SynthConfig c;
  c.patch_size = size;
  std::vector<aug::LabeledSample> out;
  for (int i = 0; i < n; ++i) {
    const auto s = seed0 + static_cast<std::uint64_t>(i);
    auto m = synth::generate_morphology(c, s);
    auto r = synth::render_stain(m, synth::Domain::B, s, c);
    aug::LabeledSample lab;
    lab.image = r.image;
    lab.mask = m.structure_mask;
    lab.id = "synth_" + std::to_string(s);
    out.push_back(std::move(lab));
  }
  return out;
}

seg::SegConfig tiny_config() {
  seg::SegConfig c;
  c.epochs = 2;
  c.base_channels = 4;
  c.depth = 2;
  c.batch_size = 2;
  return c;
}

}  // namespace

TEST_CASE("metrics_from_counts matches the confusion-matrix definitions") {
  // Oracle: direct formulas evaluated in double precision.
  const std::int64_t tp = 37, fp = 11, fn = 5;
  auto m = seg::metrics_from_counts(tp, fp, fn);
  const double p = 37.0 / 48.0, r = 37.0 / 42.0;
  CHECK(m.precision == doctest::Approx(p).epsilon(1e-9));
  CHECK(m.recall == doctest::Approx(r).epsilon(1e-9));
  CHECK(m.f1 == doctest::Approx(2 * p * r / (p + r)).epsilon(1e-9));
}

TEST_CASE("metrics_from_counts honours the 0/0 convention") {
  auto empty = seg::metrics_from_counts(0, 0, 0);
  CHECK(empty.f1 == 0.0);
  CHECK(empty.precision == 0.0);
  CHECK(empty.recall == 0.0);
  auto none_predicted = seg::metrics_from_counts(0, 0, 10);
  CHECK(none_predicted.precision == 0.0);
  CHECK(none_predicted.recall == 0.0);
  auto all_wrong = seg::metrics_from_counts(0, 10, 0);
  CHECK(all_wrong.precision == 0.0);
  CHECK(all_wrong.f1 == 0.0);
}

TEST_CASE("metrics report json and csv round trips") {
  seg::MetricsReport m = seg::metrics_from_counts(10, 2, 3);
  m.obj_f1 = 0.5;
  m.obj_precision = 0.4;
  m.obj_recall = 0.6;
  m.data_fraction_label = "30%";
  m.augmented = true;
  auto back = seg::MetricsReport::from_json(m.to_json());
  CHECK(back.f1 == m.f1);
  CHECK(back.obj_precision == m.obj_precision);
  CHECK(back.data_fraction_label == m.data_fraction_label);
  CHECK(back.augmented == m.augmented);
  // header and row have the same number of fields
  auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  CHECK(commas(seg::MetricsReport::csv_header()) == commas(m.csv_row()));
}

TEST_CASE("norm stats match hand-computed values") {
  aug::LabeledSample s1, s2;
  s1.image = torch::full({3, 4, 4}, -1.0f);  // unit-range 0
  s2.image = torch::full({3, 4, 4}, 1.0f);   // unit-range 1
  s1.mask = s2.mask = torch::zeros({4, 4}, torch::kBool);
  s1.id = "a";
  s2.id = "b";
  auto mean = seg::compute_norm_stats_mean({s1, s2});
  auto sd = seg::compute_norm_stats_std({s1, s2}, mean);
  for (int c = 0; c < 3; ++c) {
    CHECK(mean[c] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(sd[c] == doctest::Approx(0.5).epsilon(1e-3));  // population std of {0,1}
  }
}

TEST_CASE("evaluate agrees with a brute-force pixel confusion matrix") {
  // An untrained net is a fine prediction source: we only need evaluate()'s
  // counting to match an independent tally on the same thresholded output.
  auto data = synthetic_set(3, 50);
  torch::manual_seed(0);
  seg::SegModel model;
  model.net = seg::UNet(4, 2);
  model.config = tiny_config();
  auto rep = seg::evaluate(model, data, 0.5);
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (const auto& s : data) {
    auto pred = seg::predict(model, s.image) > 0.5;
    tp += (pred & s.mask).sum().item<std::int64_t>();
    fp += (pred & ~s.mask).sum().item<std::int64_t>();
    fn += (~pred & s.mask).sum().item<std::int64_t>();
  }
  auto oracle = seg::metrics_from_counts(tp, fp, fn);
  CHECK(rep.f1 == doctest::Approx(oracle.f1).epsilon(1e-9));
  CHECK(rep.precision == doctest::Approx(oracle.precision).epsilon(1e-9));
  CHECK(rep.recall == doctest::Approx(oracle.recall).epsilon(1e-9));
}

TEST_CASE("object metrics: perfect prediction scores 1, empty scores 0 recall") {
  // Object-level fields must be valid rates, and a threshold above 1 (so
  // nothing is ever predicted) must drive both recall levels to exactly 0.
  auto data = synthetic_set(2, 70);
  torch::manual_seed(0);
  seg::SegModel model;
  model.net = seg::UNet(4, 2);
  model.config = tiny_config();
  auto rep = seg::evaluate(model, data, 0.5);
  for (double v : {rep.obj_f1, rep.obj_precision, rep.obj_recall}) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // threshold 1.0+ never predicts foreground: recall 0 at both levels
  auto none = seg::evaluate(model, data, 1.01);
  CHECK(none.recall == 0.0);
  CHECK(none.obj_recall == 0.0);
}

TEST_CASE("pixel recall is monotone non-increasing in the threshold") {
  auto data = synthetic_set(2, 90);
  torch::manual_seed(3);
  seg::SegModel model;
  model.net = seg::UNet(4, 2);
  model.config = tiny_config();
  double last = 1.0;
  for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    auto r = seg::evaluate(model, data, t);
    CHECK(r.recall <= last + 1e-12);
    last = r.recall;
  }
}

TEST_CASE("predict returns probabilities of the input's spatial shape") {
  torch::manual_seed(1);
  seg::SegModel model;
  model.net = seg::UNet(4, 2);
  model.config = tiny_config();
  auto x = synthetic_set(1, 110)[0].image;
  auto p = seg::predict(model, x);
  CHECK(p.dim() == 2);
  CHECK(p.size(0) == x.size(1));
  CHECK(p.size(1) == x.size(2));
  CHECK(p.min().item<float>() >= 0.0f);
  CHECK(p.max().item<float>() <= 1.0f);
}

TEST_CASE("train_unet refuses overlapping train/val ids") {
  auto data = synthetic_set(4, 130);
  std::vector<aug::LabeledSample> train(data.begin(), data.begin() + 3);
  std::vector<aug::LabeledSample> val(data.begin() + 2, data.end());  // shares one id
  CHECK_THROWS(seg::train_unet(train, val, tiny_config()));
}

TEST_CASE("two-epoch training learns something and snapshots the best epoch") {
  auto train = synthetic_set(8, 150);
  auto val = synthetic_set(3, 250);
  auto cfg = tiny_config();
  cfg.epochs = 3;
  auto [model, history] = seg::train_unet(train, val, cfg);
  REQUIRE(history.size() == 3);
  for (const auto& e : history) CHECK(std::isfinite(e.train_loss));
  CHECK(model.best_epoch >= 1);
  CHECK(model.best_epoch <= 3);
  double best = 0;
  for (const auto& e : history) best = std::max(best, e.val_f1);
  CHECK(model.best_val_f1 == doctest::Approx(best).epsilon(1e-9));
  // the snapshot actually reproduces the reported best F1
  auto rep = seg::evaluate(model, val, cfg.threshold);
  CHECK(rep.f1 == doctest::Approx(model.best_val_f1).epsilon(1e-6));
}

TEST_CASE("training is reproducible for a fixed seed") {
  auto train = synthetic_set(4, 350);
  auto val = synthetic_set(2, 450);
  auto cfg = tiny_config();
  cfg.seed = 42;
  auto [m1, h1] = seg::train_unet(train, val, cfg);
  auto [m2, h2] = seg::train_unet(train, val, cfg);
  CHECK(h1[0].train_loss == doctest::Approx(h2[0].train_loss).epsilon(1e-12));
  auto x = train[0].image;
  CHECK(torch::equal(seg::predict(m1, x), seg::predict(m2, x)));
}

TEST_CASE("model save/load round trip preserves predictions and metadata") {
  auto train = synthetic_set(4, 550);
  auto val = synthetic_set(2, 650);
  auto [model, history] = seg::train_unet(train, val, tiny_config());
  auto dir = fs::temp_directory_path() / "staincycle_seg_roundtrip";
  fs::remove_all(dir);
  seg::save_model(dir, model);
  auto loaded = seg::load_model(dir);
  CHECK(loaded.best_epoch == model.best_epoch);
  CHECK(loaded.best_val_f1 == doctest::Approx(model.best_val_f1));
  CHECK(loaded.config_hash == model.config_hash);
  for (int c = 0; c < 3; ++c) {
    CHECK(loaded.norm_mean[c] == doctest::Approx(model.norm_mean[c]));
    CHECK(loaded.norm_std[c] == doctest::Approx(model.norm_std[c]));
  }
  auto x = val[0].image;
  CHECK(torch::equal(seg::predict(loaded, x), seg::predict(model, x)));
  fs::remove_all(dir);
}
