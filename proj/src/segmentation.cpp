#include "staincycle/segmentation.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "staincycle/io_store.hpp"
#include "staincycle/rng.hpp"

namespace staincycle::seg {

namespace fs = std::filesystem;
namespace nn = torch::nn;
using nlohmann::json;

json SegConfig::to_json() const {
  return json{{"epochs", epochs},     {"lr", lr},
              {"batch_size", batch_size}, {"threshold", threshold},
              {"seed", seed},         {"flips", flips},
              {"base_channels", base_channels}, {"depth", depth}};
}

SegConfig SegConfig::from_json(const json& j) {
  SegConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.threshold = j.value("threshold", c.threshold);
  c.seed = j.value("seed", c.seed);
  c.flips = j.value("flips", c.flips);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  return c;
}

namespace {

nn::Sequential double_conv(int in, int out) {
  return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)),
                        nn::InstanceNorm2d(out), nn::ReLU(nn::ReLUOptions().inplace(true)),
                        nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)),
                        nn::InstanceNorm2d(out), nn::ReLU(nn::ReLUOptions().inplace(true)));
}

}  // namespace

UNetImpl::UNetImpl(int base_channels, int depth) : depth_(depth) {
  int ch = base_channels;
  int in = 3;
  for (int d = 0; d < depth; ++d) {
    enc_.push_back(double_conv(in, ch));
    register_module("enc" + std::to_string(d), enc_.back());
    in = ch;
    ch *= 2;
  }
  bottleneck_ = double_conv(in, ch);
  register_module("bottleneck", bottleneck_);
  for (int d = 0; d < depth; ++d) {
    up_.push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(ch, ch / 2, 2).stride(2)));
    register_module("up" + std::to_string(d), up_.back());
    dec_.push_back(double_conv(ch, ch / 2));
    register_module("dec" + std::to_string(d), dec_.back());
    ch /= 2;
  }
  head_ = nn::Conv2d(nn::Conv2dOptions(ch, 1, 1));
  register_module("head", head_);
}

torch::Tensor UNetImpl::forward(torch::Tensor x) {
  namespace F = torch::nn::functional;
  std::vector<torch::Tensor> skips;
  for (int d = 0; d < depth_; ++d) {
    x = enc_[d]->forward(x);
    skips.push_back(x);
    x = F::max_pool2d(x, F::MaxPool2dFuncOptions(2));
  }
  x = bottleneck_->forward(x);
  for (int d = 0; d < depth_; ++d) {
    x = up_[d]->forward(x);
    x = dec_[d]->forward(torch::cat({skips[depth_ - 1 - d], x}, 1));
  }
  return head_->forward(x);
}

// ---- metrics ------------------------------------------------------------------

MetricsReport metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  MetricsReport r;
  r.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  r.recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall)
                                      : 0.0;
  return r;
}

json MetricsReport::to_json() const {
  return json{{"f1", f1},
              {"precision", precision},
              {"recall", recall},
              {"obj_f1", obj_f1},
              {"obj_precision", obj_precision},
              {"obj_recall", obj_recall},
              {"data_fraction_label", data_fraction_label},
              {"augmented", augmented}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  r.f1 = j.value("f1", 0.0);
  r.precision = j.value("precision", 0.0);
  r.recall = j.value("recall", 0.0);
  r.obj_f1 = j.value("obj_f1", 0.0);
  r.obj_precision = j.value("obj_precision", 0.0);
  r.obj_recall = j.value("obj_recall", 0.0);
  r.data_fraction_label = j.value("data_fraction_label", "");
  r.augmented = j.value("augmented", false);
  return r;
}

std::string MetricsReport::csv_header() {
  return "f1,precision,recall,obj_f1,obj_precision,obj_recall,data_fraction_label,augmented";
}

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << f1 << "," << precision << "," << recall << "," << obj_f1 << "," << obj_precision << ","
     << obj_recall << "," << data_fraction_label << "," << (augmented ? 1 : 0);
  return os.str();
}

// ---- normalisation -------------------------------------------------------------

std::array<double, 3> compute_norm_stats_mean(const std::vector<aug::LabeledSample>& train) {
  std::array<double, 3> m{0, 0, 0};
  for (const auto& s : train) {
    auto u = to_unit_range(s.image);
    for (int c = 0; c < 3; ++c) m[c] += u[c].mean().item<double>();
  }
  for (auto& v : m) v /= static_cast<double>(train.size());
  return m;
}

std::array<double, 3> compute_norm_stats_std(const std::vector<aug::LabeledSample>& train,
                                             const std::array<double, 3>& mean) {
  std::array<double, 3> v{0, 0, 0};
  std::int64_t n = 0;
  for (const auto& s : train) {
    auto u = to_unit_range(s.image);
    for (int c = 0; c < 3; ++c) v[c] += (u[c] - mean[c]).pow(2).sum().item<double>();
    n += s.image.size(1) * s.image.size(2);
  }
  std::array<double, 3> out{};
  for (int c = 0; c < 3; ++c) out[c] = std::max(1e-6, std::sqrt(v[c] / static_cast<double>(n)));
  return out;
}

namespace {

torch::Tensor normalise(const ImagePatch& image, const std::array<double, 3>& mean,
                        const std::array<double, 3>& stddev) {
  auto u = to_unit_range(image);
  auto m = torch::tensor({(float)mean[0], (float)mean[1], (float)mean[2]}).view({3, 1, 1});
  auto s = torch::tensor({(float)stddev[0], (float)stddev[1], (float)stddev[2]}).view({3, 1, 1});
  return (u - m) / s;
}

}  // namespace

// ---- training -------------------------------------------------------------------

std::pair<SegModel, SegHistory> train_unet(const std::vector<aug::LabeledSample>& train,
                                           const std::vector<aug::LabeledSample>& val,
                                           const SegConfig& config,
                                           const aug::Augmenter* augmenter) {
  if (train.empty() || val.empty()) throw std::invalid_argument("empty train or val set");
  std::set<std::string> train_ids, val_ids;
  for (const auto& s : train) train_ids.insert(s.id);
  for (const auto& s : val) {
    if (train_ids.count(s.id)) {
      throw std::invalid_argument("train/val leakage: shared sample id " + s.id);
    }
  }

  torch::manual_seed(static_cast<int64_t>(config.seed));
  SegModel model;
  model.config = config;
  model.net = UNet(config.base_channels, config.depth);
  model.norm_mean = compute_norm_stats_mean(train);
  model.norm_std = compute_norm_stats_std(train, model.norm_mean);
  model.config_hash = io::config_hash(config.to_json());

  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(config.lr));
  auto rng = make_rng(mix_seeds(config.seed, 0x5e6));
  auto bce = nn::BCEWithLogitsLoss();

  SegHistory history;
  std::vector<torch::Tensor> best_params;
  double best_f1 = -1.0;
  int best_epoch = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    model.net->train();
    double loss_sum = 0;
    int n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<torch::Tensor> xs, ys;
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) {
        const auto& s = train[order[k]];
        aug::LabeledSample cur = s;
        if (augmenter) cur = augmenter->apply(s, rng());
        auto x = normalise(cur.image, model.norm_mean, model.norm_std);
        auto y = cur.mask.to(torch::kFloat32).unsqueeze(0);
        if (config.flips) {
          std::uniform_int_distribution<int> coin(0, 1);
          if (coin(rng)) {
            x = torch::flip(x, {2});
            y = torch::flip(y, {2});
          }
          if (coin(rng)) {
            x = torch::flip(x, {1});
            y = torch::flip(y, {1});
          }
        }
        xs.push_back(x);
        ys.push_back(y);
      }
      opt.zero_grad();
      auto logits = model.net->forward(torch::stack(xs));
      auto loss = bce(logits, torch::stack(ys));
      loss.backward();
      opt.step();
      const double l = loss.item<double>();
      if (!std::isfinite(l)) {
        throw std::runtime_error("non-finite segmentation loss at epoch " +
                                 std::to_string(epoch));
      }
      loss_sum += l;
      ++n_batches;
    }

    // validation F1 at the configured threshold
    auto report = evaluate(model, val, config.threshold);
    history.push_back({epoch, loss_sum / n_batches, report.f1});
    if (report.f1 > best_f1) {
      best_f1 = report.f1;
      best_epoch = epoch;
      best_params.clear();
      torch::NoGradGuard no_grad;
      for (const auto& p : model.net->parameters()) best_params.push_back(p.clone());
    }
  }

  {
    torch::NoGradGuard no_grad;
    auto params = model.net->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(best_params[i]);
  }
  model.best_epoch = best_epoch;
  model.best_val_f1 = best_f1;
  return {model, history};
}

torch::Tensor predict(const SegModel& model, const ImagePatch& patch) {
  check_image(patch, "predict input");
  torch::NoGradGuard no_grad;
  auto net = model.net;
  net->eval();
  auto x = normalise(patch, model.norm_mean, model.norm_std).unsqueeze(0);
  auto logits = net->forward(x);
  if (logits.size(2) != patch.size(1) || logits.size(3) != patch.size(2)) {
    throw std::runtime_error("prediction shape mismatch");
  }
  return torch::sigmoid(logits).squeeze(0).squeeze(0);
}

// ---- evaluation ------------------------------------------------------------------

namespace {

struct ObjCounts {
  std::int64_t tp = 0, fp = 0, fn = 0;
};

// Connected-component matching at IoU >= 0.5; greedy one-to-one.
ObjCounts object_counts(const torch::Tensor& pred_mask, const torch::Tensor& gt_mask) {
  auto to_cv = [](const torch::Tensor& m) {
    auto u8 = m.to(torch::kUInt8).contiguous();
    return cv::Mat(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1,
                   u8.data_ptr<std::uint8_t>())
        .clone();
  };
  cv::Mat pred_cc, gt_cc;
  const int n_pred = cv::connectedComponents(to_cv(pred_mask), pred_cc) - 1;
  const int n_gt = cv::connectedComponents(to_cv(gt_mask), gt_cc) - 1;

  std::vector<bool> gt_matched(n_gt + 1, false);
  ObjCounts c;
  for (int p = 1; p <= n_pred; ++p) {
    cv::Mat pm = pred_cc == p;
    int best_gt = 0;
    double best_iou = 0;
    for (int g = 1; g <= n_gt; ++g) {
      if (gt_matched[g]) continue;
      cv::Mat gm = gt_cc == g;
      const double inter = cv::countNonZero(pm & gm);
      if (inter == 0) continue;
      const double uni = cv::countNonZero(pm | gm);
      const double iou = inter / uni;
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = g;
      }
    }
    if (best_iou >= 0.5) {
      gt_matched[best_gt] = true;
      ++c.tp;
    } else {
      ++c.fp;
    }
  }
  c.fn = n_gt - c.tp;
  return c;
}

}  // namespace

MetricsReport evaluate(const SegModel& model, const std::vector<aug::LabeledSample>& test,
                       double threshold) {
  if (test.empty()) throw std::invalid_argument("empty test set");
  std::int64_t tp = 0, fp = 0, fn = 0;
  ObjCounts obj;
  for (const auto& s : test) {
    auto prob = predict(model, s.image);
    auto pred = prob >= threshold;
    auto gt = s.mask.to(torch::kBool);
    tp += (pred & gt).sum().item<std::int64_t>();
    fp += (pred & ~gt).sum().item<std::int64_t>();
    fn += (~pred & gt).sum().item<std::int64_t>();
    auto oc = object_counts(pred, gt);
    obj.tp += oc.tp;
    obj.fp += oc.fp;
    obj.fn += oc.fn;
  }
  auto r = metrics_from_counts(tp, fp, fn);
  auto ro = metrics_from_counts(obj.tp, obj.fp, obj.fn);
  r.obj_f1 = ro.f1;
  r.obj_precision = ro.precision;
  r.obj_recall = ro.recall;
  return r;
}

// ---- persistence -----------------------------------------------------------------

void save_model(const fs::path& dir, const SegModel& model) {
  json meta;
  meta["config"] = model.config.to_json();
  meta["norm_mean"] = model.norm_mean;
  meta["norm_std"] = model.norm_std;
  meta["best_epoch"] = model.best_epoch;
  meta["best_val_f1"] = model.best_val_f1;
  meta["config_hash"] = model.config_hash;
  io::save_checkpoint(dir, {{"unet", model.net.ptr()}}, meta);
}

SegModel load_model(const fs::path& dir) {
  json meta = io::read_checkpoint_meta(dir).at("meta");
  SegModel m;
  m.config = SegConfig::from_json(meta.at("config"));
  m.net = UNet(m.config.base_channels, m.config.depth);
  io::load_checkpoint(dir, {{"unet", m.net.ptr()}});
  m.norm_mean = meta.at("norm_mean").get<std::array<double, 3>>();
  m.norm_std = meta.at("norm_std").get<std::array<double, 3>>();
  m.best_epoch = meta.value("best_epoch", 0);
  m.best_val_f1 = meta.value("best_val_f1", 0.0);
  m.config_hash = meta.value("config_hash", 0ULL);
  return m;
}

std::vector<aug::LabeledSample> load_labeled(const fs::path& dir) {
  auto manifest = io::load_manifest(dir / "manifest.json");
  std::vector<aug::LabeledSample> out;
  // entries come in (image, mask) pairs per sample
  for (std::size_t i = 0; i + 1 < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    const auto& m = manifest.entries[i + 1];
    if (e.role != "imageB" || m.role != "mask") continue;
    aug::LabeledSample s;
    s.image = io::load_image(dir / e.path);
    s.mask = io::load_mask(dir / m.path);
    // prefix the dataset's config hash: file names repeat across datasets,
    // and ids must stay unique when splits from several datasets meet in the
    // same disjointness check
    char prefix[20];
    std::snprintf(prefix, sizeof(prefix), "%016llx",
                  static_cast<unsigned long long>(manifest.config_hash));
    s.id = std::string(prefix) + ":" + e.path + ":" + e.split;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace staincycle::seg
