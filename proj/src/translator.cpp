#include "staincycle/translator.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "staincycle/io_store.hpp"
#include "staincycle/rng.hpp"

namespace staincycle::gan {

namespace fs = std::filesystem;
namespace nn = torch::nn;
using nlohmann::json;

// ---- specs -------------------------------------------------------------------

json GeneratorSpec::to_json() const {
  return json{{"n_resnet_blocks", n_resnet_blocks}, {"base_channels", base_channels}};
}
GeneratorSpec GeneratorSpec::from_json(const json& j) {
  GeneratorSpec s;
  s.n_resnet_blocks = j.value("n_resnet_blocks", s.n_resnet_blocks);
  s.base_channels = j.value("base_channels", s.base_channels);
  return s;
}

json DiscriminatorSpec::to_json() const {
  return json{{"depth", depth}, {"base_channels", base_channels}};
}
DiscriminatorSpec DiscriminatorSpec::from_json(const json& j) {
  DiscriminatorSpec s;
  s.depth = j.value("depth", s.depth);
  s.base_channels = j.value("base_channels", s.base_channels);
  return s;
}

// ---- modules -----------------------------------------------------------------

ResnetBlockImpl::ResnetBlockImpl(int channels) {
  body_ = nn::Sequential(
      nn::ReflectionPad2d(1), nn::Conv2d(nn::Conv2dOptions(channels, channels, 3)),
      nn::InstanceNorm2d(channels), nn::ReLU(nn::ReLUOptions().inplace(true)),
      nn::ReflectionPad2d(1), nn::Conv2d(nn::Conv2dOptions(channels, channels, 3)),
      nn::InstanceNorm2d(channels));
  register_module("body", body_);
}

torch::Tensor ResnetBlockImpl::forward(const torch::Tensor& x) { return x + body_->forward(x); }

ResnetGeneratorImpl::ResnetGeneratorImpl(const GeneratorSpec& spec) {
  const int ngf = spec.base_channels;
  nn::Sequential net;
  net->push_back(nn::ReflectionPad2d(3));
  net->push_back(nn::Conv2d(nn::Conv2dOptions(3, ngf, 7)));
  net->push_back(nn::InstanceNorm2d(ngf));
  net->push_back(nn::ReLU(nn::ReLUOptions().inplace(true)));
  int ch = ngf;
  for (int i = 0; i < 2; ++i) {  // two stride-2 downsamplings -> dims must divide by 4
    net->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch * 2, 3).stride(2).padding(1)));
    net->push_back(nn::InstanceNorm2d(ch * 2));
    net->push_back(nn::ReLU(nn::ReLUOptions().inplace(true)));
    ch *= 2;
  }
  for (int i = 0; i < spec.n_resnet_blocks; ++i) net->push_back(ResnetBlock(ch));
  for (int i = 0; i < 2; ++i) {
    net->push_back(nn::ConvTranspose2d(
        nn::ConvTranspose2dOptions(ch, ch / 2, 3).stride(2).padding(1).output_padding(1)));
    net->push_back(nn::InstanceNorm2d(ch / 2));
    net->push_back(nn::ReLU(nn::ReLUOptions().inplace(true)));
    ch /= 2;
  }
  net->push_back(nn::ReflectionPad2d(3));
  net->push_back(nn::Conv2d(nn::Conv2dOptions(ch, 3, 7)));
  net->push_back(nn::Tanh());
  net_ = register_module("net", net);
}

torch::Tensor ResnetGeneratorImpl::forward(const torch::Tensor& x) { return net_->forward(x); }

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const DiscriminatorSpec& spec) {
  const int ndf = spec.base_channels;
  nn::Sequential net;
  net->push_back(nn::Conv2d(nn::Conv2dOptions(3, ndf, 4).stride(2).padding(1)));
  net->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2).inplace(true)));
  int mult = 1;
  for (int i = 1; i < spec.depth; ++i) {
    int prev = mult;
    mult = std::min(1 << i, 8);
    net->push_back(nn::Conv2d(nn::Conv2dOptions(ndf * prev, ndf * mult, 4).stride(2).padding(1)));
    net->push_back(nn::InstanceNorm2d(ndf * mult));
    net->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2).inplace(true)));
  }
  int prev = mult;
  mult = std::min(1 << spec.depth, 8);
  net->push_back(nn::Conv2d(nn::Conv2dOptions(ndf * prev, ndf * mult, 4).stride(1).padding(1)));
  net->push_back(nn::InstanceNorm2d(ndf * mult));
  net->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2).inplace(true)));
  net->push_back(nn::Conv2d(nn::Conv2dOptions(ndf * mult, 1, 4).stride(1).padding(1)));
  net_ = register_module("net", net);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) { return net_->forward(x); }

void init_weights(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& m : module.modules(/*include_self=*/false)) {
    if (auto* conv = m->as<nn::Conv2dImpl>()) {
      nn::init::normal_(conv->weight, 0.0, 0.02);
      if (conv->bias.defined()) nn::init::constant_(conv->bias, 0.0);
    } else if (auto* dconv = m->as<nn::ConvTranspose2dImpl>()) {
      nn::init::normal_(dconv->weight, 0.0, 0.02);
      if (dconv->bias.defined()) nn::init::constant_(dconv->bias, 0.0);
    }
  }
}

// ---- pair --------------------------------------------------------------------

TranslatorPair TranslatorPair::create(const GeneratorSpec& gen, const DiscriminatorSpec& dis,
                                      std::uint64_t seed) {
  torch::manual_seed(static_cast<int64_t>(seed));
  TranslatorPair p;
  p.g_ab = ResnetGenerator(gen);
  p.g_ba = ResnetGenerator(gen);
  p.d_a = PatchDiscriminator(dis);
  p.d_b = PatchDiscriminator(dis);
  init_weights(*p.g_ab);
  init_weights(*p.g_ba);
  init_weights(*p.d_a);
  init_weights(*p.d_b);
  return p;
}

GenFn as_fn(ResnetGenerator gen) {
  return [gen](const torch::Tensor& x) mutable {
    torch::NoGradGuard no_grad;
    return gen->forward(x.unsqueeze(0)).squeeze(0);
  };
}

ImagePatch translate(const GenFn& gen, const ImagePatch& patch) {
  check_image_range(patch, "translate input");
  check_shape_divisible(patch);
  auto out = gen(patch);
  if (out.sizes() != patch.sizes()) throw std::runtime_error("generator changed shape");
  return out;
}

ImagePatch translate(ResnetGenerator gen, const ImagePatch& patch) {
  return translate(as_fn(gen), patch);
}

std::pair<ImagePatch, ImagePatch> cycle_reconstruct(const TranslatorPair& pair,
                                                    const ImagePatch& patch, Direction dir) {
  auto first = dir == Direction::ABA ? pair.g_ab : pair.g_ba;
  auto second = dir == Direction::ABA ? pair.g_ba : pair.g_ab;
  auto intermediate = translate(first, patch);
  auto reconstruction = translate(second, intermediate);
  return {intermediate, reconstruction};
}

double cycle_loss(const std::vector<ImagePatch>& batch_a, const std::vector<ImagePatch>& batch_b,
                  const GenFn& g_ab, const GenFn& g_ba) {
  if (batch_a.empty() || batch_b.empty()) throw std::invalid_argument("empty batch");
  torch::NoGradGuard no_grad;
  double term_a = 0, term_b = 0;
  for (const auto& a : batch_a) term_a += (g_ba(g_ab(a)) - a).abs().mean().item<double>();
  for (const auto& b : batch_b) term_b += (g_ab(g_ba(b)) - b).abs().mean().item<double>();
  return term_a / static_cast<double>(batch_a.size()) + term_b / static_cast<double>(batch_b.size());
}

json CycleGANLossReport::to_json() const {
  return json{{"adv_ab", adv_ab}, {"adv_ba", adv_ba}, {"cyc", cyc},
              {"lambda_cyc", lambda_cyc}, {"total", total}};
}

CycleGANLossReport adversarial_step_losses(const GenFn& g_ab, const GenFn& g_ba, const GenFn& d_a,
                                           const GenFn& d_b, const std::vector<ImagePatch>& batch_a,
                                           const std::vector<ImagePatch>& batch_b,
                                           double lambda_cyc) {
  if (batch_a.empty() || batch_b.empty()) throw std::invalid_argument("empty batch");
  torch::NoGradGuard no_grad;
  CycleGANLossReport r;
  r.lambda_cyc = lambda_cyc;
  // least-squares GAN: generator wants D(fake) == 1
  for (const auto& a : batch_a) {
    r.adv_ab += (d_b(g_ab(a)) - 1.0).pow(2).mean().item<double>();
  }
  for (const auto& b : batch_b) {
    r.adv_ba += (d_a(g_ba(b)) - 1.0).pow(2).mean().item<double>();
  }
  r.adv_ab /= static_cast<double>(batch_a.size());
  r.adv_ba /= static_cast<double>(batch_b.size());
  r.cyc = cycle_loss(batch_a, batch_b, g_ab, g_ba);
  r.total = r.adv_ab + r.adv_ba + lambda_cyc * r.cyc;
  for (double v : {r.adv_ab, r.adv_ba, r.cyc, r.total}) {
    if (!std::isfinite(v)) throw std::runtime_error("non-finite loss term in report");
  }
  return r;
}

CycleGANLossReport adversarial_step_losses(const TranslatorPair& pair,
                                           const std::vector<ImagePatch>& batch_a,
                                           const std::vector<ImagePatch>& batch_b,
                                           double lambda_cyc) {
  auto d_a = [d = pair.d_a](const torch::Tensor& x) mutable {
    torch::NoGradGuard no_grad;
    return d->forward(x.unsqueeze(0)).squeeze(0);
  };
  auto d_b = [d = pair.d_b](const torch::Tensor& x) mutable {
    torch::NoGradGuard no_grad;
    return d->forward(x.unsqueeze(0)).squeeze(0);
  };
  return adversarial_step_losses(as_fn(pair.g_ab), as_fn(pair.g_ba), d_a, d_b, batch_a, batch_b,
                                 lambda_cyc);
}

// ---- training ----------------------------------------------------------------

json TrainConfig::to_json() const {
  return json{{"gen", gen.to_json()},
              {"dis", dis.to_json()},
              {"epochs", epochs},
              {"lr", lr},
              {"lambda_cyc", lambda_cyc},
              {"identity_loss", identity_loss},
              {"lambda_identity", lambda_identity},
              {"pool_size", pool_size},
              {"seed", seed},
              {"checkpoint_every", checkpoint_every},
              {"early_stop_cycle_l1", early_stop_cycle_l1},
              {"domain_tag", domain_tag}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("gen")) c.gen = GeneratorSpec::from_json(j.at("gen"));
  if (j.contains("dis")) c.dis = DiscriminatorSpec::from_json(j.at("dis"));
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.lambda_cyc = j.value("lambda_cyc", c.lambda_cyc);
  c.identity_loss = j.value("identity_loss", c.identity_loss);
  c.lambda_identity = j.value("lambda_identity", c.lambda_identity);
  c.pool_size = j.value("pool_size", c.pool_size);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.early_stop_cycle_l1 = j.value("early_stop_cycle_l1", c.early_stop_cycle_l1);
  c.domain_tag = j.value("domain_tag", c.domain_tag);
  return c;
}

ImagePool::ImagePool(int capacity, std::uint64_t seed)
    : capacity_(capacity), rng_(make_rng(seed)) {}

torch::Tensor ImagePool::query(const torch::Tensor& image) {
  if (capacity_ <= 0) return image;
  if (static_cast<int>(images_.size()) < capacity_) {
    images_.push_back(image.clone());
    return image;
  }
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng_) > 0.5) {
    std::uniform_int_distribution<std::size_t> pick(0, images_.size() - 1);
    const std::size_t i = pick(rng_);
    auto out = images_[i];
    images_[i] = image.clone();
    return out;
  }
  return image;
}

namespace {

std::string epoch_dir_name(int epoch) { return "epoch_" + std::to_string(epoch); }

std::map<std::string, std::shared_ptr<torch::nn::Module>> pair_modules(const TranslatorPair& p) {
  return {{"g_ab", p.g_ab.ptr()}, {"g_ba", p.g_ba.ptr()}, {"d_a", p.d_a.ptr()},
          {"d_b", p.d_b.ptr()}};
}

}  // namespace

void save_pair(const fs::path& dir, const TranslatorPair& pair, const GeneratorSpec& gen,
               const DiscriminatorSpec& dis) {
  json meta;
  meta["gen"] = gen.to_json();
  meta["dis"] = dis.to_json();
  meta["config_hash"] = pair.config_hash;
  meta["epoch"] = pair.epoch;
  meta["trained"] = pair.trained;
  meta["domain_tag"] = pair.domain_tag;
  io::save_checkpoint(dir, pair_modules(pair), meta);
}

TranslatorPair load_pair(const fs::path& dir) {
  json meta = io::read_checkpoint_meta(dir).at("meta");
  TranslatorPair p = TranslatorPair::create(GeneratorSpec::from_json(meta.at("gen")),
                                            DiscriminatorSpec::from_json(meta.at("dis")),
                                            /*seed=*/0);
  io::load_checkpoint(dir, pair_modules(p));
  p.config_hash = meta.value("config_hash", 0ULL);
  p.epoch = meta.value("epoch", 0);
  p.trained = meta.value("trained", false);
  p.domain_tag = meta.value("domain_tag", "");
  return p;
}

void write_history_csv(const fs::path& path, const TrainHistory& history) {
  std::ostringstream os;
  os << "epoch,adv_ab,adv_ba,cyc,total,d_a,d_b,eval_cycle_l1\n";
  for (const auto& e : history) {
    os << e.epoch << "," << e.adv_ab << "," << e.adv_ba << "," << e.cyc << "," << e.total << ","
       << e.d_a << "," << e.d_b << "," << e.eval_cycle_l1 << "\n";
  }
  io::atomic_write(path, os.str());
}

std::pair<TranslatorPair, TrainHistory> train_cyclegan(const std::vector<ImagePatch>& data_a,
                                                       const std::vector<ImagePatch>& data_b,
                                                       const TrainConfig& config,
                                                       const fs::path& out_dir,
                                                       const std::vector<ImagePatch>& eval_a,
                                                       const std::vector<ImagePatch>& eval_b) {
  if (data_a.empty() || data_b.empty()) throw std::invalid_argument("empty training set");
  fs::create_directories(out_dir);

  auto pair = TranslatorPair::create(config.gen, config.dis, config.seed);
  pair.config_hash = io::config_hash(config.to_json());
  pair.domain_tag = config.domain_tag;
  io::atomic_write(out_dir / "config.json", config.to_json().dump(2));

  using torch::optim::Adam;
  using torch::optim::AdamOptions;
  std::vector<torch::Tensor> g_params = pair.g_ab->parameters();
  for (auto& p : pair.g_ba->parameters()) g_params.push_back(p);
  Adam opt_g(g_params, AdamOptions(config.lr).betas({0.5, 0.999}));
  Adam opt_da(pair.d_a->parameters(), AdamOptions(config.lr).betas({0.5, 0.999}));
  Adam opt_db(pair.d_b->parameters(), AdamOptions(config.lr).betas({0.5, 0.999}));

  ImagePool pool_a(config.pool_size, mix_seeds(config.seed, 0xA));
  ImagePool pool_b(config.pool_size, mix_seeds(config.seed, 0xB));
  auto order_rng = make_rng(mix_seeds(config.seed, 0x5EED));

  auto mse_to = [](const torch::Tensor& x, double target) {
    return (x - target).pow(2).mean();
  };

  const std::size_t iters = std::max(data_a.size(), data_b.size());
  TrainHistory history;

  auto checkpoint = [&](int epoch) {
    TranslatorPair snap = pair;
    snap.epoch = epoch;
    save_pair(out_dir / epoch_dir_name(epoch), snap, config.gen, config.dis);
    write_history_csv(out_dir / "history.csv", history);
  };

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    // linear decay to zero over the last half of training
    const double half = config.epochs / 2.0;
    const double lr_scale =
        epoch <= half ? 1.0 : std::max(0.0, (config.epochs - epoch + 1) / (config.epochs - half));
    for (auto* opt : {&opt_g, &opt_da, &opt_db}) {
      for (auto& group : opt->param_groups()) {
        static_cast<AdamOptions&>(group.options()).lr(config.lr * lr_scale);
      }
    }

    std::vector<std::size_t> idx_a(data_a.size()), idx_b(data_b.size());
    std::iota(idx_a.begin(), idx_a.end(), 0);
    std::iota(idx_b.begin(), idx_b.end(), 0);
    std::shuffle(idx_a.begin(), idx_a.end(), order_rng);
    std::shuffle(idx_b.begin(), idx_b.end(), order_rng);

    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t it = 0; it < iters; ++it) {
      auto real_a = data_a[idx_a[it % idx_a.size()]].unsqueeze(0);
      auto real_b = data_b[idx_b[it % idx_b.size()]].unsqueeze(0);

      // generator step
      opt_g.zero_grad();
      auto fake_b = pair.g_ab->forward(real_a);
      auto rec_a = pair.g_ba->forward(fake_b);
      auto fake_a = pair.g_ba->forward(real_b);
      auto rec_b = pair.g_ab->forward(fake_a);
      auto adv_ab = mse_to(pair.d_b->forward(fake_b), 1.0);
      auto adv_ba = mse_to(pair.d_a->forward(fake_a), 1.0);
      auto cyc = (rec_a - real_a).abs().mean() + (rec_b - real_b).abs().mean();
      auto loss_g = adv_ab + adv_ba + config.lambda_cyc * cyc;
      if (config.identity_loss) {
        auto idt = (pair.g_ab->forward(real_b) - real_b).abs().mean() +
                   (pair.g_ba->forward(real_a) - real_a).abs().mean();
        loss_g = loss_g + config.lambda_identity * idt;
      }
      loss_g.backward();
      opt_g.step();

      // discriminator steps, on pooled historic fakes
      opt_da.zero_grad();
      auto loss_da = 0.5 * (mse_to(pair.d_a->forward(real_a), 1.0) +
                            mse_to(pair.d_a->forward(pool_a.query(fake_a.detach())), 0.0));
      loss_da.backward();
      opt_da.step();

      opt_db.zero_grad();
      auto loss_db = 0.5 * (mse_to(pair.d_b->forward(real_b), 1.0) +
                            mse_to(pair.d_b->forward(pool_b.query(fake_b.detach())), 0.0));
      loss_db.backward();
      opt_db.step();

      const double g_total = loss_g.item<double>();
      const double da = loss_da.item<double>();
      const double db = loss_db.item<double>();
      if (!std::isfinite(g_total) || !std::isfinite(da) || !std::isfinite(db)) {
        history.push_back(stats);
        checkpoint(epoch);
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                 " (g=" + std::to_string(g_total) + " d_a=" + std::to_string(da) +
                                 " d_b=" + std::to_string(db) + "); partial checkpoint written");
      }
      stats.adv_ab += adv_ab.item<double>();
      stats.adv_ba += adv_ba.item<double>();
      stats.cyc += cyc.item<double>();
      stats.total += g_total;
      stats.d_a += da;
      stats.d_b += db;
    }
    const double n = static_cast<double>(iters);
    stats.adv_ab /= n;
    stats.adv_ba /= n;
    stats.cyc /= n;
    stats.total /= n;
    stats.d_a /= n;
    stats.d_b /= n;

    const auto& ea = eval_a.empty() ? data_a : eval_a;
    const auto& eb = eval_b.empty() ? data_b : eval_b;
    stats.eval_cycle_l1 =
        0.5 * cycle_loss(ea, eb, as_fn(pair.g_ab), as_fn(pair.g_ba));
    history.push_back(stats);
    write_history_csv(out_dir / "history.csv", history);

    const bool last = epoch == config.epochs;
    const bool stop = config.early_stop_cycle_l1 > 0 &&
                      stats.eval_cycle_l1 <= config.early_stop_cycle_l1;
    if (last || stop || (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0)) {
      checkpoint(epoch);
    }
    if (stop) break;
  }

  pair.trained = true;
  pair.epoch = history.back().epoch;
  save_pair(out_dir / "final", pair, config.gen, config.dis);
  write_history_csv(out_dir / "history.csv", history);
  return {pair, history};
}

}  // namespace staincycle::gan
