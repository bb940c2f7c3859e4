#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "staincycle/attack_probe.hpp"
#include "staincycle/augment.hpp"
#include "staincycle/experiments.hpp"
#include "staincycle/io_store.hpp"
#include "staincycle/segmentation.hpp"
#include "staincycle/synthstain.hpp"
#include "staincycle/translator.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace staincycle;

namespace {

json load_json_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  return json::parse(f);
}

std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

// pos/neg split helpers keyed on the labeled-dataset manifest split tags
std::vector<aug::LabeledSample> load_split(const fs::path& dir) {
  return seg::load_labeled(dir);
}

int cmd_synth(const std::string& config_path, const std::string& out, int n, bool paired,
              bool labeled, int neg_per_pos) {
  auto cfg = synth::SynthConfig::from_json(load_json_file(config_path));
  if (labeled) {
    synth::build_labeled_dataset(cfg, n, neg_per_pos, out);
  } else {
    synth::build_dataset(cfg, n, paired, out);
  }
  std::cout << "dataset written to " << out << "\n";
  return 0;
}

int cmd_train_cyclegan(const std::string& data_a, const std::string& data_b,
                       const std::string& config_path, const std::string& out,
                       std::uint64_t seed) {
  auto for_training = [](const fs::path& dir) {
    auto manifest = io::load_manifest(dir / "manifest.json");
    for (const auto& e : manifest.entries) {
      if (e.split == "paired") {
        throw std::runtime_error("refusing paired dataset for translator training: " +
                                 dir.string());
      }
    }
  };
  for_training(data_a);
  for_training(data_b);
  auto a = synth::load_images(data_a, "imageA");
  auto b = synth::load_images(data_b, "imageB");
  auto cfg = gan::TrainConfig::from_json(load_json_file(config_path));
  cfg.seed = seed;
  auto [pair, history] = gan::train_cyclegan(a, b, cfg, out);
  std::cout << "trained " << history.size() << " epochs; final cycle L1 "
            << history.back().eval_cycle_l1 << "; checkpoints under " << out << "\n";
  return 0;
}

int cmd_probe_sweep(const std::string& ckpt, const std::string& data, const std::string& sigmas,
                    int repeats, const std::string& out) {
  auto pair = gan::load_pair(ckpt);
  auto patches = synth::load_images(data, "imageB");
  auto grid = parse_grid(sigmas);
  fs::create_directories(out);
  auto curve = probe::sigma_sweep(pair, patches, grid, repeats);
  io::atomic_write(fs::path(out) / "curve.csv", curve.to_csv());
  probe::plot_divergence_curve(curve, fs::path(out) / "divergence_vs_sigma.png");
  std::vector<ImagePatch> sheet_patches(patches.begin(),
                                        patches.begin() + std::min<std::size_t>(4, patches.size()));
  auto sheet = probe::contact_sheet(pair, sheet_patches, grid, gan::Direction::BAB);
  io::save_image(fs::path(out) / "contact_sheet.png", sheet.clamp(-1, 1));
  std::cout << curve.to_csv();
  return 0;
}

int cmd_probe_blur(const std::string& ckpt, const std::string& data, double blur_sigma,
                   const std::string& out) {
  auto pair = gan::load_pair(ckpt);
  auto patches = synth::load_images(data, "imageB");
  std::ostringstream os;
  os << "patch,clean_divergence,blurred_divergence\n";
  for (std::size_t i = 0; i < patches.size(); ++i) {
    auto r = probe::blur_attack(pair, patches[i], gan::Direction::BAB, blur_sigma);
    os << i << "," << r.clean_recon_divergence << "," << r.blurred_recon_divergence << "\n";
  }
  fs::create_directories(out);
  io::atomic_write(fs::path(out) / "blur_attack.csv", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_train_seg(const std::string& data, const std::string& val_data,
                  const std::string& config_path, const std::string& out, std::uint64_t seed,
                  double augment_epsilon, double augment_probability,
                  const std::string& pair_ckpt) {
  auto train = load_split(data);
  auto val = load_split(val_data);
  json j = load_json_file(config_path);
  auto cfg = seg::SegConfig::from_json(j.contains("seg") ? j.at("seg") : j);
  cfg.seed = seed;

  std::unique_ptr<aug::Augmenter> augmenter;
  std::shared_ptr<const gan::TranslatorPair> pair;
  if (augment_epsilon > 0) {
    if (pair_ckpt.empty()) throw std::runtime_error("--pair is required with --augment-epsilon");
    pair = std::make_shared<gan::TranslatorPair>(gan::load_pair(pair_ckpt));
    aug::AugmentConfig ac;
    ac.epsilon = augment_epsilon;
    ac.probability = augment_probability;
    ac.preset = pair->domain_tag;
    augmenter = std::make_unique<aug::Augmenter>(ac, pair);
  }
  auto [model, history] = seg::train_unet(train, val, cfg, augmenter.get());
  seg::save_model(out, model);
  std::cout << "best epoch " << model.best_epoch << " val F1 " << model.best_val_f1 << "\n";
  return 0;
}

int cmd_eval_seg(const std::string& model_dir, const std::string& data, const std::string& out) {
  auto model = seg::load_model(model_dir);
  auto test = load_split(data);
  auto report = seg::evaluate(model, test, model.config.threshold);
  io::atomic_write(out, report.to_json().dump(2));
  std::cout << report.to_json().dump(2) << "\n";
  return 0;
}

int cmd_experiment_run(const std::string& config_path, const std::string& out) {
  json j = load_json_file(config_path);
  auto cfg = exp::ExperimentConfig::from_json(j);
  auto pair = std::make_shared<gan::TranslatorPair>(
      gan::load_pair(j.at("pair_checkpoint").get<std::string>()));
  auto train = load_split(j.at("train_dir").get<std::string>());
  auto val = load_split(j.at("val_dir").get<std::string>());
  auto test = load_split(j.at("test_dir").get<std::string>());
  auto table = exp::run_comparison(train, val, test, pair, cfg);
  for (const auto& p : exp::emit_report(table, out)) std::cout << "wrote " << p << "\n";
  return 0;
}

int cmd_experiment_grid(const std::string& config_path, const std::string& grid_csv, int repeats,
                        const std::string& out) {
  json j = load_json_file(config_path);
  auto pair = std::make_shared<gan::TranslatorPair>(
      gan::load_pair(j.at("pair_checkpoint").get<std::string>()));
  auto search = load_split(j.at("search_dir").get<std::string>());
  auto val = load_split(j.at("val_dir").get<std::string>());
  auto seg_cfg = j.contains("seg") ? seg::SegConfig::from_json(j.at("seg")) : seg::SegConfig{};
  aug::AugmentConfig ac =
      j.contains("augment") ? aug::AugmentConfig::from_json(j.at("augment")) : aug::AugmentConfig{};
  ac.preset = pair->domain_tag;
  auto result = exp::grid_search_epsilon(pair, search, val, parse_grid(grid_csv), repeats,
                                         seg_cfg, ac);
  fs::create_directories(out);
  io::atomic_write(fs::path(out) / "grid.csv", result.to_csv());
  io::atomic_write(fs::path(out) / "grid.json", result.to_json().dump(2));
  std::cout << "best epsilon " << result.best_epsilon << "\n";
  return 0;
}

int cmd_experiment_report(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "table.csv");
  if (!f) throw std::runtime_error("no table.csv in " + dir);
  std::stringstream ss;
  ss << f.rdbuf();
  auto table = exp::ComparisonTable::from_csv(ss.str());
  exp::emit_report(table, dir);
  std::cout << "report refreshed in " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cycle-consistent stain transfer: synthetic data, translation, probes, "
               "augmentation, segmentation, experiments"};
  app.require_subcommand(1);

  // synth
  std::string cfg_path, out_dir, data_a, data_b, data_dir, val_dir, ckpt, sigmas = "0,0.05,0.1,0.2,0.3,0.9";
  int n = 100, repeats = 5, neg_per_pos = 7;
  bool paired = false, labeled = false;
  std::uint64_t seed = 0;
  double blur_sigma = 1.0, aug_eps = 0.0, aug_prob = 0.5;
  std::string pair_ckpt, model_dir, report_out = "report.json", grid = "0.01,0.05,0.1,0.3,0.5,0.9";

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic two-domain dataset");
  synth_cmd->add_option("--config", cfg_path, "SynthConfig JSON file");
  synth_cmd->add_option("--out", out_dir)->required();
  synth_cmd->add_option("--n", n, "number of samples (positives when --labeled)");
  synth_cmd->add_flag("--paired", paired, "shared morphology per sample (evaluation only)");
  synth_cmd->add_flag("--labeled", labeled, "labeled domain-B segmentation dataset");
  synth_cmd->add_option("--neg-ratio", neg_per_pos, "negatives per positive when --labeled");

  auto* train_gan = app.add_subcommand("train-cyclegan", "train the translation pair");
  train_gan->add_option("--data-a", data_a)->required();
  train_gan->add_option("--data-b", data_b)->required();
  train_gan->add_option("--config", cfg_path);
  train_gan->add_option("--out", out_dir)->required();
  train_gan->add_option("--seed", seed);

  auto* probe_cmd = app.add_subcommand("probe", "perturbation probes on a trained pair");
  auto* sweep = probe_cmd->add_subcommand("sweep", "divergence vs sigma");
  sweep->add_option("--pair", ckpt)->required();
  sweep->add_option("--data", data_dir)->required();
  sweep->add_option("--sigmas", sigmas);
  sweep->add_option("--repeats", repeats);
  sweep->add_option("--out", out_dir)->required();
  auto* blur = probe_cmd->add_subcommand("blur-attack", "hidden-information blur test");
  blur->add_option("--pair", ckpt)->required();
  blur->add_option("--data", data_dir)->required();
  blur->add_option("--blur-sigma", blur_sigma);
  blur->add_option("--out", out_dir)->required();

  auto* train_seg = app.add_subcommand("train-seg", "train the segmentation U-Net");
  train_seg->add_option("--data", data_dir)->required();
  train_seg->add_option("--val", val_dir)->required();
  train_seg->add_option("--config", cfg_path);
  train_seg->add_option("--out", out_dir)->required();
  train_seg->add_option("--seed", seed);
  train_seg->add_option("--augment-epsilon", aug_eps, "enable noise augmentation with this epsilon");
  train_seg->add_option("--augment-probability", aug_prob);
  train_seg->add_option("--pair", pair_ckpt, "translator checkpoint for augmentation");

  auto* eval_seg = app.add_subcommand("eval-seg", "evaluate a segmentation model");
  eval_seg->add_option("--model", model_dir)->required();
  eval_seg->add_option("--data", data_dir)->required();
  eval_seg->add_option("--out", report_out);

  auto* experiment = app.add_subcommand("experiment", "experiment orchestration");
  auto* run = experiment->add_subcommand("run", "baseline vs augmented comparison");
  run->add_option("--config", cfg_path)->required();
  run->add_option("--out", out_dir)->required();
  auto* grid_eps = experiment->add_subcommand("grid-eps", "epsilon grid search");
  grid_eps->add_option("--config", cfg_path)->required();
  grid_eps->add_option("--grid", grid);
  grid_eps->add_option("--repeats", repeats);
  grid_eps->add_option("--out", out_dir)->required();
  auto* report = experiment->add_subcommand("report", "re-emit report artifacts");
  report->add_option("dir", out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth_cmd) return cmd_synth(cfg_path, out_dir, n, paired, labeled, neg_per_pos);
    if (*train_gan) return cmd_train_cyclegan(data_a, data_b, cfg_path, out_dir, seed);
    if (*sweep) return cmd_probe_sweep(ckpt, data_dir, sigmas, repeats, out_dir);
    if (*blur) return cmd_probe_blur(ckpt, data_dir, blur_sigma, out_dir);
    if (*train_seg)
      return cmd_train_seg(data_dir, val_dir, cfg_path, out_dir, seed, aug_eps, aug_prob,
                           pair_ckpt);
    if (*eval_seg) return cmd_eval_seg(model_dir, data_dir, report_out);
    if (*run) return cmd_experiment_run(cfg_path, out_dir);
    if (*grid_eps) return cmd_experiment_grid(cfg_path, grid, repeats, out_dir);
    if (*report) return cmd_experiment_report(out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
