#include "staincycle/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "staincycle/io_store.hpp"
#include "staincycle/rng.hpp"

namespace staincycle::exp {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- folds ------------------------------------------------------------------

std::vector<FractionSplit> subsample_fractions(const std::vector<aug::LabeledSample>& dataset,
                                               const std::vector<double>& fractions, int n_folds,
                                               std::uint64_t seed) {
  std::vector<std::string> pos, neg;
  for (const auto& s : dataset) {
    (s.mask.any().item<bool>() ? pos : neg).push_back(s.id);
  }

  std::vector<FractionSplit> out;
  for (double f : fractions) {
    if (f <= 0 || f > 1) throw std::invalid_argument("fraction must be in (0, 1]");
    const int folds = f >= 1.0 ? 1 : n_folds;
    for (int fold = 1; fold <= folds; ++fold) {
      const std::uint64_t fold_seed =
          mix_seeds(seed, (static_cast<std::uint64_t>(f * 1e6) << 8) ^
                              static_cast<std::uint64_t>(fold));
      auto rng = make_rng(fold_seed);
      FractionSplit split{f, fold, {}, fold_seed};
      for (const auto* cls : {&pos, &neg}) {
        const auto take = static_cast<std::size_t>(std::lround(f * cls->size()));
        if (take == 0) {
          throw std::invalid_argument("fraction " + std::to_string(f) +
                                      " yields zero samples of one class");
        }
        auto ids = *cls;
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(take);
        split.ids.insert(split.ids.end(), ids.begin(), ids.end());
      }
      std::sort(split.ids.begin(), split.ids.end());
      out.push_back(std::move(split));
    }
  }
  return out;
}

std::vector<aug::LabeledSample> select_ids(const std::vector<aug::LabeledSample>& dataset,
                                           const std::vector<std::string>& ids) {
  std::set<std::string> want(ids.begin(), ids.end());
  std::vector<aug::LabeledSample> out;
  for (const auto& s : dataset) {
    if (want.count(s.id)) out.push_back(s);
  }
  if (out.size() != want.size()) throw std::invalid_argument("some requested ids are missing");
  return out;
}

void ensure_disjoint(const std::vector<std::vector<std::string>>& id_sets) {
  for (std::size_t i = 0; i < id_sets.size(); ++i) {
    std::set<std::string> a(id_sets[i].begin(), id_sets[i].end());
    for (std::size_t j = i + 1; j < id_sets.size(); ++j) {
      for (const auto& id : id_sets[j]) {
        if (a.count(id)) throw std::invalid_argument("id sets overlap: " + id);
      }
    }
  }
}

// ---- grid search ---------------------------------------------------------------

json GridSearchResult::to_json() const {
  json scores_j = json::array();
  for (const auto& s : scores) {
    scores_j.push_back({{"epsilon", s.epsilon}, {"f1s", s.f1s}, {"mean_f1", s.mean_f1}});
  }
  return json{{"best_epsilon", best_epsilon}, {"scores", scores_j}};
}

std::string GridSearchResult::to_csv() const {
  std::ostringstream os;
  os << "epsilon,repeat,f1\n";
  os.precision(17);
  for (const auto& s : scores) {
    for (std::size_t r = 0; r < s.f1s.size(); ++r) {
      os << s.epsilon << "," << (r + 1) << "," << s.f1s[r] << "\n";
    }
  }
  return os.str();
}

GridSearchResult grid_search_epsilon(std::shared_ptr<const gan::TranslatorPair> pair,
                                     const std::vector<aug::LabeledSample>& search_split,
                                     const std::vector<aug::LabeledSample>& val,
                                     const std::vector<double>& epsilons, int n_repeats,
                                     const seg::SegConfig& seg_config,
                                     const aug::AugmentConfig& aug_base) {
  if (epsilons.empty()) throw std::invalid_argument("empty epsilon grid");
  {
    std::vector<std::string> a, b;
    for (const auto& s : search_split) a.push_back(s.id);
    for (const auto& s : val) b.push_back(s.id);
    ensure_disjoint({a, b});
  }

  GridSearchResult result;
  for (double eps : epsilons) {
    aug::AugmentConfig ac = aug_base;
    ac.epsilon = eps;
    aug::Augmenter augmenter(ac, pair);
    EpsilonScore score;
    score.epsilon = eps;
    for (int r = 0; r < n_repeats; ++r) {
      seg::SegConfig sc = seg_config;
      sc.seed = mix_seeds(seg_config.seed, (static_cast<std::uint64_t>(eps * 1e6) << 8) ^
                                               static_cast<std::uint64_t>(r));
      auto [model, history] = seg::train_unet(search_split, val, sc, &augmenter);
      score.f1s.push_back(seg::evaluate(model, val, sc.threshold).f1);
    }
    score.mean_f1 =
        std::accumulate(score.f1s.begin(), score.f1s.end(), 0.0) / score.f1s.size();
    result.scores.push_back(std::move(score));
  }
  const auto best = std::max_element(
      result.scores.begin(), result.scores.end(),
      [](const EpsilonScore& a, const EpsilonScore& b) { return a.mean_f1 < b.mean_f1; });
  result.best_epsilon = best->epsilon;
  return result;
}

// ---- comparison ------------------------------------------------------------------

json ExperimentConfig::to_json() const {
  return json{{"fractions", fractions},
              {"n_folds", n_folds},
              {"repeats_at_full", repeats_at_full},
              {"seg", seg.to_json()},
              {"augment", augment.to_json()},
              {"seed", seed}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("fractions")) c.fractions = j.at("fractions").get<std::vector<double>>();
  c.n_folds = j.value("n_folds", c.n_folds);
  c.repeats_at_full = j.value("repeats_at_full", c.repeats_at_full);
  if (j.contains("seg")) c.seg = seg::SegConfig::from_json(j.at("seg"));
  if (j.contains("augment")) c.augment = aug::AugmentConfig::from_json(j.at("augment"));
  c.seed = j.value("seed", c.seed);
  return c;
}

ArmAggregate aggregate(const std::vector<ArmResult>& arm) {
  ArmAggregate a;
  const double n = static_cast<double>(arm.size());
  if (arm.empty()) return a;
  for (const auto& r : arm) {
    a.f1_mean += r.metrics.f1;
    a.precision_mean += r.metrics.precision;
    a.recall_mean += r.metrics.recall;
  }
  a.f1_mean /= n;
  a.precision_mean /= n;
  a.recall_mean /= n;
  if (arm.size() > 1) {
    double vf = 0, vp = 0, vr = 0;
    for (const auto& r : arm) {
      vf += std::pow(r.metrics.f1 - a.f1_mean, 2);
      vp += std::pow(r.metrics.precision - a.precision_mean, 2);
      vr += std::pow(r.metrics.recall - a.recall_mean, 2);
    }
    a.f1_std = std::sqrt(vf / (n - 1));
    a.precision_std = std::sqrt(vp / (n - 1));
    a.recall_std = std::sqrt(vr / (n - 1));
  }
  return a;
}

ComparisonTable run_comparison(const std::vector<aug::LabeledSample>& train,
                               const std::vector<aug::LabeledSample>& val,
                               const std::vector<aug::LabeledSample>& test,
                               std::shared_ptr<const gan::TranslatorPair> pair,
                               const ExperimentConfig& config) {
  {
    std::vector<std::string> a, b, c;
    for (const auto& s : train) a.push_back(s.id);
    for (const auto& s : val) b.push_back(s.id);
    for (const auto& s : test) c.push_back(s.id);
    ensure_disjoint({a, b, c});
  }
  aug::Augmenter augmenter(config.augment, pair);

  ComparisonTable table;
  for (double fraction : config.fractions) {
    const int n_folds = fraction >= 1.0 ? config.repeats_at_full : config.n_folds;
    auto splits = subsample_fractions(train, {fraction},
                                      fraction >= 1.0 ? 1 : n_folds, config.seed);

    ComparisonRow row;
    row.preset = config.augment.preset;
    row.fraction = fraction;
    for (int fold = 1; fold <= n_folds; ++fold) {
      // at full fraction there is a single fold; vary the seed per repeat
      const auto& split = splits[fraction >= 1.0 ? 0 : fold - 1];
      auto fold_train = select_ids(train, split.ids);
      seg::SegConfig sc = config.seg;
      sc.seed = mix_seeds(config.seed, (static_cast<std::uint64_t>(fraction * 1e6) << 8) ^
                                           static_cast<std::uint64_t>(fold));

      auto [base_model, base_hist] = seg::train_unet(fold_train, val, sc, nullptr);
      auto [aug_model, aug_hist] = seg::train_unet(fold_train, val, sc, &augmenter);
      // arm fairness: same data, same seed, same config
      if (base_model.config_hash != aug_model.config_hash) {
        throw std::logic_error("arm config hashes differ; comparison is unfair");
      }

      ArmResult base{fold, sc.seed, base_model.config_hash,
                     seg::evaluate(base_model, test, sc.threshold)};
      ArmResult augd{fold, sc.seed, aug_model.config_hash,
                     seg::evaluate(aug_model, test, sc.threshold)};
      base.metrics.data_fraction_label = std::to_string(fraction);
      augd.metrics.data_fraction_label = std::to_string(fraction);
      augd.metrics.augmented = true;
      row.baseline.push_back(std::move(base));
      row.augmented.push_back(std::move(augd));
    }
    if (row.baseline.size() != row.augmented.size()) row.flagged = true;
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---- serialization ------------------------------------------------------------------

std::string ComparisonTable::to_csv() const {
  std::ostringstream os;
  os << "preset,fraction,fold,arm,seed,config_hash,f1,precision,recall,obj_f1,obj_precision,"
        "obj_recall\n";
  os.precision(17);
  for (const auto& row : rows) {
    auto emit = [&](const std::vector<ArmResult>& arm, const char* name) {
      for (const auto& r : arm) {
        os << row.preset << "," << row.fraction << "," << r.fold << "," << name << "," << r.seed
           << "," << r.config_hash << "," << r.metrics.f1 << "," << r.metrics.precision << ","
           << r.metrics.recall << "," << r.metrics.obj_f1 << "," << r.metrics.obj_precision << ","
           << r.metrics.obj_recall << "\n";
      }
    };
    emit(row.baseline, "baseline");
    emit(row.augmented, "augmented");
  }
  return os.str();
}

ComparisonTable ComparisonTable::from_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);  // header
  std::map<std::pair<std::string, double>, ComparisonRow> rows;
  std::vector<std::pair<std::string, double>> order;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) f.push_back(tok);
    if (f.size() != 12) throw std::invalid_argument("bad comparison CSV row: " + line);
    const std::pair<std::string, double> key{f[0], std::stod(f[1])};
    if (!rows.count(key)) {
      rows[key] = ComparisonRow{f[0], std::stod(f[1]), {}, {}, false};
      order.push_back(key);
    }
    ArmResult r;
    r.fold = std::stoi(f[2]);
    r.seed = std::stoull(f[4]);
    r.config_hash = std::stoull(f[5]);
    r.metrics.f1 = std::stod(f[6]);
    r.metrics.precision = std::stod(f[7]);
    r.metrics.recall = std::stod(f[8]);
    r.metrics.obj_f1 = std::stod(f[9]);
    r.metrics.obj_precision = std::stod(f[10]);
    r.metrics.obj_recall = std::stod(f[11]);
    r.metrics.augmented = f[3] == "augmented";
    r.metrics.data_fraction_label = std::to_string(std::stod(f[1]));
    (f[3] == "augmented" ? rows[key].augmented : rows[key].baseline).push_back(std::move(r));
  }
  ComparisonTable t;
  for (const auto& key : order) t.rows.push_back(rows[key]);
  return t;
}

json ComparisonTable::to_json() const {
  json rows_j = json::array();
  for (const auto& row : rows) {
    json arms = json::object();
    for (const auto* arm : {&row.baseline, &row.augmented}) {
      json list = json::array();
      for (const auto& r : *arm) {
        list.push_back({{"fold", r.fold},
                        {"seed", r.seed},
                        {"config_hash", r.config_hash},
                        {"metrics", r.metrics.to_json()}});
      }
      arms[arm == &row.baseline ? "baseline" : "augmented"] = list;
    }
    rows_j.push_back({{"preset", row.preset},
                      {"fraction", row.fraction},
                      {"flagged", row.flagged},
                      {"arms", arms}});
  }
  return json{{"rows", rows_j}};
}

json paper_reference_table() {
  // Published Table-1 values (baseline vs noise augmented), metadata only.
  auto row = [](double f1b, double pb, double rb, double f1a, double pa, double ra) {
    return json{{"baseline", {{"f1", f1b}, {"precision", pb}, {"recall", rb}}},
                {"augmented", {{"f1", f1a}, {"precision", pa}, {"recall", ra}}}};
  };
  return json{
      {"cd68",
       {{"10%", row(0.739, 0.754, 0.728, 0.767, 0.832, 0.713)},
        {"30%", row(0.812, 0.839, 0.788, 0.828, 0.848, 0.812)},
        {"60%", row(0.831, 0.812, 0.852, 0.856, 0.888, 0.826)},
        {"100%", row(0.853, 0.849, 0.858, 0.878, 0.899, 0.858)}}},
      {"cd34",
       {{"10%", row(0.837, 0.770, 0.919, 0.839, 0.778, 0.913)},
        {"30%", row(0.877, 0.841, 0.917, 0.890, 0.867, 0.916)},
        {"60%", row(0.882, 0.840, 0.927, 0.901, 0.884, 0.919)},
        {"100%", row(0.888, 0.849, 0.931, 0.903, 0.888, 0.919)}}},
      {"best_epsilon", 0.05}};
}

std::vector<fs::path> emit_report(const ComparisonTable& table, const fs::path& out_dir) {
  if (table.rows.empty()) throw std::invalid_argument("empty comparison table");
  fs::create_directories(out_dir);
  std::vector<fs::path> written;

  const fs::path table_csv = out_dir / "table.csv";
  io::atomic_write(table_csv, table.to_csv());
  written.push_back(table_csv);

  std::ostringstream os;
  os << "preset,fraction,arm,f1_mean,f1_std,precision_mean,precision_std,recall_mean,"
        "recall_std,n_folds\n";
  for (const auto& row : table.rows) {
    for (const auto* arm : {&row.baseline, &row.augmented}) {
      auto a = aggregate(*arm);
      os << row.preset << "," << row.fraction << ","
         << (arm == &row.baseline ? "baseline" : "augmented") << "," << a.f1_mean << ","
         << a.f1_std << "," << a.precision_mean << "," << a.precision_std << "," << a.recall_mean
         << "," << a.recall_std << "," << arm->size() << "\n";
    }
  }
  const fs::path summary_csv = out_dir / "summary.csv";
  io::atomic_write(summary_csv, os.str());
  written.push_back(summary_csv);

  json prov;
  prov["table"] = table.to_json();
  prov["paper_reference"] = paper_reference_table();
  const fs::path prov_json = out_dir / "provenance.json";
  io::atomic_write(prov_json, prov.dump(2));
  written.push_back(prov_json);

  // F1 vs fraction, both arms
  {
    const int W = 640, H = 480, margin = 60;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    auto px = [&](double x) { return margin + static_cast<int>((W - 2 * margin) * x); };
    auto py = [&](double y) { return H - margin - static_cast<int>((H - 2 * margin) * y); };
    cv::line(img, {margin, H - margin}, {W - margin, H - margin}, {0, 0, 0});
    cv::line(img, {margin, H - margin}, {margin, margin}, {0, 0, 0});
    cv::putText(img, "fraction", {W / 2, H - margin / 3}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                {0, 0, 0});
    cv::putText(img, "F1", {5, margin / 2}, cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0});
    const cv::Scalar colors[2] = {{160, 80, 0}, {0, 80, 200}};
    const char* names[2] = {"baseline", "augmented"};
    for (int arm = 0; arm < 2; ++arm) {
      cv::Point prev;
      bool first = true;
      for (const auto& row : table.rows) {
        auto a = aggregate(arm == 0 ? row.baseline : row.augmented);
        cv::Point p(px(row.fraction), py(a.f1_mean));
        cv::circle(img, p, 3, colors[arm], cv::FILLED);
        if (!first) cv::line(img, prev, p, colors[arm], 2);
        prev = p;
        first = false;
      }
      cv::putText(img, names[arm], {W - margin - 120, margin + 20 * (arm + 1)},
                  cv::FONT_HERSHEY_SIMPLEX, 0.5, colors[arm]);
    }
    const fs::path plot = out_dir / "f1_vs_fraction.png";
    cv::imwrite(plot.string(), img);
    written.push_back(plot);
  }
  return written;
}

}  // namespace staincycle::exp
