#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "staincycle/augment.hpp"
#include "staincycle/segmentation.hpp"
#include "staincycle/translator.hpp"

namespace staincycle::exp {

// ---- stratified fraction folds -------------------------------------------------

struct FractionSplit {
  double fraction = 1.0;
  int fold = 1;
  std::vector<std::string> ids;
  std::uint64_t seed = 0;
};

// Per-class stratified subsampling: each fold draws round(fraction * n_c)
// ids per class c, independently per fold. fraction == 1.0 yields a single
// fold with every id. Class = sample has any foreground.
std::vector<FractionSplit> subsample_fractions(const std::vector<aug::LabeledSample>& dataset,
                                               const std::vector<double>& fractions, int n_folds,
                                               std::uint64_t seed);

std::vector<aug::LabeledSample> select_ids(const std::vector<aug::LabeledSample>& dataset,
                                           const std::vector<std::string>& ids);

// Throws if any two id sets intersect.
void ensure_disjoint(const std::vector<std::vector<std::string>>& id_sets);

// ---- epsilon grid search --------------------------------------------------------

struct EpsilonScore {
  double epsilon = 0;
  std::vector<double> f1s;  // one per repeat
  double mean_f1 = 0;
};

struct GridSearchResult {
  double best_epsilon = 0;
  std::vector<EpsilonScore> scores;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Trains one segmenter per (epsilon, repeat) on the search split and keeps
// the epsilon with the best mean validation F1.
GridSearchResult grid_search_epsilon(std::shared_ptr<const gan::TranslatorPair> pair,
                                     const std::vector<aug::LabeledSample>& search_split,
                                     const std::vector<aug::LabeledSample>& val,
                                     const std::vector<double>& epsilons, int n_repeats,
                                     const seg::SegConfig& seg_config,
                                     const aug::AugmentConfig& aug_base);

// ---- baseline vs augmented comparison ---------------------------------------------

struct ArmResult {
  int fold = 1;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  seg::MetricsReport metrics;
};

struct ComparisonRow {
  std::string preset;
  double fraction = 1.0;
  std::vector<ArmResult> baseline, augmented;
  bool flagged = false;  // partial failure, kept but marked
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;

  std::string to_csv() const;  // per-fold rows, full precision
  static ComparisonTable from_csv(const std::string& csv);
  nlohmann::json to_json() const;
};

struct ExperimentConfig {
  std::vector<double> fractions{0.10};
  int n_folds = 5;
  int repeats_at_full = 3;  // the 100% fraction has one fold; repeat seeds instead
  seg::SegConfig seg;
  aug::AugmentConfig augment;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

// For every (fraction, fold): trains a baseline and an augmented segmenter
// with identical seeds and data, evaluates both on test. Arm fairness is
// asserted via config hash equality.
ComparisonTable run_comparison(const std::vector<aug::LabeledSample>& train,
                               const std::vector<aug::LabeledSample>& val,
                               const std::vector<aug::LabeledSample>& test,
                               std::shared_ptr<const gan::TranslatorPair> pair,
                               const ExperimentConfig& config);

// Writes table.csv (per-fold), summary.csv (mean/std layout), provenance.json
// (seeds, hashes, paper reference values), and an F1-vs-fraction plot.
std::vector<std::filesystem::path> emit_report(const ComparisonTable& table,
                                               const std::filesystem::path& out_dir);

// Published reference results, carried as metadata only; never asserted
// against synthetic runs.
nlohmann::json paper_reference_table();

// Aggregates for one row and arm.
struct ArmAggregate {
  double f1_mean = 0, f1_std = 0;
  double precision_mean = 0, precision_std = 0;
  double recall_mean = 0, recall_std = 0;
};
ArmAggregate aggregate(const std::vector<ArmResult>& arm);

}  // namespace staincycle::exp
