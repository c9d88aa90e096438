#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "malvis/binformat.hpp"
#include "malvis/config.hpp"
#include "malvis/harness.hpp"
#include "malvis/nn.hpp"
#include "malvis/obfusc.hpp"
#include "malvis/xai.hpp"

namespace malvis::experiment {

inline constexpr int kReportSchemaVersion = 1;

// Every stream a run consumes, derived from Config::seed.
struct Seeds {
  std::uint64_t split = 0;
  std::uint64_t model = 0;
  std::uint64_t train = 0;
  std::uint64_t morph = 0;
  std::uint64_t enhance = 0;
  std::uint64_t subset = 0;
  std::uint64_t xai = 0;
  static Seeds from(const Config& c);
};

using Log = std::function<void(const std::string&)>;

// Shared state of one run: partition, class list and the fixed evaluation sets.
struct Context {
  Config config;
  Seeds seeds;
  std::vector<std::string> classes;
  std::string corpus_digest;
  harness::Partition partition;
  nn::Dataset val;
  nn::Dataset test;
  Log log;
};

Context prepare(const Config& config, const std::vector<Binary>& corpus, Log log = {});

struct TrainedModel {
  nn::Model model;
  nn::TrainHistory history;
  std::string digest;
};

/// Fresh model from the context's model seed, trained with its train seed.
TrainedModel train_model(const Context& ctx, const std::vector<Binary>& train_samples, const std::string& tag);

struct TestVariant {
  std::vector<Binary> samples;  // applicable outputs only
  obfusc::ConversionReport conversion;
};

TestVariant packed_variant(const Context& ctx, const std::vector<Binary>& base);
TestVariant morphed_variant(const Context& ctx, const std::vector<Binary>& base, int passes);

struct Cell {
  std::string train_variant;  // base | enhanced
  std::string test_variant;   // base | morphed | packed
  std::size_t applicable = 0;
  std::size_t total = 0;
  bool skipped = false;
  std::string skip_reason;
  harness::Metrics metrics;
};

Cell evaluate_cell(const Context& ctx, const nn::Model& model, const std::string& train_variant,
                   const std::string& test_variant, const std::vector<Binary>& samples);

struct ProgressivePoint {
  double fraction = 0.0;
  std::size_t train_size = 0;
  harness::Metrics metrics;
};

struct PassPoint {
  int passes = 0;
  std::size_t applicable = 0;
  std::size_t total = 0;
  harness::Metrics metrics;
};

struct OverlayShift {
  std::string model;  // which trained model was explained
  std::size_t samples = 0;
  double base_top = 0.0;
  double base_bottom = 0.0;
  double packed_top = 0.0;
  double packed_bottom = 0.0;
};

struct AgreementSummary {
  xai::Method first = xai::Method::occlusion;
  xai::Method second = xai::Method::occlusion;
  std::size_t samples = 0;
  double mean_iou_topk = 0.0;
  double mean_rank_corr = 0.0;
};

struct Report {
  nlohmann::ordered_json config;
  Seeds seeds;
  std::string corpus_digest;
  std::vector<std::string> classes;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::size_t test_size = 0;
  obfusc::ConversionReport pack_conversion;
  obfusc::ConversionReport morph_conversion;
  obfusc::EnhanceStats enhance_stats;
  std::size_t enhanced_train_size = 0;
  std::vector<Cell> grid;
  std::vector<ProgressivePoint> progressive;
  std::vector<PassPoint> morph_passes;
  nn::TrainHistory base_history;
  nn::TrainHistory enhanced_history;
  std::string base_checkpoint_digest;
  std::string enhanced_checkpoint_digest;
  std::vector<OverlayShift> overlay_shift;
  std::vector<AgreementSummary> agreement;

  /// Throws MissingCell.
  const Cell& cell(const std::string& train_variant, const std::string& test_variant) const;
};

struct DegradationResult {
  TrainedModel model;
  std::vector<Cell> cells;
  TestVariant packed;
  TestVariant morphed;
};

/// Base training; evaluation on base, morphed and packed test variants.
DegradationResult degradation_experiment(const Context& ctx);

struct EnhancementResult {
  TrainedModel model;
  std::vector<Cell> cells;
  obfusc::EnhanceStats stats;
  std::size_t train_size = 0;
};

EnhancementResult enhancement_experiment(const Context& ctx, const TestVariant& packed, const TestVariant& morphed);

/// Nested stratified subsets of the training partition; `full` (when given)
/// is reused for fraction 1.0 since that run is identical to base training.
std::vector<ProgressivePoint> progressive_training(const Context& ctx, const std::vector<double>& fractions,
                                                   const harness::Metrics* full = nullptr);

std::vector<PassPoint> morph_pass_sensitivity(const Context& ctx, const nn::Model& model,
                                              const std::vector<int>& passes);

/// Mean positive HiResCAM mass in the top and bottom image quarters, over
/// base test samples that have a packed variant; target is the true class.
OverlayShift overlay_shift(const Context& ctx, const nn::Model& model, const std::string& model_name,
                           const std::vector<Binary>& packed);

/// Pairwise agreement of the three explainers on the first
/// samples_per_class test samples of every class.
std::vector<AgreementSummary> explainer_agreement(const Context& ctx, const nn::Model& model);

struct RunResult {
  Report report;
  TrainedModel base;
  TrainedModel enhanced;
};

/// The whole pipeline, sequentially and deterministically.
RunResult run(const Config& config, const std::vector<Binary>& corpus, Log log = {});

/// Default corpus or the family spec file named by config.corpus.
std::vector<Binary> corpus_for(const Config& config);

nlohmann::ordered_json report_to_json(const Report& r);
/// One row per grid cell.
std::string report_csv(const Report& r);
nlohmann::ordered_json conversion_report_to_json(const obfusc::ConversionReport& r);
nlohmann::ordered_json history_to_json(const nn::TrainHistory& h);
std::string history_csv(const nn::TrainHistory& h);

}  // namespace malvis::experiment
