#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "malvis/binformat.hpp"
#include "malvis/config.hpp"
#include "malvis/nn.hpp"

namespace malvis::harness {

struct Partition {
  std::vector<Binary> train;
  std::vector<Binary> val;
  std::vector<Binary> test;
};

/// Base samples are split per family (when stratified) with largest-remainder
/// quotas; a transformed sample joins its parent's partition. Throws
/// ClassTooSmall (stratified, < 3 base samples in a family) or InvalidSplit.
Partition split(const std::vector<Binary>& corpus, const SplitSpec& spec);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct Metrics {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t total = 0;
};

/// Macro averages run over classes with non-zero support.
Metrics metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion);
Metrics metrics_from_predictions(std::span<const int> truth, std::span<const std::size_t> predicted,
                                 std::size_t classes);

/// Throws EmptyTestSet.
Metrics evaluate(const nn::Model& model, const nn::Dataset& test);

/// Sorted distinct family names.
std::vector<std::string> family_names(const std::vector<Binary>& corpus);

/// Images resized to `side`; labels index into `classes`. Throws UnknownClass.
nn::Dataset to_dataset(const std::vector<Binary>& samples, const std::vector<std::string>& classes,
                       std::size_t side);

/// Indices of a stratified subset holding round(fraction * n_c) of each
/// class, taken as a prefix of a seeded per-class order, so subsets for
/// growing fractions are nested. Returned in ascending order.
std::vector<std::size_t> nested_subset(std::span<const int> labels, double fraction, std::uint64_t seed);

nlohmann::ordered_json metrics_to_json(const Metrics& m, const std::vector<std::string>& classes);

}  // namespace malvis::harness
