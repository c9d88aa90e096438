#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "malvis/binviz.hpp"
#include "malvis/nn.hpp"

namespace malvis::xai {

enum class Method { occlusion, hirescam, shap };
std::string_view to_string(Method m) noexcept;
Method method_from_string(std::string_view s);

struct Normalization {
  double min = 0.0;
  double max = 0.0;
};

// Settings that produced a map; echoed into the export sidecar.
struct HeatmapParams {
  std::size_t window = 0;
  std::size_t stride = 0;
  double baseline = 0.0;
  std::size_t segments = 0;
  std::size_t coalitions = 0;  // 0 with exact = all
  bool exact = false;
  std::uint64_t seed = 0;
  std::size_t samples = 1;  // > 1 for cumulative maps
};

// Signed raw importance per cell. Rescaled views are derived on demand, so
// the raw grid is always recoverable.
struct Heatmap {
  Method method = Method::occlusion;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> raw;
  std::size_t target_class = 0;
  HeatmapParams params;

  Normalization normalization() const;
  /// (raw - min) / (max - min); all zero for a constant map.
  std::vector<double> rescaled() const;
  double at(std::size_t r, std::size_t c) const { return raw[r * cols + c]; }
};

// Anything that maps a batch of inputs to class probabilities.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::size_t num_classes() const = 0;
  virtual std::vector<std::vector<double>> probabilities(std::span<const InputTensor> batch) const = 0;
};

class ModelClassifier final : public Classifier {
 public:
  explicit ModelClassifier(const nn::Model& model, std::size_t chunk = 64) : model_(model), chunk_(chunk) {}
  std::size_t num_classes() const override { return model_.num_classes(); }
  std::vector<std::vector<double>> probabilities(std::span<const InputTensor> batch) const override;

 private:
  const nn::Model& model_;
  std::size_t chunk_;
};

// Wraps a per-input function; used for stub models in tests.
class FunctionClassifier final : public Classifier {
 public:
  using Fn = std::function<std::vector<double>(const InputTensor&)>;
  FunctionClassifier(std::size_t classes, Fn fn) : classes_(classes), fn_(std::move(fn)) {}
  std::size_t num_classes() const override { return classes_; }
  std::vector<std::vector<double>> probabilities(std::span<const InputTensor> batch) const override;

 private:
  std::size_t classes_;
  Fn fn_;
};

/// Window offsets along one axis: every stride step plus a final flush
/// position so the whole side is covered.
std::vector<std::size_t> window_offsets(std::size_t side, std::size_t window, std::size_t stride);

/// Score per window = p_c(x) - p_c(x with the window set to `baseline`),
/// c = predicted class of x unless given; pixels take the mean score of the
/// windows covering them. Throws Error("WindowTooLarge").
Heatmap occlusion_map(const Classifier& model, const InputTensor& input, std::size_t window, std::size_t stride,
                      double baseline, std::optional<std::size_t> target_class = std::nullopt);

/// Sum over channels of dA (.) A at the last conv feature map, h x w,
/// without clipping. A and dA are C x (h*w).
std::vector<double> hirescam_raw(const nn::Matrix<double>& feature_map, const nn::Matrix<double>& score_grad);

/// HiResCAM on the pre-softmax score of `target_class`, nearest-neighbour
/// upsampled to the input side.
Heatmap hirescam(const nn::Model& model, const InputTensor& input, std::size_t target_class);

/// Nearest-neighbour upsample of a square grid.
std::vector<double> upsample_nearest(std::span<const double> grid, std::size_t from_side, std::size_t to_side);

struct Segmentation {
  std::size_t side = 0;
  std::size_t grid = 0;
  std::vector<std::uint32_t> segment_of;  // per pixel
  std::size_t count() const noexcept { return grid * grid; }

  /// grid x grid blocks of (side / grid) pixels.
  static Segmentation regular(std::size_t side, std::size_t grid);
};

using Coalition = std::vector<bool>;
using BatchValueFn = std::function<std::vector<double>(const std::vector<Coalition>&)>;
using ValueFn = std::function<double(const Coalition&)>;

inline constexpr std::size_t kMaxExactKernelSegments = 20;
inline constexpr std::size_t kMaxOracleSegments = 12;

/// Shapley kernel weight (M-1) / (C(M,s) s (M-s)) for 0 < s < M.
double shapley_kernel_weight(std::size_t m, std::size_t s);

/// Kernel SHAP: weighted least squares over coalitions with the efficiency
/// constraint sum(phi) = v(full) - v(empty). `n_coalitions` empty means
/// enumerate all 2^M - 2 proper coalitions (exact); otherwise coalition
/// sizes are drawn from the kernel distribution, with each draw paired
/// with its complement.
std::vector<double> kernel_shap_values(std::size_t m, const BatchValueFn& value,
                                       std::optional<std::size_t> n_coalitions, std::uint64_t seed);

/// Direct Shapley sum over all subsets, float64. Throws Error("TooManySegments") for M > 12.
std::vector<double> exact_shap_oracle(std::size_t m, const ValueFn& value);

/// v(S) = p_c(x with segments outside S set to `background`).
Heatmap kernel_shap(const Classifier& model, const InputTensor& input, const Segmentation& seg, double background,
                    std::optional<std::size_t> n_coalitions, std::uint64_t seed,
                    std::optional<std::size_t> target_class = std::nullopt);

/// Elementwise mean of raw grids. Throws MixedMethods, ShapeMismatch, EmptyList.
Heatmap cumulative_heatmap(std::span<const Heatmap> maps);

struct AgreementScore {
  Method first = Method::occlusion;
  Method second = Method::occlusion;
  double iou_topk = 0.0;
  double rank_corr = 0.0;
  std::size_t k = 0;
};

/// Indices of the k largest raw values, ties to the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k);

/// Spearman correlation with average ranks for ties. Two constant inputs
/// give 1 when identical, otherwise a constant input gives 0.
double spearman(std::span<const double> a, std::span<const double> b);

AgreementScore agreement(const Heatmap& a, const Heatmap& b, std::size_t k);

/// Share of positive raw mass in rows [row_begin, row_end).
double positive_mass_fraction(const Heatmap& h, std::size_t row_begin, std::size_t row_end);

/// P5 of the rescaled map plus `<path>.json` sidecar.
void export_heatmap(const std::filesystem::path& path, const Heatmap& h, const std::string& class_name);

/// Companion image: the rescaled map with grid lines every side/grid pixels.
void export_grid_overlay(const std::filesystem::path& path, const Heatmap& h, std::size_t grid);

}  // namespace malvis::xai
