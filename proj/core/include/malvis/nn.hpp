#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "malvis/binviz.hpp"
#include "malvis/rng.hpp"

namespace malvis::nn {

// Architecture and optimizer settings.
struct Hyperparams {
  std::size_t input_side = 64;
  std::vector<std::size_t> filters{32, 64, 128};
  std::size_t first_kernel = 5;
  std::size_t kernel = 3;
  std::size_t pool = 2;
  bool lambda_norm = true;
  std::size_t dense1 = 1024;
  std::size_t dense2 = 256;
  double dropout_conv = 0.1;
  double dropout_dense = 0.3;
  double learning_rate = 0.0003;
  double momentum = 0.95;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::size_t patience = 0;  // 0 disables early stopping
  bool restore_best = true;  // end on the best-validation epoch's weights
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  /// Throws Error("InvalidConfig").
  void validate() const;
  bool operator==(const Hyperparams&) const = default;
};

enum class Mode { train, eval };

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
struct NamedTensor {
  std::string name;
  Matrix<T>* tensor;
};

// conv -> ReLU -> max-pool -> dropout -> batch norm
template <typename T>
struct ConvBlock {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t side = 0;  // input side; output side is side / pool
  Matrix<T> weight;      // out x (in * k * k)
  Matrix<T> bias;        // out x 1
  Matrix<T> gamma;
  Matrix<T> beta;
  Matrix<T> running_mean;
  Matrix<T> running_var;
};

template <typename T>
struct DenseLayer {
  Matrix<T> weight;  // out x in
  Matrix<T> bias;    // out x 1
};

template <typename T>
struct BlockTrace {
  std::vector<Matrix<T>> cols;     // im2col per sample
  std::vector<Matrix<T>> act;      // post-ReLU conv output, C x (h*w)
  std::vector<std::vector<std::uint32_t>> argmax;
  std::vector<Matrix<T>> drop_mask;  // empty in eval mode
  std::vector<Matrix<T>> xhat;     // normalized, pre scale/shift
  Matrix<T> inv_std;               // C x 1
  std::vector<Matrix<T>> out;
};

template <typename T>
struct DenseTrace {
  Matrix<T> input;  // features x N
  Matrix<T> z;
  Matrix<T> drop_mask;  // empty when no dropout applied
};

// Cached activations of one forward pass. `last_feature_map()` is the
// post-ReLU output of the last convolution, one C x (h*w) matrix per sample.
template <typename T>
struct ForwardTrace {
  Mode mode = Mode::eval;
  std::size_t batch = 0;
  std::vector<BlockTrace<T>> blocks;
  std::vector<DenseTrace<T>> dense;
  Matrix<T> logits;  // C x N
  Matrix<T> probs;   // C x N

  const std::vector<Matrix<T>>& last_feature_map() const { return blocks.back().act; }
};

template <typename T>
struct Gradients {
  std::vector<Matrix<T>> params;         // parallel to BasicModel::parameters()
  std::vector<Matrix<T>> feature_map;    // d(objective)/dA per sample
};

template <typename T>
class BasicModel {
 public:
  BasicModel(Hyperparams hp, std::vector<std::string> classes, std::uint64_t seed);

  const Hyperparams& hyperparams() const noexcept { return hp_; }
  const std::vector<std::string>& classes() const noexcept { return classes_; }
  std::size_t num_classes() const noexcept { return classes_.size(); }
  std::uint64_t seed() const noexcept { return seed_; }

  std::vector<ConvBlock<T>> blocks;
  std::vector<DenseLayer<T>> dense;  // hidden1, hidden2, output

  /// Learnable tensors in a fixed order (optimizer and checkpoint order).
  std::vector<NamedTensor<T>> parameters();
  /// Batch-norm running statistics.
  std::vector<NamedTensor<T>> buffers();
  std::size_t parameter_count() const;

  /// Probabilities, C x N. Train mode draws dropout masks from the model's
  /// stream and updates running statistics; eval mode is pure.
  Matrix<T> forward(std::span<const InputTensor> batch, Mode mode, ForwardTrace<T>* trace = nullptr);
  Matrix<T> forward_eval(std::span<const InputTensor> batch, ForwardTrace<T>* trace = nullptr) const;

  /// Back-propagates `dlogits` (C x N) through a trace of this model.
  Gradients<T> backward(const ForwardTrace<T>& trace, const Matrix<T>& dlogits) const;

  /// Mean cross-entropy of a traced batch and its gradients.
  T loss_and_gradients(const ForwardTrace<T>& trace, std::span<const int> labels, Gradients<T>* grads) const;

  /// d(logit_c)/dA for every sample of the trace.
  Gradients<T> score_gradients(const ForwardTrace<T>& trace, std::size_t target_class) const;

  void zero_parameters();

  Rng& dropout_stream() noexcept { return rng_; }

  template <typename U>
  BasicModel<U> cast() const;

 private:
  template <typename U>
  friend class BasicModel;

  Matrix<T> run(std::span<const InputTensor> batch, Mode mode, ForwardTrace<T>* trace, bool update_stats);

  Hyperparams hp_;
  std::vector<std::string> classes_;
  std::uint64_t seed_;
  Rng rng_;
};

using Model = BasicModel<float>;

template <typename T>
struct OptimizerState {
  std::vector<Matrix<T>> velocity;
  static OptimizerState for_model(BasicModel<T>& model);
};

/// Classical momentum: v <- momentum * v - lr * g; w <- w + v.
template <typename T>
void apply_momentum(BasicModel<T>& model, OptimizerState<T>& opt, const std::vector<Matrix<T>>& grads);

/// One mini-batch step. Throws Error("NonFiniteLoss").
template <typename T>
T train_step(BasicModel<T>& model, OptimizerState<T>& opt, std::span<const InputTensor> batch,
             std::span<const int> labels);

struct Dataset {
  std::vector<InputTensor> inputs;
  std::vector<int> labels;
  std::size_t size() const noexcept { return inputs.size(); }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

/// Epochs of shuffled mini-batches (order from `seed`), tracking validation
/// accuracy. With patience > 0, stops after that many epochs without a new
/// best. The best epoch's weights are restored when patience > 0 or
/// restore_best is set.
TrainHistory train(Model& model, const Dataset& train_set, const Dataset& val_set, std::size_t epochs,
                   std::uint64_t seed, std::function<void(const EpochRecord&)> on_epoch = {});

struct Prediction {
  std::size_t label = 0;
  std::vector<double> probabilities;
};

/// Eval-mode argmax; ties go to the lowest index.
Prediction predict(const Model& model, const InputTensor& input);
std::vector<Prediction> predict_batch(const Model& model, std::span<const InputTensor> inputs,
                                      std::size_t chunk = 64);

std::size_t argmax_lowest(std::span<const double> values) noexcept;

/// Inverted-dropout mask: 0 or 1/(1-rate) per element.
template <typename T>
Matrix<T> dropout_mask(Rng& rng, Eigen::Index rows, Eigen::Index cols, double rate);

// Checkpoint: "MVXC" | u32 version | u32 header length | JSON header |
// float32 LE tensors in header order | u32 CRC32 of all preceding bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

Bytes checkpoint_bytes(const Model& model);
Model model_from_checkpoint(ByteView bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::string model_digest(const Model& model);

extern template class BasicModel<float>;
extern template class BasicModel<double>;

}  // namespace malvis::nn
