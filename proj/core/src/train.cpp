#include <numeric>
#include <optional>

#include "malvis/error.hpp"
#include "malvis/nn.hpp"

namespace malvis::nn {
namespace {

double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const auto preds = predict_batch(model, data.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (static_cast<int>(preds[i].label) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace

TrainHistory train(Model& model, const Dataset& train_set, const Dataset& val_set, std::size_t epochs,
                   std::uint64_t seed, std::function<void(const EpochRecord&)> on_epoch) {
  if (train_set.inputs.size() != train_set.labels.size() || val_set.inputs.size() != val_set.labels.size()) {
    throw validation_error("ShapeMismatch", "dataset inputs and labels differ in length");
  }
  TrainHistory history;
  if (epochs == 0 || train_set.size() == 0) return history;

  const Hyperparams& hp = model.hyperparams();
  auto opt = OptimizerState<float>::for_model(model);
  const bool keep_best = hp.patience > 0 || hp.restore_best;
  std::optional<Model> best;
  double best_acc = -1.0;

  std::vector<std::size_t> order(train_set.size());
  std::vector<InputTensor> batch;
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "epoch/" + std::to_string(epoch)));
    rng.shuffle(order);

    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      batch.clear();
      labels.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(train_set.inputs[order[k]]);
        labels.push_back(train_set.labels[order[k]]);
      }
      loss_sum += static_cast<double>(train_step(model, opt, std::span<const InputTensor>(batch), labels));
      ++steps;
    }

    EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(steps), accuracy(model, val_set)};
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.val_accuracy > best_acc) {
      best_acc = rec.val_accuracy;
      history.best_epoch = rec.epoch;
      if (keep_best) best = model;
    } else if (hp.patience > 0 && rec.epoch - history.best_epoch >= hp.patience) {
      history.early_stopped = true;
      break;
    }
  }
  if (keep_best && best && val_set.size() > 0) model = std::move(*best);
  return history;
}

}  // namespace malvis::nn
