#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "malvis/nn.hpp"

namespace testutil {

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
  std::vector<std::pair<std::string, double>> per_tensor;  // max rel error per tensor
};

// Zero-initialized biases put pre-activations exactly on ReLU kinks, where
// finite differences are meaningless; shift them off zero first.
inline void jitter_biases(malvis::nn::BasicModel<double>& m, std::uint64_t seed) {
  malvis::Rng rng(seed);
  for (auto& p : m.parameters()) {
    if (p.name.find("bias") == std::string::npos) continue;
    for (Eigen::Index i = 0; i < p.tensor->size(); ++i) p.tensor->data()[i] += 0.2 * rng.uniform() - 0.1;
  }
}

// Central differences on the mean cross-entropy in train mode. The dropout
// stream is rewound before every forward pass so all evaluations share one
// set of masks.
inline GradCheck grad_check(malvis::nn::BasicModel<double>& m, std::span<const malvis::InputTensor> batch,
                            std::span<const int> labels, double eps) {
  using namespace malvis::nn;
  const malvis::Rng saved = m.dropout_stream();
  auto loss_at = [&] {
    m.dropout_stream() = saved;
    ForwardTrace<double> tr;
    m.forward(batch, Mode::train, &tr);
    return m.loss_and_gradients(tr, labels, nullptr);
  };
  m.dropout_stream() = saved;
  ForwardTrace<double> tr;
  m.forward(batch, Mode::train, &tr);
  Gradients<double> g;
  m.loss_and_gradients(tr, labels, &g);

  GradCheck out;
  auto params = m.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = *params[k].tensor;
    double tensor_max = 0.0;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double orig = w.data()[i];
      w.data()[i] = orig + eps;
      const double lp = loss_at();
      w.data()[i] = orig - eps;
      const double lm = loss_at();
      w.data()[i] = orig;
      const double fd = (lp - lm) / (2 * eps);
      const double an = g.params[k].data()[i];
      const double rel = std::abs(an - fd) / (std::abs(an) + 1e-8);
      tensor_max = std::max(tensor_max, rel);
      ++out.checked;
    }
    out.per_tensor.emplace_back(params[k].name, tensor_max);
    if (tensor_max > out.max_rel) {
      out.max_rel = tensor_max;
      out.worst = params[k].name;
    }
  }
  return out;
}

}  // namespace testutil
