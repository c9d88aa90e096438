#include "malvis/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "malvis/error.hpp"

namespace malvis::nn {

void Hyperparams::validate() const {
  auto bad = [](const std::string& why) { throw validation_error("InvalidConfig", why); };
  if (filters.empty()) bad("at least one conv block is required");
  if (std::any_of(filters.begin(), filters.end(), [](std::size_t f) { return f == 0; })) bad("filter counts must be positive");
  if (first_kernel % 2 == 0 || kernel % 2 == 0) bad("kernel sizes must be odd");
  if (pool < 1) bad("pool must be >= 1");
  std::size_t side = input_side;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    if (side % pool != 0 || side / pool == 0) bad("input_side must be divisible by pool^blocks");
    side /= pool;
  }
  if (dense1 == 0 || dense2 == 0) bad("dense sizes must be positive");
  if (dropout_conv < 0 || dropout_conv >= 1 || dropout_dense < 0 || dropout_dense >= 1) bad("dropout rates must lie in [0, 1)");
  if (!(learning_rate > 0)) bad("learning_rate must be > 0");
  if (momentum < 0 || momentum >= 1) bad("momentum must lie in [0, 1)");
  if (batch_size == 0) bad("batch_size must be positive");
  if (bn_momentum < 0 || bn_momentum >= 1) bad("bn_momentum must lie in [0, 1)");
  if (!(bn_eps > 0)) bad("bn_eps must be > 0");
}

template <typename T>
Matrix<T> dropout_mask(Rng& rng, Eigen::Index rows, Eigen::Index cols, double rate) {
  Matrix<T> mask(rows, cols);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  T* d = mask.data();
  for (Eigen::Index i = 0; i < rows * cols; ++i) d[i] = rng.uniform() < rate ? T(0) : keep_scale;
  return mask;
}

template Matrix<float> dropout_mask<float>(Rng&, Eigen::Index, Eigen::Index, double);
template Matrix<double> dropout_mask<double>(Rng&, Eigen::Index, Eigen::Index, double);

namespace {

template <typename T>
Matrix<T> he_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols, std::size_t fan_in) {
  Matrix<T> m(rows, cols);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(stddev * rng.normal());
  return m;
}

// x: C x (s*s), column p = y*s + x. Output rows ordered (c, ky, kx).
template <typename T>
void im2col(const Matrix<T>& x, std::size_t channels, std::size_t side, std::size_t k, Matrix<T>& cols) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto s = static_cast<std::ptrdiff_t>(side);
  const auto kk = static_cast<std::ptrdiff_t>(k);
  cols.resize(static_cast<Eigen::Index>(channels * k * k), static_cast<Eigen::Index>(side * side));
  for (std::ptrdiff_t y = 0; y < s; ++y) {
    for (std::ptrdiff_t xx = 0; xx < s; ++xx) {
      T* col = cols.data() + (y * s + xx) * cols.rows();
      std::ptrdiff_t r = 0;
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::ptrdiff_t ky = 0; ky < kk; ++ky) {
          const std::ptrdiff_t sy = y + ky - pad;
          for (std::ptrdiff_t kx = 0; kx < kk; ++kx, ++r) {
            const std::ptrdiff_t sx = xx + kx - pad;
            col[r] = (sy < 0 || sy >= s || sx < 0 || sx >= s)
                         ? T(0)
                         : x(static_cast<Eigen::Index>(c), sy * s + sx);
          }
        }
      }
    }
  }
}

template <typename T>
Matrix<T> col2im(const Matrix<T>& cols, std::size_t channels, std::size_t side, std::size_t k) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto s = static_cast<std::ptrdiff_t>(side);
  const auto kk = static_cast<std::ptrdiff_t>(k);
  Matrix<T> x = Matrix<T>::Zero(static_cast<Eigen::Index>(channels), s * s);
  for (std::ptrdiff_t y = 0; y < s; ++y) {
    for (std::ptrdiff_t xx = 0; xx < s; ++xx) {
      const T* col = cols.data() + (y * s + xx) * cols.rows();
      std::ptrdiff_t r = 0;
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::ptrdiff_t ky = 0; ky < kk; ++ky) {
          const std::ptrdiff_t sy = y + ky - pad;
          for (std::ptrdiff_t kx = 0; kx < kk; ++kx, ++r) {
            const std::ptrdiff_t sx = xx + kx - pad;
            if (sy >= 0 && sy < s && sx >= 0 && sx < s) x(static_cast<Eigen::Index>(c), sy * s + sx) += col[r];
          }
        }
      }
    }
  }
  return x;
}

template <typename T>
Matrix<T> softmax_columns(const Matrix<T>& logits) {
  Matrix<T> p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const T mx = logits.col(j).maxCoeff();
    T sum = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      p(i, j) = std::exp(logits(i, j) - mx);
      sum += p(i, j);
    }
    p.col(j) /= sum;
  }
  return p;
}

}  // namespace

template <typename T>
BasicModel<T>::BasicModel(Hyperparams hp, std::vector<std::string> classes, std::uint64_t seed)
    : hp_(std::move(hp)), classes_(std::move(classes)), seed_(seed), rng_(derive_seed(seed, "dropout")) {
  hp_.validate();
  if (classes_.empty()) throw validation_error("InvalidConfig", "model needs at least one class");
  Rng init(derive_seed(seed, "init"));
  std::size_t in_ch = 1;
  std::size_t side = hp_.input_side;
  for (std::size_t i = 0; i < hp_.filters.size(); ++i) {
    ConvBlock<T> b;
    b.in_channels = in_ch;
    b.out_channels = hp_.filters[i];
    b.kernel = i == 0 ? hp_.first_kernel : hp_.kernel;
    b.side = side;
    const std::size_t fan_in = in_ch * b.kernel * b.kernel;
    const auto out = static_cast<Eigen::Index>(b.out_channels);
    b.weight = he_normal<T>(init, out, static_cast<Eigen::Index>(fan_in), fan_in);
    b.bias = Matrix<T>::Zero(out, 1);
    b.gamma = Matrix<T>::Ones(out, 1);
    b.beta = Matrix<T>::Zero(out, 1);
    b.running_mean = Matrix<T>::Zero(out, 1);
    b.running_var = Matrix<T>::Ones(out, 1);
    blocks.push_back(std::move(b));
    in_ch = hp_.filters[i];
    side /= hp_.pool;
  }
  const std::size_t flat = in_ch * side * side;
  const std::size_t sizes[] = {flat, hp_.dense1, hp_.dense2, classes_.size()};
  for (int l = 0; l < 3; ++l) {
    DenseLayer<T> d;
    d.weight = he_normal<T>(init, static_cast<Eigen::Index>(sizes[l + 1]), static_cast<Eigen::Index>(sizes[l]), sizes[l]);
    d.bias = Matrix<T>::Zero(static_cast<Eigen::Index>(sizes[l + 1]), 1);
    dense.push_back(std::move(d));
  }
}

template <typename T>
std::vector<NamedTensor<T>> BasicModel<T>::parameters() {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "conv.weight", &blocks[i].weight});
    out.push_back({p + "conv.bias", &blocks[i].bias});
    out.push_back({p + "norm.gamma", &blocks[i].gamma});
    out.push_back({p + "norm.beta", &blocks[i].beta});
  }
  static const char* kDense[] = {"dense1", "dense2", "output"};
  for (std::size_t i = 0; i < dense.size(); ++i) {
    out.push_back({std::string(kDense[i]) + ".weight", &dense[i].weight});
    out.push_back({std::string(kDense[i]) + ".bias", &dense[i].bias});
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> BasicModel<T>::buffers() {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".norm.";
    out.push_back({p + "running_mean", &blocks[i].running_mean});
    out.push_back({p + "running_var", &blocks[i].running_var});
  }
  return out;
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : const_cast<BasicModel*>(this)->parameters()) n += static_cast<std::size_t>(t.tensor->size());
  return n;
}

template <typename T>
void BasicModel<T>::zero_parameters() {
  for (auto& t : parameters()) t.tensor->setZero();
}

template <typename T>
template <typename U>
BasicModel<U> BasicModel<T>::cast() const {
  BasicModel<U> m(hp_, classes_, seed_);
  m.rng_ = rng_;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    m.blocks[i].weight = blocks[i].weight.template cast<U>();
    m.blocks[i].bias = blocks[i].bias.template cast<U>();
    m.blocks[i].gamma = blocks[i].gamma.template cast<U>();
    m.blocks[i].beta = blocks[i].beta.template cast<U>();
    m.blocks[i].running_mean = blocks[i].running_mean.template cast<U>();
    m.blocks[i].running_var = blocks[i].running_var.template cast<U>();
  }
  for (std::size_t i = 0; i < dense.size(); ++i) {
    m.dense[i].weight = dense[i].weight.template cast<U>();
    m.dense[i].bias = dense[i].bias.template cast<U>();
  }
  return m;
}

template BasicModel<double> BasicModel<float>::cast<double>() const;
template BasicModel<float> BasicModel<double>::cast<float>() const;
template BasicModel<float> BasicModel<float>::cast<float>() const;
template BasicModel<double> BasicModel<double>::cast<double>() const;

template <typename T>
Matrix<T> BasicModel<T>::forward(std::span<const InputTensor> batch, Mode mode, ForwardTrace<T>* trace) {
  return run(batch, mode, trace, true);
}

template <typename T>
Matrix<T> BasicModel<T>::forward_eval(std::span<const InputTensor> batch, ForwardTrace<T>* trace) const {
  // Eval mode touches neither the dropout stream nor the running statistics.
  return const_cast<BasicModel*>(this)->run(batch, Mode::eval, trace, false);
}

template <typename T>
Matrix<T> BasicModel<T>::run(std::span<const InputTensor> batch, Mode mode, ForwardTrace<T>* trace,
                             bool update_stats) {
  const std::size_t n = batch.size();
  if (n == 0) throw validation_error("ShapeMismatch", "empty batch");
  const std::size_t side0 = hp_.input_side;
  for (const auto& in : batch) {
    if (in.side != side0 || in.values.size() != side0 * side0) {
      throw validation_error("ShapeMismatch", "input side " + std::to_string(in.side) + " != model side " +
                                                  std::to_string(side0));
    }
  }
  const bool train = mode == Mode::train;
  if (trace) {
    *trace = ForwardTrace<T>{};
    trace->mode = mode;
    trace->batch = n;
    trace->blocks.resize(blocks.size());
  }

  std::vector<Matrix<T>> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i].resize(1, static_cast<Eigen::Index>(side0 * side0));
    for (std::size_t p = 0; p < side0 * side0; ++p) x[i](0, static_cast<Eigen::Index>(p)) = static_cast<T>(batch[i].values[p]);
  }

  Matrix<T> cols;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const ConvBlock<T>& blk = blocks[bi];
    const std::size_t s = blk.side;
    const std::size_t so = s / hp_.pool;
    const auto C = static_cast<Eigen::Index>(blk.out_channels);
    const auto Q = static_cast<Eigen::Index>(so * so);
    BlockTrace<T>* bt = trace ? &trace->blocks[bi] : nullptr;
    if (bt) {
      bt->cols.resize(n);
      bt->act.resize(n);
      bt->argmax.resize(n);
      bt->xhat.resize(n);
      bt->out.resize(n);
      if (train && hp_.dropout_conv > 0) bt->drop_mask.resize(n);
    }

    std::vector<Matrix<T>> pooled(n);
    for (std::size_t i = 0; i < n; ++i) {
      Matrix<T>& c = bt ? bt->cols[i] : cols;
      im2col(x[i], blk.in_channels, s, blk.kernel, c);
      Matrix<T> act(C, static_cast<Eigen::Index>(s * s));
      act.noalias() = blk.weight * c;
      act.colwise() += blk.bias.col(0);
      act = act.cwiseMax(T(0));

      Matrix<T>& pl = pooled[i];
      pl.resize(C, Q);
      std::vector<std::uint32_t> arg(static_cast<std::size_t>(C * Q));
      for (std::size_t oy = 0; oy < so; ++oy) {
        for (std::size_t ox = 0; ox < so; ++ox) {
          const auto q = static_cast<Eigen::Index>(oy * so + ox);
          for (Eigen::Index ch = 0; ch < C; ++ch) {
            T best = -std::numeric_limits<T>::infinity();
            std::uint32_t best_p = 0;
            for (std::size_t dy = 0; dy < hp_.pool; ++dy) {
              for (std::size_t dx = 0; dx < hp_.pool; ++dx) {
                const auto p = static_cast<std::uint32_t>((oy * hp_.pool + dy) * s + ox * hp_.pool + dx);
                const T v = act(ch, p);
                if (v > best) {
                  best = v;
                  best_p = p;
                }
              }
            }
            pl(ch, q) = best;
            arg[static_cast<std::size_t>(ch + q * C)] = best_p;
          }
        }
      }
      if (train && hp_.dropout_conv > 0) {
        Matrix<T> mask = dropout_mask<T>(rng_, C, Q, hp_.dropout_conv);
        pl = pl.cwiseProduct(mask);
        if (bt) bt->drop_mask[i] = std::move(mask);
      }
      if (bt) {
        bt->act[i] = std::move(act);
        bt->argmax[i] = std::move(arg);
      }
    }

    // Per-channel normalization over batch and positions.
    Matrix<T> mean(C, 1), var(C, 1);
    if (train) {
      const T m = static_cast<T>(n * static_cast<std::size_t>(Q));
      mean.setZero();
      for (const auto& pl : pooled) mean += pl.rowwise().sum();
      mean /= m;
      var.setZero();
      for (const auto& pl : pooled) var += (pl.colwise() - mean.col(0)).array().square().matrix().rowwise().sum();
      var /= m;
      if (update_stats) {
        const T mom = static_cast<T>(hp_.bn_momentum);
        const T unbias = m > 1 ? m / (m - 1) : T(1);
        blocks[bi].running_mean = mom * blk.running_mean + (1 - mom) * mean;
        blocks[bi].running_var = mom * blk.running_var + (1 - mom) * (var * unbias);
      }
    } else {
      mean = blk.running_mean;
      var = blk.running_var;
    }
    Matrix<T> inv_std = (var.array() + static_cast<T>(hp_.bn_eps)).rsqrt().matrix();
    if (bt) bt->inv_std = inv_std;
    for (std::size_t i = 0; i < n; ++i) {
      Matrix<T> xhat = ((pooled[i].colwise() - mean.col(0)).array().colwise() * inv_std.col(0).array()).matrix();
      Matrix<T> out = ((xhat.array().colwise() * blk.gamma.col(0).array()).colwise() + blk.beta.col(0).array()).matrix();
      if (bt) {
        bt->xhat[i] = std::move(xhat);
        bt->out[i] = out;
      }
      x[i] = std::move(out);
    }
  }

  const auto C_last = x[0].rows();
  const auto Q_last = x[0].cols();
  Matrix<T> h(C_last * Q_last, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    // channel-major flatten: index c * Q + q
    Matrix<T> t = x[i].transpose();
    h.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(t.data(), t.size());
  }

  if (trace) trace->dense.resize(dense.size());
  for (std::size_t l = 0; l < dense.size(); ++l) {
    const bool hidden = l + 1 < dense.size();
    Matrix<T> z(dense[l].weight.rows(), h.cols());
    z.noalias() = dense[l].weight * h;
    z.colwise() += dense[l].bias.col(0);
    if (trace) trace->dense[l].input = h;
    if (!hidden) {
      h = std::move(z);
      break;
    }
    Matrix<T> a = z.cwiseMax(T(0));
    if (train && hp_.dropout_dense > 0) {
      Matrix<T> mask = dropout_mask<T>(rng_, a.rows(), a.cols(), hp_.dropout_dense);
      a = a.cwiseProduct(mask);
      if (trace) trace->dense[l].drop_mask = std::move(mask);
    }
    if (trace) trace->dense[l].z = std::move(z);
    h = std::move(a);
  }
  Matrix<T> probs = softmax_columns(h);
  if (trace) {
    trace->logits = h;
    trace->probs = probs;
  }
  return probs;
}

template <typename T>
Gradients<T> BasicModel<T>::backward(const ForwardTrace<T>& trace, const Matrix<T>& dlogits) const {
  if (trace.blocks.size() != blocks.size() || trace.dense.size() != dense.size() || trace.batch == 0) {
    throw validation_error("MissingTrace", "backward needs a trace from forward(..., trace)");
  }
  const std::size_t n = trace.batch;
  const bool train = trace.mode == Mode::train;
  Gradients<T> g;
  for (const auto& t : const_cast<BasicModel*>(this)->parameters()) {
    g.params.push_back(Matrix<T>::Zero(t.tensor->rows(), t.tensor->cols()));
  }
  const std::size_t dense_base = 4 * blocks.size();

  Matrix<T> d = dlogits;
  for (std::size_t li = dense.size(); li-- > 0;) {
    const DenseTrace<T>& dt = trace.dense[li];
    const bool hidden = li + 1 < dense.size();
    if (hidden) {
      if (dt.drop_mask.size() > 0) d = d.cwiseProduct(dt.drop_mask);
      d = d.cwiseProduct((dt.z.array() > T(0)).template cast<T>().matrix());
    }
    g.params[dense_base + 2 * li].noalias() += d * dt.input.transpose();
    g.params[dense_base + 2 * li + 1] += d.rowwise().sum();
    Matrix<T> din(dense[li].weight.cols(), d.cols());
    din.noalias() = dense[li].weight.transpose() * d;
    d = std::move(din);
  }

  const BlockTrace<T>& last = trace.blocks.back();
  const auto C_last = last.out[0].rows();
  const auto Q_last = last.out[0].cols();
  std::vector<Matrix<T>> dout(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Map<const Matrix<T>> qc(d.col(static_cast<Eigen::Index>(i)).data(), Q_last, C_last);
    dout[i] = qc.transpose();
  }

  for (std::size_t bi = blocks.size(); bi-- > 0;) {
    const ConvBlock<T>& blk = blocks[bi];
    const BlockTrace<T>& bt = trace.blocks[bi];
    const auto C = static_cast<Eigen::Index>(blk.out_channels);
    const std::size_t s = blk.side;
    Matrix<T>& dgamma = g.params[4 * bi + 2];
    Matrix<T>& dbeta = g.params[4 * bi + 3];
    std::vector<Matrix<T>> dxhat(n);
    Matrix<T> sum_dxhat = Matrix<T>::Zero(C, 1);
    Matrix<T> sum_dxhat_xhat = Matrix<T>::Zero(C, 1);
    for (std::size_t i = 0; i < n; ++i) {
      dgamma += dout[i].cwiseProduct(bt.xhat[i]).rowwise().sum();
      dbeta += dout[i].rowwise().sum();
      dxhat[i] = (dout[i].array().colwise() * blk.gamma.col(0).array()).matrix();
      if (train) {
        sum_dxhat += dxhat[i].rowwise().sum();
        sum_dxhat_xhat += dxhat[i].cwiseProduct(bt.xhat[i]).rowwise().sum();
      }
    }
    const T m = static_cast<T>(n * static_cast<std::size_t>(bt.xhat[0].cols()));
    std::vector<Matrix<T>> dprev(n);
    for (std::size_t i = 0; i < n; ++i) {
      Matrix<T> dpool;
      if (train) {
        // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
        Matrix<T> t = (dxhat[i] * m).colwise() - sum_dxhat.col(0);
        t -= (bt.xhat[i].array().colwise() * sum_dxhat_xhat.col(0).array()).matrix();
        dpool = (t.array().colwise() * (bt.inv_std.col(0).array() / m)).matrix();
      } else {
        dpool = (dxhat[i].array().colwise() * bt.inv_std.col(0).array()).matrix();
      }
      if (!bt.drop_mask.empty()) dpool = dpool.cwiseProduct(bt.drop_mask[i]);

      Matrix<T> dact = Matrix<T>::Zero(C, static_cast<Eigen::Index>(s * s));
      const auto Q = dpool.cols();
      for (Eigen::Index q = 0; q < Q; ++q) {
        for (Eigen::Index ch = 0; ch < C; ++ch) {
          dact(ch, bt.argmax[i][static_cast<std::size_t>(ch + q * C)]) += dpool(ch, q);
        }
      }
      if (bi + 1 == blocks.size()) g.feature_map.push_back(dact);

      Matrix<T> dz = dact.cwiseProduct((bt.act[i].array() > T(0)).template cast<T>().matrix());
      g.params[4 * bi].noalias() += dz * bt.cols[i].transpose();
      g.params[4 * bi + 1] += dz.rowwise().sum();
      if (bi > 0) {
        Matrix<T> dcols(blk.weight.cols(), dz.cols());
        dcols.noalias() = blk.weight.transpose() * dz;
        dprev[i] = col2im(dcols, blk.in_channels, s, blk.kernel);
      }
    }
    dout = std::move(dprev);
  }
  return g;
}

template <typename T>
T BasicModel<T>::loss_and_gradients(const ForwardTrace<T>& trace, std::span<const int> labels,
                                    Gradients<T>* grads) const {
  const std::size_t n = trace.batch;
  if (labels.size() != n) throw validation_error("ShapeMismatch", "labels/batch size mismatch");
  const auto C = trace.logits.rows();
  double loss = 0;
  Matrix<T> dlogits = trace.probs;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= C) throw validation_error("BadLabel", std::to_string(y));
    const auto col = static_cast<Eigen::Index>(i);
    const T mx = trace.logits.col(col).maxCoeff();
    double lse = 0;
    for (Eigen::Index c = 0; c < C; ++c) lse += std::exp(static_cast<double>(trace.logits(c, col) - mx));
    loss += std::log(lse) + static_cast<double>(mx) - static_cast<double>(trace.logits(y, col));
    dlogits(y, col) -= T(1);
  }
  dlogits /= static_cast<T>(n);
  if (grads) *grads = backward(trace, dlogits);
  return static_cast<T>(loss / static_cast<double>(n));
}

template <typename T>
Gradients<T> BasicModel<T>::score_gradients(const ForwardTrace<T>& trace, std::size_t target_class) const {
  if (target_class >= num_classes()) throw validation_error("BadLabel", std::to_string(target_class));
  Matrix<T> d = Matrix<T>::Zero(static_cast<Eigen::Index>(num_classes()), static_cast<Eigen::Index>(trace.batch));
  d.row(static_cast<Eigen::Index>(target_class)).setOnes();
  return backward(trace, d);
}

template class BasicModel<float>;
template class BasicModel<double>;

template <typename T>
OptimizerState<T> OptimizerState<T>::for_model(BasicModel<T>& model) {
  OptimizerState<T> s;
  for (const auto& t : model.parameters()) s.velocity.push_back(Matrix<T>::Zero(t.tensor->rows(), t.tensor->cols()));
  return s;
}

template <typename T>
void apply_momentum(BasicModel<T>& model, OptimizerState<T>& opt, const std::vector<Matrix<T>>& grads) {
  auto params = model.parameters();
  if (opt.velocity.size() != params.size() || grads.size() != params.size()) {
    throw validation_error("ShapeMismatch", "optimizer state does not match model");
  }
  const T lr = static_cast<T>(model.hyperparams().learning_rate);
  const T mom = static_cast<T>(model.hyperparams().momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.velocity[i] = mom * opt.velocity[i] - lr * grads[i];
    *params[i].tensor += opt.velocity[i];
  }
}

template <typename T>
T train_step(BasicModel<T>& model, OptimizerState<T>& opt, std::span<const InputTensor> batch,
             std::span<const int> labels) {
  ForwardTrace<T> trace;
  model.forward(batch, Mode::train, &trace);
  Gradients<T> g;
  const T loss = model.loss_and_gradients(trace, labels, &g);
  if (!std::isfinite(static_cast<double>(loss))) {
    throw runtime_error("NonFiniteLoss", "loss became " + std::to_string(static_cast<double>(loss)));
  }
  apply_momentum(model, opt, g.params);
  return loss;
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void apply_momentum<float>(BasicModel<float>&, OptimizerState<float>&, const std::vector<Matrix<float>>&);
template void apply_momentum<double>(BasicModel<double>&, OptimizerState<double>&, const std::vector<Matrix<double>>&);
template float train_step<float>(BasicModel<float>&, OptimizerState<float>&, std::span<const InputTensor>, std::span<const int>);
template double train_step<double>(BasicModel<double>&, OptimizerState<double>&, std::span<const InputTensor>, std::span<const int>);

std::size_t argmax_lowest(std::span<const double> values) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<Prediction> predict_batch(const Model& model, std::span<const InputTensor> inputs, std::size_t chunk) {
  std::vector<Prediction> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += chunk) {
    const std::size_t len = std::min(chunk, inputs.size() - start);
    const Matrix<float> probs = model.forward_eval(inputs.subspan(start, len));
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      Prediction p;
      p.probabilities.resize(static_cast<std::size_t>(probs.rows()));
      for (Eigen::Index c = 0; c < probs.rows(); ++c) p.probabilities[static_cast<std::size_t>(c)] = probs(c, j);
      p.label = argmax_lowest(p.probabilities);
      out.push_back(std::move(p));
    }
  }
  return out;
}

Prediction predict(const Model& model, const InputTensor& input) {
  return predict_batch(model, std::span<const InputTensor>(&input, 1)).front();
}

}  // namespace malvis::nn
