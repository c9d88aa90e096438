#include "malvis/xai.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "malvis/error.hpp"
#include "malvis/rng.hpp"

namespace malvis::xai {

std::string_view to_string(Method m) noexcept {
  switch (m) {
    case Method::occlusion: return "occlusion";
    case Method::hirescam: return "hirescam";
    case Method::shap: return "shap";
  }
  return "occlusion";
}

Method method_from_string(std::string_view s) {
  if (s == "occlusion") return Method::occlusion;
  if (s == "hirescam") return Method::hirescam;
  if (s == "shap") return Method::shap;
  throw validation_error("BadMethod", std::string(s));
}

Normalization Heatmap::normalization() const {
  if (raw.empty()) return {};
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  return {*lo, *hi};
}

std::vector<double> Heatmap::rescaled() const {
  const Normalization n = normalization();
  std::vector<double> out(raw.size(), 0.0);
  if (n.max > n.min) {
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - n.min) / (n.max - n.min);
  }
  return out;
}

std::vector<std::vector<double>> ModelClassifier::probabilities(std::span<const InputTensor> batch) const {
  std::vector<std::vector<double>> out;
  for (auto& p : nn::predict_batch(model_, batch, chunk_)) out.push_back(std::move(p.probabilities));
  return out;
}

std::vector<std::vector<double>> FunctionClassifier::probabilities(std::span<const InputTensor> batch) const {
  std::vector<std::vector<double>> out;
  out.reserve(batch.size());
  for (const auto& x : batch) out.push_back(fn_(x));
  return out;
}

namespace {

std::size_t predicted_class(const Classifier& model, const InputTensor& input) {
  const auto p = model.probabilities(std::span<const InputTensor>(&input, 1)).front();
  return nn::argmax_lowest(p);
}

// Evaluates `inputs` in chunks so big perturbation sets never sit in memory at once.
template <typename MakeInput>
std::vector<double> class_probabilities(const Classifier& model, std::size_t count, std::size_t cls,
                                        MakeInput make) {
  constexpr std::size_t kChunk = 64;
  std::vector<double> out;
  out.reserve(count);
  std::vector<InputTensor> buf;
  for (std::size_t start = 0; start < count; start += kChunk) {
    buf.clear();
    const std::size_t end = std::min(count, start + kChunk);
    for (std::size_t i = start; i < end; ++i) buf.push_back(make(i));
    for (const auto& p : model.probabilities(buf)) out.push_back(p.at(cls));
  }
  return out;
}

}  // namespace

std::vector<std::size_t> window_offsets(std::size_t side, std::size_t window, std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t o = 0; o + window <= side; o += stride) out.push_back(o);
  if (out.empty() || out.back() + window < side) out.push_back(side - window);
  return out;
}

Heatmap occlusion_map(const Classifier& model, const InputTensor& input, std::size_t window, std::size_t stride,
                      double baseline, std::optional<std::size_t> target_class) {
  const std::size_t side = input.side;
  if (window == 0 || window > side) {
    throw validation_error("WindowTooLarge", "window " + std::to_string(window) + " vs side " + std::to_string(side));
  }
  if (stride == 0) throw validation_error("InvalidArgument", "stride must be positive");
  const std::size_t c = target_class.value_or(predicted_class(model, input));
  const double p_full = model.probabilities(std::span<const InputTensor>(&input, 1)).front().at(c);

  const auto offs = window_offsets(side, window, stride);
  const std::size_t per_axis = offs.size();
  const auto base = static_cast<float>(baseline);
  const auto probs = class_probabilities(model, per_axis * per_axis, c, [&](std::size_t i) {
    InputTensor x = input;
    const std::size_t oy = offs[i / per_axis], ox = offs[i % per_axis];
    for (std::size_t r = oy; r < oy + window; ++r)
      for (std::size_t col = ox; col < ox + window; ++col) x.at(r, col) = base;
    return x;
  });

  std::vector<double> sum(side * side, 0.0);
  std::vector<std::size_t> hits(side * side, 0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double score = p_full - probs[i];
    const std::size_t oy = offs[i / per_axis], ox = offs[i % per_axis];
    for (std::size_t r = oy; r < oy + window; ++r) {
      for (std::size_t col = ox; col < ox + window; ++col) {
        sum[r * side + col] += score;
        hits[r * side + col] += 1;
      }
    }
  }
  Heatmap h;
  h.method = Method::occlusion;
  h.rows = h.cols = side;
  h.target_class = c;
  h.raw.resize(side * side);
  for (std::size_t i = 0; i < sum.size(); ++i) h.raw[i] = hits[i] ? sum[i] / static_cast<double>(hits[i]) : 0.0;
  h.params.window = window;
  h.params.stride = stride;
  h.params.baseline = baseline;
  return h;
}

std::vector<double> hirescam_raw(const nn::Matrix<double>& feature_map, const nn::Matrix<double>& score_grad) {
  if (feature_map.rows() != score_grad.rows() || feature_map.cols() != score_grad.cols()) {
    throw validation_error("ShapeMismatch", "feature map and gradient differ in shape");
  }
  const nn::Matrix<double> prod = feature_map.cwiseProduct(score_grad);
  std::vector<double> out(static_cast<std::size_t>(prod.cols()));
  for (Eigen::Index p = 0; p < prod.cols(); ++p) out[static_cast<std::size_t>(p)] = prod.col(p).sum();
  return out;
}

std::vector<double> upsample_nearest(std::span<const double> grid, std::size_t from_side, std::size_t to_side) {
  if (grid.size() != from_side * from_side) throw validation_error("ShapeMismatch", "grid is not square");
  std::vector<double> out(to_side * to_side);
  for (std::size_t r = 0; r < to_side; ++r) {
    const std::size_t sr = r * from_side / to_side;
    for (std::size_t c = 0; c < to_side; ++c) out[r * to_side + c] = grid[sr * from_side + c * from_side / to_side];
  }
  return out;
}

Heatmap hirescam(const nn::Model& model, const InputTensor& input, std::size_t target_class) {
  nn::ForwardTrace<float> trace;
  model.forward_eval(std::span<const InputTensor>(&input, 1), &trace);
  const auto grads = model.score_gradients(trace, target_class);
  if (grads.feature_map.empty()) throw validation_error("MissingTrace", "no feature-map gradient");
  const auto& a = trace.last_feature_map().front();
  const std::vector<double> raw =
      hirescam_raw(a.cast<double>(), grads.feature_map.front().cast<double>());
  const auto fside = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(raw.size()))));

  Heatmap h;
  h.method = Method::hirescam;
  h.rows = h.cols = input.side;
  h.target_class = target_class;
  h.raw = upsample_nearest(raw, fside, input.side);
  return h;
}

Segmentation Segmentation::regular(std::size_t side, std::size_t grid) {
  if (grid == 0 || side % grid != 0) throw validation_error("InvalidArgument", "grid must divide side");
  Segmentation s;
  s.side = side;
  s.grid = grid;
  s.segment_of.resize(side * side);
  const std::size_t cell = side / grid;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c)
      s.segment_of[r * side + c] = static_cast<std::uint32_t>((r / cell) * grid + c / cell);
  return s;
}

double shapley_kernel_weight(std::size_t m, std::size_t s) {
  // (M-1) / (C(M,s) * s * (M-s)), with C(M,s) in log space to stay finite for large M.
  const double log_binom = std::lgamma(static_cast<double>(m) + 1) - std::lgamma(static_cast<double>(s) + 1) -
                           std::lgamma(static_cast<double>(m - s) + 1);
  return static_cast<double>(m - 1) /
         (std::exp(log_binom) * static_cast<double>(s) * static_cast<double>(m - s));
}

std::vector<double> kernel_shap_values(std::size_t m, const BatchValueFn& value,
                                       std::optional<std::size_t> n_coalitions, std::uint64_t seed) {
  if (m == 0) throw validation_error("InvalidArgument", "need at least one segment");
  const Coalition empty(m, false), full(m, true);
  const auto ends = value({empty, full});
  const double v0 = ends.at(0), v1 = ends.at(1);
  const double delta = v1 - v0;
  if (m == 1) return {delta};

  std::vector<Coalition> coalitions;
  std::vector<double> weights;
  if (!n_coalitions) {
    if (m > kMaxExactKernelSegments) {
      throw validation_error("TooManySegmentsForExact", std::to_string(m) + " segments (max " +
                                                            std::to_string(kMaxExactKernelSegments) + ")");
    }
    const std::uint64_t total = std::uint64_t{1} << m;
    for (std::uint64_t mask = 1; mask + 1 < total; ++mask) {
      Coalition z(m);
      std::size_t size = 0;
      for (std::size_t i = 0; i < m; ++i) {
        z[i] = (mask >> i) & 1u;
        size += z[i];
      }
      coalitions.push_back(std::move(z));
      weights.push_back(shapley_kernel_weight(m, size));
    }
  } else {
    if (*n_coalitions < m + 2) {
      throw validation_error("InvalidArgument", "n_coalitions must be >= M + 2 (" + std::to_string(m + 2) + ")");
    }
    // Size s has total kernel mass C(M,s) * w(s) = (M-1) / (s (M-s)).
    std::vector<double> cdf(m - 1);
    double acc = 0;
    for (std::size_t s = 1; s < m; ++s) {
      acc += static_cast<double>(m - 1) / (static_cast<double>(s) * static_cast<double>(m - s));
      cdf[s - 1] = acc;
    }
    for (auto& c : cdf) c /= acc;
    Rng rng(seed);
    std::vector<std::size_t> idx(m);
    while (coalitions.size() < *n_coalitions) {
      const double u = rng.uniform();
      std::size_t s = 1;
      while (s < m - 1 && u >= cdf[s - 1]) ++s;
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      // partial Fisher-Yates: first s entries are a uniform s-subset
      for (std::size_t i = 0; i < s; ++i) std::swap(idx[i], idx[i + rng.below(m - i)]);
      Coalition z(m, false);
      for (std::size_t i = 0; i < s; ++i) z[idx[i]] = true;
      Coalition complement(m);
      for (std::size_t i = 0; i < m; ++i) complement[i] = !z[i];
      coalitions.push_back(std::move(z));
      weights.push_back(1.0);
      if (coalitions.size() < *n_coalitions) {
        coalitions.push_back(std::move(complement));
        weights.push_back(1.0);
      }
    }
  }

  const auto values = value(coalitions);
  if (values.size() != coalitions.size()) throw runtime_error("ShapeMismatch", "value function returned wrong count");

  // Eliminate the last player with the efficiency constraint:
  // phi_M = delta - sum_{i<M} phi_i.
  const auto rows = static_cast<Eigen::Index>(coalitions.size());
  const auto cols = static_cast<Eigen::Index>(m - 1);
  Eigen::MatrixXd X(rows, cols);
  Eigen::VectorXd y(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Coalition& z = coalitions[static_cast<std::size_t>(r)];
    const double last = z[m - 1] ? 1.0 : 0.0;
    const double sw = std::sqrt(weights[static_cast<std::size_t>(r)]);
    for (Eigen::Index c = 0; c < cols; ++c) X(r, c) = sw * ((z[static_cast<std::size_t>(c)] ? 1.0 : 0.0) - last);
    y(r) = sw * (values[static_cast<std::size_t>(r)] - v0 - last * delta);
  }
  const Eigen::VectorXd head = X.completeOrthogonalDecomposition().solve(y);
  std::vector<double> phi(m);
  double sum = 0;
  for (Eigen::Index c = 0; c < cols; ++c) {
    phi[static_cast<std::size_t>(c)] = head(c);
    sum += head(c);
  }
  phi[m - 1] = delta - sum;
  return phi;
}

std::vector<double> exact_shap_oracle(std::size_t m, const ValueFn& value) {
  if (m == 0) throw validation_error("InvalidArgument", "need at least one segment");
  if (m > kMaxOracleSegments) {
    throw validation_error("TooManySegments", std::to_string(m) + " segments (max " +
                                                  std::to_string(kMaxOracleSegments) + ")");
  }
  const std::size_t total = std::size_t{1} << m;
  std::vector<double> v(total);
  for (std::size_t mask = 0; mask < total; ++mask) {
    Coalition z(m);
    for (std::size_t i = 0; i < m; ++i) z[i] = (mask >> i) & 1u;
    v[mask] = value(z);
  }
  std::vector<double> fact(m + 1, 1.0);
  for (std::size_t i = 1; i <= m; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
  std::vector<double> phi(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    for (std::size_t mask = 0; mask < total; ++mask) {
      if (mask & bit) continue;
      const auto s = static_cast<std::size_t>(__builtin_popcountll(mask));
      const double w = fact[s] * fact[m - s - 1] / fact[m];
      phi[i] += w * (v[mask | bit] - v[mask]);
    }
  }
  return phi;
}

Heatmap kernel_shap(const Classifier& model, const InputTensor& input, const Segmentation& seg, double background,
                    std::optional<std::size_t> n_coalitions, std::uint64_t seed,
                    std::optional<std::size_t> target_class) {
  if (seg.side != input.side || seg.segment_of.size() != input.values.size()) {
    throw validation_error("ShapeMismatch", "segmentation does not match the input");
  }
  const std::size_t c = target_class.value_or(predicted_class(model, input));
  const auto bg = static_cast<float>(background);
  const BatchValueFn value = [&](const std::vector<Coalition>& zs) {
    return class_probabilities(model, zs.size(), c, [&](std::size_t i) {
      InputTensor x = input;
      const Coalition& z = zs[i];
      for (std::size_t p = 0; p < x.values.size(); ++p) {
        if (!z[seg.segment_of[p]]) x.values[p] = bg;
      }
      return x;
    });
  };
  const auto phi = kernel_shap_values(seg.count(), value, n_coalitions, seed);

  Heatmap h;
  h.method = Method::shap;
  h.rows = h.cols = input.side;
  h.target_class = c;
  h.raw.resize(input.values.size());
  for (std::size_t p = 0; p < h.raw.size(); ++p) h.raw[p] = phi[seg.segment_of[p]];
  h.params.segments = seg.count();
  h.params.coalitions = n_coalitions.value_or(0);
  h.params.exact = !n_coalitions;
  h.params.seed = seed;
  h.params.baseline = background;
  return h;
}

Heatmap cumulative_heatmap(std::span<const Heatmap> maps) {
  if (maps.empty()) throw validation_error("EmptyList", "cumulative_heatmap needs at least one map");
  const Heatmap& first = maps.front();
  Heatmap out = first;
  std::fill(out.raw.begin(), out.raw.end(), 0.0);
  for (const auto& m : maps) {
    if (m.method != first.method || m.target_class != first.target_class) {
      throw validation_error("MixedMethods", "maps differ in method or target class");
    }
    if (m.rows != first.rows || m.cols != first.cols) throw validation_error("ShapeMismatch", "maps differ in resolution");
    for (std::size_t i = 0; i < out.raw.size(); ++i) out.raw[i] += m.raw[i];
  }
  for (auto& v : out.raw) v /= static_cast<double>(maps.size());
  out.params.samples = maps.size();
  return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return values[a] > values[b] || (values[a] == values[b] && a < b); });
  idx.resize(k);
  return idx;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw validation_error("ShapeMismatch", "spearman inputs differ in length");
  if (a.empty()) return 0.0;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return (saa == 0 && sbb == 0 && std::equal(a.begin(), a.end(), b.begin())) ? 1.0 : 0.0;
  return sab / std::sqrt(saa * sbb);
}

AgreementScore agreement(const Heatmap& a, const Heatmap& b, std::size_t k) {
  if (a.rows != b.rows || a.cols != b.cols) throw validation_error("ShapeMismatch", "heatmaps differ in resolution");
  AgreementScore s;
  s.first = std::min(a.method, b.method);
  s.second = std::max(a.method, b.method);
  s.k = std::min(k, a.raw.size());
  auto ta = top_k_indices(a.raw, s.k), tb = top_k_indices(b.raw, s.k);
  std::sort(ta.begin(), ta.end());
  std::sort(tb.begin(), tb.end());
  std::vector<std::size_t> inter, uni;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(inter));
  std::set_union(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(uni));
  s.iou_topk = uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
  s.rank_corr = spearman(a.raw, b.raw);
  return s;
}

double positive_mass_fraction(const Heatmap& h, std::size_t row_begin, std::size_t row_end) {
  double total = 0, region = 0;
  for (std::size_t r = 0; r < h.rows; ++r) {
    for (std::size_t c = 0; c < h.cols; ++c) {
      const double v = std::max(0.0, h.at(r, c));
      total += v;
      if (r >= row_begin && r < row_end) region += v;
    }
  }
  return total > 0 ? region / total : 0.0;
}

namespace {

ByteImage rescaled_image(const Heatmap& h) {
  const auto r = h.rescaled();
  ByteImage img{h.cols, h.rows, std::vector<std::uint8_t>(r.size())};
  for (std::size_t i = 0; i < r.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * r[i]));
  return img;
}

}  // namespace

void export_heatmap(const std::filesystem::path& path, const Heatmap& h, const std::string& class_name) {
  write_pgm(path, rescaled_image(h));
  const Normalization n = h.normalization();
  nlohmann::ordered_json j;
  j["method"] = std::string(to_string(h.method));
  j["class"] = class_name;
  j["class_index"] = h.target_class;
  j["min"] = n.min;
  j["max"] = n.max;
  j["rows"] = h.rows;
  j["cols"] = h.cols;
  j["samples"] = h.params.samples;
  switch (h.method) {
    case Method::occlusion:
      j["window"] = h.params.window;
      j["stride"] = h.params.stride;
      j["baseline"] = h.params.baseline;
      break;
    case Method::shap:
      j["M"] = h.params.segments;
      j["coalitions"] = h.params.exact ? nlohmann::ordered_json("all") : nlohmann::ordered_json(h.params.coalitions);
      j["background"] = h.params.baseline;
      j["seed"] = h.params.seed;
      break;
    case Method::hirescam:
      break;
  }
  const std::string s = j.dump(2) + "\n";
  auto sidecar = path;
  sidecar += ".json";
  write_file(sidecar, ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

void export_grid_overlay(const std::filesystem::path& path, const Heatmap& h, std::size_t grid) {
  ByteImage img = rescaled_image(h);
  if (grid == 0) throw validation_error("InvalidArgument", "grid must be positive");
  const std::size_t step_r = std::max<std::size_t>(1, h.rows / grid);
  const std::size_t step_c = std::max<std::size_t>(1, h.cols / grid);
  for (std::size_t r = 0; r < h.rows; ++r) {
    for (std::size_t c = 0; c < h.cols; ++c) {
      if (r % step_r == 0 || c % step_c == 0) img.pixels[r * h.cols + c] = 255;
    }
  }
  write_pgm(path, img);
}

}  // namespace malvis::xai
