#include "malvis/harness.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "malvis/binviz.hpp"
#include "malvis/error.hpp"
#include "malvis/rng.hpp"

namespace malvis::harness {

namespace {

// Largest-remainder apportionment of `total` across `sizes`.
std::vector<std::size_t> apportion(const std::vector<std::size_t>& sizes, std::size_t total) {
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  std::vector<std::size_t> out(sizes.size(), 0);
  if (n == 0) return out;
  std::vector<std::pair<std::size_t, std::size_t>> rem;  // (remainder numerator, index)
  std::size_t given = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    out[i] = sizes[i] * total / n;
    given += out[i];
    rem.emplace_back(sizes[i] * total % n, i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; given < total && k < rem.size(); ++k, ++given) out[rem[k].second] += 1;
  return out;
}

std::size_t round_count(double x) { return static_cast<std::size_t>(std::llround(x)); }

}  // namespace

Partition split(const std::vector<Binary>& corpus, const SplitSpec& spec) {
  if (!(spec.test_fraction > 0 && spec.test_fraction < 1) || !(spec.val_fraction > 0 && spec.val_fraction < 1)) {
    throw validation_error("InvalidSplit", "fractions must lie in (0, 1)");
  }
  std::vector<std::size_t> base;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].origin == Origin::base || !corpus[i].parent_id) base.push_back(i);

  // groups of base indices, shuffled deterministically
  std::map<std::string, std::vector<std::size_t>> groups;
  for (auto i : base) groups[spec.stratified ? corpus[i].family : std::string()].push_back(i);
  std::vector<std::string> keys;
  std::vector<std::size_t> sizes;
  for (auto& [k, v] : groups) {
    if (spec.stratified && v.size() < 3) {
      throw validation_error("ClassTooSmall", "family '" + k + "' has " + std::to_string(v.size()) + " samples");
    }
    Rng rng(derive_seed(spec.seed, "split/" + k));
    rng.shuffle(v);
    keys.push_back(k);
    sizes.push_back(v.size());
  }
  const std::size_t n_test = round_count(static_cast<double>(base.size()) * spec.test_fraction);
  const auto test_q = apportion(sizes, n_test);
  std::vector<std::size_t> train_sizes(sizes.size());
  for (std::size_t g = 0; g < sizes.size(); ++g) train_sizes[g] = sizes[g] - test_q[g];
  const std::size_t n_train = base.size() - n_test;
  const auto val_q = apportion(train_sizes, round_count(static_cast<double>(n_train) * spec.val_fraction));

  std::unordered_map<std::string, int> where;  // 0 train, 1 val, 2 test
  for (std::size_t g = 0; g < keys.size(); ++g) {
    const auto& v = groups[keys[g]];
    for (std::size_t k = 0; k < v.size(); ++k) {
      const int p = k < test_q[g] ? 2 : (k < test_q[g] + val_q[g] ? 1 : 0);
      where[corpus[v[k]].id] = p;
    }
  }
  Partition out;
  auto bucket = [&](int p) -> std::vector<Binary>& { return p == 0 ? out.train : (p == 1 ? out.val : out.test); };
  for (const auto& b : corpus) {
    auto it = where.find(b.id);
    if (it == where.end() && b.parent_id) {
      // follow the chain up to a base ancestor
      std::string cur = *b.parent_id;
      it = where.find(cur);
      if (it == where.end()) throw validation_error("BadParent", b.id + " -> " + cur);
    }
    bucket(it->second).push_back(b);
  }
  return out;
}

Metrics metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion) {
  Metrics m;
  const std::size_t c = confusion.size();
  m.confusion = confusion;
  m.per_class.resize(c);
  std::size_t diag = 0;
  std::vector<std::size_t> col(c, 0);
  for (std::size_t i = 0; i < c; ++i) {
    if (confusion[i].size() != c) throw validation_error("ShapeMismatch", "confusion matrix is not square");
    for (std::size_t j = 0; j < c; ++j) {
      m.total += confusion[i][j];
      col[j] += confusion[i][j];
      m.per_class[i].support += confusion[i][j];
    }
    diag += confusion[i][i];
  }
  m.accuracy = m.total ? static_cast<double>(diag) / static_cast<double>(m.total) : 0.0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < c; ++i) {
    auto& k = m.per_class[i];
    const double tp = static_cast<double>(confusion[i][i]);
    k.precision = col[i] ? tp / static_cast<double>(col[i]) : 0.0;
    k.recall = k.support ? tp / static_cast<double>(k.support) : 0.0;
    k.f1 = (k.precision + k.recall) > 0 ? 2 * k.precision * k.recall / (k.precision + k.recall) : 0.0;
    if (k.support) {
      ++present;
      m.macro_precision += k.precision;
      m.macro_f1 += k.f1;
    }
  }
  if (present) {
    m.macro_precision /= static_cast<double>(present);
    m.macro_f1 /= static_cast<double>(present);
  }
  return m;
}

Metrics metrics_from_predictions(std::span<const int> truth, std::span<const std::size_t> predicted,
                                 std::size_t classes) {
  if (truth.size() != predicted.size()) throw validation_error("ShapeMismatch", "truth and predictions differ");
  std::vector<std::vector<std::size_t>> cm(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]);
    if (truth[i] < 0 || t >= classes || predicted[i] >= classes) throw validation_error("BadLabel", "label out of range");
    cm[t][predicted[i]] += 1;
  }
  return metrics_from_confusion(cm);
}

Metrics evaluate(const nn::Model& model, const nn::Dataset& test) {
  if (test.size() == 0) throw validation_error("EmptyTestSet", "nothing to evaluate");
  const auto preds = nn::predict_batch(model, test.inputs);
  std::vector<std::size_t> labels;
  labels.reserve(preds.size());
  for (const auto& p : preds) labels.push_back(p.label);
  return metrics_from_predictions(test.labels, labels, model.classes().size());
}

std::vector<std::string> family_names(const std::vector<Binary>& corpus) {
  std::vector<std::string> out;
  for (const auto& b : corpus) out.push_back(b.family);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

nn::Dataset to_dataset(const std::vector<Binary>& samples, const std::vector<std::string>& classes,
                       std::size_t side) {
  nn::Dataset d;
  d.inputs.reserve(samples.size());
  d.labels.reserve(samples.size());
  for (const auto& b : samples) {
    const auto it = std::find(classes.begin(), classes.end(), b.family);
    if (it == classes.end()) throw validation_error("UnknownClass", b.family);
    d.inputs.push_back(resize_to_input(binary_to_image(b), side));
    d.labels.push_back(static_cast<int>(it - classes.begin()));
  }
  return d;
}

std::vector<std::size_t> nested_subset(std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw validation_error("InvalidArgument", "fraction must lie in (0, 1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<std::size_t> out;
  for (auto& [c, idx] : by_class) {
    Rng rng(derive_seed(seed, "subset/" + std::to_string(c)));
    rng.shuffle(idx);
    const std::size_t k = std::min(idx.size(), round_count(fraction * static_cast<double>(idx.size())));
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(out.begin(), out.end());
  return out;
}

nlohmann::ordered_json metrics_to_json(const Metrics& m, const std::vector<std::string>& classes) {
  nlohmann::ordered_json j;
  j["accuracy"] = m.accuracy;
  j["macro_precision"] = m.macro_precision;
  j["macro_f1"] = m.macro_f1;
  j["total"] = m.total;
  auto per = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < m.per_class.size(); ++i) {
    const auto& k = m.per_class[i];
    per[i < classes.size() ? classes[i] : std::to_string(i)] = {
        {"precision", k.precision}, {"recall", k.recall}, {"f1", k.f1}, {"support", k.support}};
  }
  j["per_class"] = per;
  j["confusion"] = m.confusion;
  return j;
}

}  // namespace malvis::harness
