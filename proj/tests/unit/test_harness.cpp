#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <map>
#include <set>

#include "helpers.hpp"
#include "malvis/corpus.hpp"
#include "malvis/error.hpp"
#include "malvis/experiment.hpp"
#include "malvis/harness.hpp"
#include "malvis/obfusc.hpp"

using namespace malvis;
using namespace malvis::harness;

namespace {

std::vector<Binary> tiny_corpus(std::vector<std::size_t> counts) {
  std::vector<Binary> out;
  for (std::size_t f = 0; f < counts.size(); ++f) {
    for (std::size_t i = 0; i < counts[f]; ++i) {
      Binary b;
      b.family = "fam" + std::to_string(f);
      b.id = b.family + "_" + std::to_string(i);
      b.sections.push_back({SectionKind::data, Bytes(64 + i, static_cast<std::uint8_t>(f))});
      out.push_back(b);
    }
  }
  return out;
}

std::set<std::string> ids(const std::vector<Binary>& v) {
  std::set<std::string> s;
  for (const auto& b : v) s.insert(b.id);
  return s;
}

}  // namespace

TEST_CASE("split sizes for 100 samples") {
  SplitSpec s;
  s.seed = 3;
  const auto p = split(tiny_corpus({50, 30, 20}), s);
  CHECK(p.test.size() == 20);
  CHECK(p.val.size() == 12);
  CHECK(p.train.size() == 68);
  std::map<std::string, std::size_t> test_per;
  for (const auto& b : p.test) ++test_per[b.family];
  CHECK(test_per["fam0"] == 10);
  CHECK(test_per["fam1"] == 6);
  CHECK(test_per["fam2"] == 4);
}

TEST_CASE("largest-remainder quotas") {
  SplitSpec s;
  s.seed = 1;
  // 7,7,7 at 0.2: exact 1.4 each, total round(4.2) = 4
  const auto p = split(tiny_corpus({7, 7, 7}), s);
  CHECK(p.test.size() == 4);
  std::map<std::string, std::size_t> per;
  for (const auto& b : p.test) ++per[b.family];
  for (const auto& [f, n] : per) CHECK((n == 1 || n == 2));
}

TEST_CASE("split is deterministic, disjoint and complete") {
  const auto corpus = tiny_corpus({40, 25, 10});
  SplitSpec s;
  s.seed = 9;
  const auto a = split(corpus, s);
  const auto b = split(corpus, s);
  CHECK(ids(a.train) == ids(b.train));
  CHECK(ids(a.test) == ids(b.test));
  std::set<std::string> all;
  for (const auto* part : {&a.train, &a.val, &a.test}) {
    for (const auto& x : *part) CHECK(all.insert(x.id).second);
  }
  CHECK(all.size() == corpus.size());
  s.seed = 10;
  CHECK(ids(split(corpus, s).test) != ids(a.test));
}

TEST_CASE("transformed samples follow their parent") {
  auto corpus = tiny_corpus({20, 20});
  const std::size_t n = corpus.size();
  for (std::size_t i = 0; i < n; ++i) {
    Binary t = corpus[i];
    t.id += "~m";
    t.origin = Origin::morphed;
    t.parent_id = corpus[i].id;
    corpus.push_back(t);
  }
  SplitSpec s;
  s.seed = 2;
  const auto p = split(corpus, s);
  for (const auto* part : {&p.train, &p.val, &p.test}) {
    const auto in = ids(*part);
    for (const auto& x : *part) {
      if (x.parent_id) CHECK(in.count(*x.parent_id));
    }
  }
  Binary orphan = corpus[0];
  orphan.id = "orphan";
  orphan.parent_id = "missing";
  orphan.origin = Origin::packed;
  corpus.push_back(orphan);
  CHECK_THROWS_AS(split(corpus, s), Error);
}

TEST_CASE("split errors") {
  CHECK_THROWS_AS(split(tiny_corpus({10, 2}), SplitSpec{}), Error);
  SplitSpec bad;
  bad.test_fraction = 1.0;
  CHECK_THROWS_AS(split(tiny_corpus({10, 10}), bad), Error);
  SplitSpec flat;
  flat.stratified = false;
  CHECK(split(tiny_corpus({10, 2}), flat).test.size() == 2);
}

TEST_CASE("metrics from a 2x2 confusion") {
  const auto m = metrics_from_confusion({{8, 2}, {4, 6}});
  CHECK(m.accuracy == doctest::Approx(0.7));
  CHECK(m.macro_precision == doctest::Approx((8.0 / 12 + 6.0 / 8) / 2));
  const double f0 = 2 * (8.0 / 12) * 0.8 / (8.0 / 12 + 0.8);
  const double f1 = 2 * 0.75 * 0.6 / (0.75 + 0.6);
  CHECK(m.macro_f1 == doctest::Approx((f0 + f1) / 2));
  CHECK(m.per_class[0].support == 10);
  CHECK(m.total == 20);
}

TEST_CASE("metrics: absent classes and zero precision") {
  const auto m = metrics_from_confusion({{5, 0, 0}, {0, 0, 0}, {3, 0, 0}});
  CHECK(m.accuracy == doctest::Approx(5.0 / 8));
  // class 2 present but never predicted: P = R = F1 = 0
  CHECK(m.per_class[2].f1 == 0.0);
  CHECK(m.macro_precision == doctest::Approx((5.0 / 8 + 0.0) / 2));
}

TEST_CASE("property: metrics are invariant to sample order") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> truth(60);
    std::vector<std::size_t> pred(60);
    for (std::size_t i = 0; i < 60; ++i) {
      truth[i] = static_cast<int>(rng.below(4));
      pred[i] = rng.bernoulli(0.7) ? static_cast<std::size_t>(truth[i]) : rng.below(4);
    }
    const auto a = metrics_from_predictions(truth, pred, 4);
    std::vector<std::size_t> order(60);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<int> t2;
    std::vector<std::size_t> p2;
    for (auto i : order) {
      t2.push_back(truth[i]);
      p2.push_back(pred[i]);
    }
    const auto b = metrics_from_predictions(t2, p2, 4);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.macro_f1 == b.macro_f1);
    CHECK(a.confusion == b.confusion);
  }
}

TEST_CASE("evaluate refuses an empty test set") {
  nn::Hyperparams hp;
  hp.input_side = 8;
  hp.filters = {2};
  hp.first_kernel = 3;
  hp.dense1 = 4;
  hp.dense2 = 4;
  nn::Model m(hp, {"a", "b"}, 1);
  CHECK_THROWS_AS(evaluate(m, nn::Dataset{}), Error);
}

TEST_CASE("to_dataset labels and unknown classes") {
  const auto c = tiny_corpus({3, 3});
  const auto classes = family_names(c);
  CHECK(classes == std::vector<std::string>{"fam0", "fam1"});
  const auto d = to_dataset(c, classes, 16);
  CHECK(d.size() == 6);
  CHECK(d.labels[4] == 1);
  CHECK(d.inputs[0].side == 16);
  CHECK_THROWS_AS(to_dataset(c, {"fam0"}, 16), Error);
}

TEST_CASE("property: nested subsets grow monotonically and stay stratified") {
  Rng rng(5);
  std::vector<int> labels(300);
  for (auto& l : labels) l = static_cast<int>(rng.below(5));
  std::vector<std::size_t> prev;
  for (double f : {0.2, 0.4, 0.6, 0.8, 1.0}) {
    const auto s = nested_subset(labels, f, 77);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::includes(s.begin(), s.end(), prev.begin(), prev.end()));
    std::map<int, std::size_t> have, total;
    for (int l : labels) ++total[l];
    for (auto i : s) ++have[labels[i]];
    for (const auto& [c, n] : total)
      CHECK(have[c] == static_cast<std::size_t>(std::llround(f * static_cast<double>(n))));
    prev = s;
  }
  CHECK(prev.size() == labels.size());
}

TEST_CASE("metrics json") {
  const auto m = metrics_from_confusion({{1, 1}, {0, 2}});
  const auto j = metrics_to_json(m, {"x", "y"});
  CHECK(j.at("accuracy").get<double>() == doctest::Approx(0.75));
  CHECK(j.at("per_class").at("y").at("support") == 2);
}

TEST_CASE("report json round trip of the serialized fields") {
  experiment::Report r;
  r.classes = {"a", "b"};
  r.corpus_digest = "abc";
  experiment::Cell c;
  c.train_variant = "base";
  c.test_variant = "packed";
  c.applicable = 3;
  c.total = 5;
  c.metrics = metrics_from_confusion({{2, 0}, {1, 0}});
  r.grid.push_back(c);
  const auto j = experiment::report_to_json(r);
  const auto again = nlohmann::json::parse(j.dump());
  CHECK(again.at("schema_version") == experiment::kReportSchemaVersion);
  CHECK(again.at("classes") == nlohmann::json({"a", "b"}));
  CHECK(r.cell("base", "packed").applicable == 3);
  CHECK_THROWS_AS(r.cell("enhanced", "packed"), Error);
  CHECK(experiment::report_csv(r).find("base,packed") != std::string::npos);
}
