// One PASS/FAIL line per acceptance criterion. Exit status is non-zero when
// any criterion fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "../common/gradcheck.hpp"
#include "../unit/helpers.hpp"
#include "malvis/binviz.hpp"
#include "malvis/config.hpp"
#include "malvis/corpus.hpp"
#include "malvis/experiment.hpp"
#include "malvis/harness.hpp"
#include "malvis/nn.hpp"
#include "malvis/obfusc.hpp"
#include "malvis/xai.hpp"

namespace fs = std::filesystem;
using namespace malvis;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& detail) {
  std::cout << "criterion " << id << ": " << (ok ? "PASS" : "FAIL") << "  " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << v;
  return os.str();
}

double pts(double acc) { return acc * 100.0; }

// 1 -------------------------------------------------------------------------
void gradient_check() {
  const auto t0 = Clock::now();
  nn::Hyperparams hp;
  hp.input_side = 16;
  hp.filters = {4, 8, 8};
  hp.dense1 = 32;
  hp.dense2 = 16;
  nn::BasicModel<double> m(hp, {"a", "b", "c", "d"}, 101);
  Rng rng(102);
  std::vector<InputTensor> batch(4);
  std::vector<int> labels;
  for (auto& t : batch) {
    t.side = 16;
    t.values.resize(256);
    for (auto& v : t.values) v = static_cast<float>(rng.uniform());
    labels.push_back(static_cast<int>(rng.below(4)));
  }
  testutil::jitter_biases(m, 103);
  const auto g = testutil::grad_check(m, batch, labels, 1e-6);
  const double secs = seconds_since(t0);
  verdict(1, g.max_rel <= 1e-3 && secs < 60.0,
          "max rel err " + std::to_string(g.max_rel) + " (" + g.worst + ") over " + std::to_string(g.checked) +
              " params, tol 1e-3; " + fmt(secs, 1) + " s < 60 s");
}

// 2-6, 9 --------------------------------------------------------------------
void experiment_criteria(const fs::path& workdir) {
  Config cfg;
  apply_env_overrides(cfg);
  validate(cfg);
  std::cout << "running default experiment (seed " << cfg.seed << ")" << std::endl;
  const auto corpus = experiment::corpus_for(cfg);
  const auto log = [](const std::string& s) { std::cerr << "  " << s << '\n'; };
  const auto ctx = experiment::prepare(cfg, corpus, log);

  const auto t0 = Clock::now();
  auto deg = experiment::degradation_experiment(ctx);
  const double base_secs = seconds_since(t0);
  auto enh = experiment::enhancement_experiment(ctx, deg.packed, deg.morphed);

  experiment::Report r;
  r.config = config_to_json(cfg);
  r.seeds = ctx.seeds;
  r.corpus_digest = ctx.corpus_digest;
  r.classes = ctx.classes;
  r.train_size = ctx.partition.train.size();
  r.val_size = ctx.partition.val.size();
  r.test_size = ctx.partition.test.size();
  r.pack_conversion = deg.packed.conversion;
  r.morph_conversion = deg.morphed.conversion;
  r.grid = deg.cells;
  r.grid.insert(r.grid.end(), enh.cells.begin(), enh.cells.end());
  r.enhance_stats = enh.stats;
  r.enhanced_train_size = enh.train_size;
  r.base_history = deg.model.history;
  r.enhanced_history = enh.model.history;
  r.base_checkpoint_digest = deg.model.digest;
  r.enhanced_checkpoint_digest = enh.model.digest;
  r.progressive = experiment::progressive_training(ctx, cfg.progressive_fractions, &r.cell("base", "base").metrics);
  r.morph_passes = experiment::morph_pass_sensitivity(ctx, deg.model.model, cfg.obfuscation.sensitivity_passes);
  r.overlay_shift.push_back(experiment::overlay_shift(ctx, deg.model.model, "base", deg.packed.samples));
  r.overlay_shift.push_back(experiment::overlay_shift(ctx, enh.model.model, "enhanced", deg.packed.samples));
  std::ofstream(workdir / "default_report.json") << experiment::report_to_json(r).dump(2) << '\n';

  const double clean = r.cell("base", "base").metrics.accuracy;
  const auto& packed_cell = r.cell("base", "packed");
  const auto& morphed_cell = r.cell("base", "morphed");
  const double packed = packed_cell.metrics.accuracy;
  const double morphed = morphed_cell.metrics.accuracy;

  {
    std::map<std::string, std::size_t> counts;
    for (const auto& b : corpus) ++counts[b.family];
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& [f, n] : counts) {
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    const bool corpus_ok = counts.size() == 5 && corpus.size() == 1000 && hi <= 4 * lo;
    verdict(2, corpus_ok && clean >= 0.95 && cfg.model.epochs <= 20 && base_secs < 600.0,
            "clean test acc " + fmt(clean) + " >= 0.95; " + std::to_string(cfg.model.epochs) + " epochs; base run " +
                fmt(base_secs, 1) + " s < 600 s; families " + std::to_string(counts.size()) + ", imbalance " +
                std::to_string(hi) + ":" + std::to_string(lo));
  }
  verdict(3, !packed_cell.skipped && pts(clean) - pts(packed) >= 30.0,
          "clean " + fmt(clean) + " packed " + fmt(packed) + " on " + std::to_string(packed_cell.applicable) + "/" +
              std::to_string(packed_cell.total) + " applicable; drop " + fmt(pts(clean) - pts(packed), 2) +
              " >= 30 points");
  {
    double lo = 1.0, hi = 0.0;
    std::string passes;
    for (const auto& p : r.morph_passes) {
      lo = std::min(lo, p.metrics.accuracy);
      hi = std::max(hi, p.metrics.accuracy);
      passes += " p" + std::to_string(p.passes) + "=" + fmt(p.metrics.accuracy);
    }
    const double drop = pts(clean) - pts(morphed);
    const double spread = pts(hi) - pts(lo);
    verdict(4, !morphed_cell.skipped && drop <= 5.0 && spread <= 2.0 && r.morph_passes.size() >= 3,
            "morphed " + fmt(morphed) + " drop " + fmt(drop, 2) + " <= 5 points; passes" + passes + " spread " +
                fmt(spread, 2) + " <= 2 points");
  }
  {
    const double enh_packed = r.cell("enhanced", "packed").metrics.accuracy;
    const double enh_clean = r.cell("enhanced", "base").metrics.accuracy;
    const double gain = pts(enh_packed) - pts(packed);
    const double clean_change = std::abs(pts(enh_clean) - pts(clean));
    verdict(5, gain >= 15.0 && clean_change <= 2.0,
            "packed " + fmt(packed) + " -> " + fmt(enh_packed) + " (+" + fmt(gain, 2) + " >= 15 points); clean " +
                fmt(clean) + " -> " + fmt(enh_clean) + " (|change| " + fmt(clean_change, 2) + " <= 2 points)");
  }
  {
    bool ok = r.progressive.size() >= 2;
    std::string curve;
    for (std::size_t i = 0; i < r.progressive.size(); ++i) {
      const auto& p = r.progressive[i];
      curve += " " + fmt(p.fraction, 1) + ":" + fmt(p.metrics.accuracy);
      if (i > 0 && pts(p.metrics.accuracy) < pts(r.progressive[i - 1].metrics.accuracy) - 2.0) ok = false;
    }
    double gain_tail = 0.0;
    const auto at = [&](double f) -> const experiment::ProgressivePoint* {
      for (const auto& p : r.progressive)
        if (std::abs(p.fraction - f) < 1e-9) return &p;
      return nullptr;
    };
    if (at(0.8) && at(1.0)) {
      gain_tail = pts(at(1.0)->metrics.accuracy) - pts(at(0.8)->metrics.accuracy);
      ok = ok && gain_tail <= 2.0;
    } else {
      ok = false;
    }
    verdict(6, ok, "accuracy by fraction" + curve + "; non-decreasing within 2 points; 0.8->1.0 gain " +
                       fmt(gain_tail, 2) + " <= 2 points");
  }
  {
    std::string detail;
    bool primary_ok = false;
    for (const auto& s : r.overlay_shift) {
      const bool ok = s.packed_bottom > s.base_bottom && s.packed_top < s.base_top;
      detail += s.model + ": bottom " + fmt(s.base_bottom) + " -> " + fmt(s.packed_bottom) + ", top " +
                fmt(s.base_top) + " -> " + fmt(s.packed_top) + " over " + std::to_string(s.samples) + " samples" +
                (ok ? " (shift)" : " (no shift)") + "; ";
      if (s.model == "enhanced") primary_ok = ok;
    }
    verdict(9, primary_ok, detail + "criterion read on the enhanced model");
  }
}

// 7 -------------------------------------------------------------------------
void shap_exactness() {
  // Stub image model; eight horizontal bands are the players.
  const std::size_t side = 16, m = 8;
  Rng rng(71);
  InputTensor x;
  x.side = side;
  x.values.resize(side * side);
  for (auto& v : x.values) v = static_cast<float>(0.2 + 0.8 * rng.uniform());
  std::vector<double> w(side * side);
  for (auto& v : w) v = rng.normal();
  const xai::FunctionClassifier stub(2, [&](const InputTensor& in) {
    double z = 0.0;
    for (std::size_t i = 0; i < in.values.size(); ++i) z += w[i] * in.values[i];
    const double p = 1.0 / (1.0 + std::exp(-z / 8.0));
    return std::vector<double>{p, 1.0 - p};
  });
  const auto masked = [&](const xai::Coalition& s) {
    InputTensor t = x;
    for (std::size_t i = 0; i < t.values.size(); ++i)
      if (!s[(i / side) / (side / m)]) t.values[i] = 0.0f;
    return t;
  };
  const xai::ValueFn v = [&](const xai::Coalition& s) {
    const auto t = masked(s);
    return stub.probabilities(std::span<const InputTensor>(&t, 1))[0][0];
  };
  const xai::BatchValueFn bv = [&](const std::vector<xai::Coalition>& cs) {
    std::vector<double> out;
    for (const auto& c : cs) out.push_back(v(c));
    return out;
  };
  const auto oracle = xai::exact_shap_oracle(m, v);
  const auto exact = xai::kernel_shap_values(m, bv, std::nullopt, 1);
  const auto sampled = xai::kernel_shap_values(m, bv, 2048, 2);
  double e_exact = 0.0, e_sampled = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    e_exact = std::max(e_exact, std::abs(exact[i] - oracle[i]));
    e_sampled = std::max(e_sampled, std::abs(sampled[i] - oracle[i]));
  }
  std::ostringstream det;
  det << "M=8 exact max err " << e_exact << " <= 1e-6; sampled (2048) max err " << e_sampled << " <= 0.02";
  verdict(7, e_exact <= 1e-6 && e_sampled <= 0.02, det.str());
}

// 8 -------------------------------------------------------------------------
// Pixels of the model input whose source bytes are the planted motif.
std::vector<bool> motif_pixels(const Binary& b, const FamilySpec& spec, std::size_t side) {
  const Bytes raw = serialize(b);
  const auto it = std::search(raw.begin(), raw.end(), spec.motif.begin(), spec.motif.end());
  Bytes marker(raw.size(), 0);
  if (it != raw.end()) {
    const auto off = static_cast<std::size_t>(it - raw.begin());
    std::fill(marker.begin() + static_cast<std::ptrdiff_t>(off),
              marker.begin() + static_cast<std::ptrdiff_t>(off + spec.motif.size()), 255);
  }
  const auto img = resize_to_input(bytes_to_image(marker, width_for_size(raw.size())), side, false);
  std::vector<bool> out(side * side);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.values[i] > 0.0f;
  return out;
}

void occlusion_localization() {
  const Config cfg;
  const auto specs = default_family_specs();
  const FamilySpec& spec = specs.front();
  const auto corpus = experiment::corpus_for(cfg);
  const auto part = harness::split(corpus, [&] {
    SplitSpec s = cfg.split;
    s.seed = experiment::Seeds::from(cfg).split;
    return s;
  }());
  const std::size_t side = cfg.model.input_side, grid = cfg.xai.grid, cell = side / grid;

  double iou_sum = 0.0;
  std::size_t n = 0, stub_agree = 0, skipped = 0;
  for (const auto& b : part.test) {
    if (b.family != spec.name || n == 20) continue;
    const auto mask = motif_pixels(b, spec, side);
    if (std::none_of(mask.begin(), mask.end(), [](bool v) { return v; })) {
      ++skipped;
      continue;
    }
    const InputTensor x = resize_to_input(binary_to_image(b), side);
    std::vector<float> ref;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) ref.push_back(x.values[i]);
    // Stub: the label is decided by how closely the motif pixels match.
    const xai::FunctionClassifier stub(2, [&](const InputTensor& in) {
      double d = 0.0;
      std::size_t k = 0;
      for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) d += std::abs(in.values[i] - ref[k++]);
      const double p = std::exp(-4.0 * d / static_cast<double>(ref.size()));
      return std::vector<double>{p, 1.0 - p};
    });
    const auto probs = stub.probabilities(std::span<const InputTensor>(&x, 1))[0];
    stub_agree += probs[0] > probs[1];
    const auto h = xai::occlusion_map(stub, x, cfg.xai.window, cfg.xai.stride, cfg.xai.baseline, 0);

    std::vector<double> cells(grid * grid, 0.0);
    std::set<std::size_t> region;
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        const std::size_t k = (r / cell) * grid + c / cell;
        cells[k] += h.at(r, c);
        if (mask[r * side + c]) region.insert(k);
      }
    }
    const auto top = xai::top_k_indices(cells, 4);
    std::set<std::size_t> uni(region);
    std::size_t inter = 0;
    for (auto k : top) {
      inter += region.count(k);
      uni.insert(k);
    }
    iou_sum += static_cast<double>(inter) / static_cast<double>(uni.size());
    ++n;
  }
  const double iou = n ? iou_sum / static_cast<double>(n) : 0.0;
  verdict(8, n == 20 && stub_agree == n && iou >= 0.5,
          "family " + spec.name + ": mean IoU(top-4 cells, motif cells) " + fmt(iou) + " >= 0.5 over " +
              std::to_string(n) + " test samples (stub predicts the family on " + std::to_string(stub_agree) +
              "; " + std::to_string(skipped) + " without visible motif pixels skipped)");
}

// 10 ------------------------------------------------------------------------
int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MALVIS_CLI_PATH) + " " + args + " >'" + log.string() + "' 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void determinism(const fs::path& workdir) {
  const fs::path dir = workdir / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto specs = default_family_specs();
  for (auto& s : specs) s.count = std::max<std::size_t>(s.count / 10, 8);
  std::ofstream(dir / "families.json") << family_specs_to_json(specs);
  nlohmann::json cfg = {
      {"seed", 5},
      {"corpus", (dir / "families.json").string()},
      {"model", {{"input_side", 32}, {"filters", {8, 8}}, {"dense1", 64}, {"dense2", 32}, {"epochs", 2}}},
      {"xai", {{"coalitions", 64}, {"samples_per_class", 1}, {"grid", 4}, {"top_k", 64}}},
      {"progressive_fractions", {0.5, 1.0}}};
  std::ofstream(dir / "config.json") << cfg.dump(2);
  std::vector<std::string> reports, base, enhanced;
  bool ran = true;
  for (const char* tag : {"a", "b"}) {
    const fs::path out = dir / tag;
    const int rc = run_cli("experiment --config '" + (dir / "config.json").string() + "' --out '" + out.string() + "'",
                           dir / (std::string(tag) + ".log"));
    ran = ran && rc == 0;
    reports.push_back(slurp(out / "report.json"));
    base.push_back(slurp(out / "base.ckpt"));
    enhanced.push_back(slurp(out / "enhanced.ckpt"));
  }
  const bool same = ran && !reports[0].empty() && reports[0] == reports[1] && !base[0].empty() && base[0] == base[1] &&
                    enhanced[0] == enhanced[1];
  std::string digest;
  if (ran && !reports[0].empty()) {
    digest = nlohmann::json::parse(reports[0]).at("checkpoints").at("base").get<std::string>().substr(0, 16);
  }
  verdict(10, same,
          std::string("two CLI experiment runs (reduced config): report.json ") +
              (ran && reports[0] == reports[1] ? "identical" : "differs") + ", checkpoints " +
              (ran && base[0] == base[1] && enhanced[0] == enhanced[1] ? "identical" : "differ") +
              (digest.empty() ? "" : " (base " + digest + "...)"));
}

// 11 ------------------------------------------------------------------------
void round_trips() {
  Rng rng(1100);
  std::size_t container_ok = 0, packed = 0, pack_ok = 0, ckpt_ok = 0, refused_ok = 0;
  for (int i = 0; i < 500; ++i) {
    const Binary b = testutil::random_binary(rng, "rt" + std::to_string(i));
    const Bytes bytes = serialize(b);
    const Binary p = parse(bytes);
    container_ok += serialize(p) == bytes && p.sections == b.sections && p.overlay == b.overlay;
    const auto r = obfusc::pack(b);
    if (r.applied()) {
      ++packed;
      const Bytes pb = serialize(r.binary());
      const bool tail = std::equal(b.overlay.rbegin(), b.overlay.rend(), pb.rbegin());
      pack_ok += tail && serialize(obfusc::unpack(parse(pb))) == bytes;
    } else {
      refused_ok += r.reason() == obfusc::kIncompressible;
    }
  }
  nn::Hyperparams hp;
  hp.input_side = 8;
  hp.filters = {2, 3};
  hp.first_kernel = 3;
  hp.dense1 = 6;
  hp.dense2 = 4;
  const auto dir = testutil::temp_dir("acceptance_ckpt");
  for (std::uint64_t s = 0; s < 500; ++s) {
    nn::Model m(hp, {"a", "b", "c"}, s + 1);
    // perturb every tensor so BN statistics are not at their defaults
    Rng pr(s);
    for (auto& t : m.buffers()) t.tensor->array() += static_cast<float>(pr.uniform());
    const auto path = dir / "m.ckpt";
    nn::save_checkpoint(m, path);
    const auto back = nn::load_checkpoint(path);
    ckpt_ok += nn::checkpoint_bytes(back) == nn::checkpoint_bytes(m) && nn::model_digest(back) == nn::model_digest(m);
  }
  verdict(11, container_ok == 500 && pack_ok == packed && packed + refused_ok == 500 && packed > 0 && ckpt_ok == 500,
          "container " + std::to_string(container_ok) + "/500; pack/unpack " + std::to_string(pack_ok) + "/" +
              std::to_string(packed) + " packable (" + std::to_string(refused_ok) +
              " refused as incompressible); checkpoint " + std::to_string(ckpt_ok) + "/500");
}

}  // namespace

int main(int argc, char** argv) {
  fs::path workdir = fs::temp_directory_path() / "malvis-acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
    } else {
      std::cerr << "usage: malvis_acceptance [--workdir DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::create_directories(workdir);
  const auto want = [&](std::initializer_list<int> ids) {
    if (only.empty()) return true;
    return std::any_of(ids.begin(), ids.end(), [&](int id) { return only.count(id) > 0; });
  };
  try {
    if (want({1})) gradient_check();
    if (want({7})) shap_exactness();
    if (want({8})) occlusion_localization();
    if (want({11})) round_trips();
    if (want({10})) determinism(workdir);
    if (want({2, 3, 4, 5, 6, 9})) experiment_criteria(workdir);
  } catch (const std::exception& e) {
    std::cout << "aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criteria failed" : "acceptance: all passed")
            << std::endl;
  return failures ? 1 : 0;
}
