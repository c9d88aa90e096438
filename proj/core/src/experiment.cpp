#include "malvis/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>

#include "malvis/corpus.hpp"
#include "malvis/error.hpp"
#include "malvis/rng.hpp"

namespace malvis::experiment {

using nlohmann::ordered_json;

Seeds Seeds::from(const Config& c) {
  Seeds s;
  s.split = c.split.seed ? c.split.seed : derive_seed(c.seed, "split");
  s.model = derive_seed(c.seed, "model");
  s.train = derive_seed(c.seed, "train");
  s.morph = derive_seed(c.seed, "morph");
  s.enhance = derive_seed(c.seed, "enhance");
  s.subset = derive_seed(c.seed, "subset");
  s.xai = derive_seed(c.seed, "xai");
  return s;
}

namespace {

void say(const Context& ctx, const std::string& msg) {
  if (ctx.log) ctx.log(msg);
}

const obfusc::SubstitutionTable& table_for(const Config& c) {
  static std::map<std::string, obfusc::SubstitutionTable> cache;
  if (c.obfuscation.substitution_table.empty()) return obfusc::default_substitution_table();
  auto it = cache.find(c.obfuscation.substitution_table);
  if (it == cache.end()) {
    it = cache.emplace(c.obfuscation.substitution_table,
                       obfusc::SubstitutionTable::from_json_file(c.obfuscation.substitution_table))
             .first;
  }
  return it->second;
}

}  // namespace

Context prepare(const Config& config, const std::vector<Binary>& corpus, Log log) {
  validate(config);
  Context ctx;
  ctx.config = config;
  ctx.seeds = Seeds::from(config);
  ctx.log = std::move(log);
  ctx.classes = harness::family_names(corpus);
  ctx.corpus_digest = corpus_digest(corpus);
  SplitSpec spec = config.split;
  spec.seed = ctx.seeds.split;
  ctx.partition = harness::split(corpus, spec);
  const std::size_t side = config.model.input_side;
  ctx.val = harness::to_dataset(ctx.partition.val, ctx.classes, side);
  ctx.test = harness::to_dataset(ctx.partition.test, ctx.classes, side);
  say(ctx, "split: train " + std::to_string(ctx.partition.train.size()) + ", val " +
               std::to_string(ctx.partition.val.size()) + ", test " + std::to_string(ctx.partition.test.size()));
  return ctx;
}

TrainedModel train_model(const Context& ctx, const std::vector<Binary>& train_samples, const std::string& tag) {
  const auto data = harness::to_dataset(train_samples, ctx.classes, ctx.config.model.input_side);
  nn::Model model(ctx.config.model, ctx.classes, ctx.seeds.model);
  auto history = nn::train(model, data, ctx.val, ctx.config.model.epochs, ctx.seeds.train,
                           [&](const nn::EpochRecord& r) {
                             std::ostringstream os;
                             os << tag << " epoch " << r.epoch << " loss " << r.train_loss << " val_acc "
                                << r.val_accuracy;
                             say(ctx, os.str());
                           });
  std::string digest = nn::model_digest(model);
  return TrainedModel{std::move(model), std::move(history), std::move(digest)};
}

TestVariant packed_variant(const Context& ctx, const std::vector<Binary>& base) {
  TestVariant v;
  const auto& cmd = ctx.config.obfuscation.packer_cmd;
  const auto scratch = std::filesystem::temp_directory_path() / "malvis-pack";
  for (const auto& b : base) {
    auto r = cmd.empty() ? obfusc::pack(b) : obfusc::pack_external(b, cmd, scratch);
    if (r.applied()) v.samples.push_back(std::move(r.binary()));
  }
  v.conversion = obfusc::conversion_report(base, v.samples);
  return v;
}

TestVariant morphed_variant(const Context& ctx, const std::vector<Binary>& base, int passes) {
  TestVariant v;
  const auto& table = table_for(ctx.config);
  for (const auto& b : base) {
    auto r = obfusc::morph(b, table, passes, ctx.seeds.morph);
    if (r.applied()) v.samples.push_back(std::move(r.binary()));
  }
  v.conversion = obfusc::conversion_report(base, v.samples);
  return v;
}

Cell evaluate_cell(const Context& ctx, const nn::Model& model, const std::string& train_variant,
                   const std::string& test_variant, const std::vector<Binary>& samples) {
  Cell c;
  c.train_variant = train_variant;
  c.test_variant = test_variant;
  c.total = ctx.partition.test.size();
  c.applicable = samples.size();
  if (samples.empty()) {
    c.skipped = true;
    c.skip_reason = "no applicable samples";
    return c;
  }
  c.metrics = harness::evaluate(model, harness::to_dataset(samples, ctx.classes, ctx.config.model.input_side));
  return c;
}

DegradationResult degradation_experiment(const Context& ctx) {
  const auto& test = ctx.partition.test;
  DegradationResult r{train_model(ctx, ctx.partition.train, "base"), {}, packed_variant(ctx, test),
                      morphed_variant(ctx, test, ctx.config.obfuscation.morph_passes)};
  r.cells.push_back(evaluate_cell(ctx, r.model.model, "base", "base", test));
  r.cells.push_back(evaluate_cell(ctx, r.model.model, "base", "morphed", r.morphed.samples));
  r.cells.push_back(evaluate_cell(ctx, r.model.model, "base", "packed", r.packed.samples));
  return r;
}

EnhancementResult enhancement_experiment(const Context& ctx, const TestVariant& packed, const TestVariant& morphed) {
  const auto& o = ctx.config.obfuscation;
  auto enhanced = obfusc::build_enhanced_training_set(ctx.partition.train, o.pack_fraction, o.morph_fraction,
                                                      ctx.seeds.enhance, o.morph_passes, table_for(ctx.config));
  say(ctx, "enhanced training set: " + std::to_string(enhanced.samples.size()) + " samples");
  EnhancementResult r{train_model(ctx, enhanced.samples, "enhanced"), {}, enhanced.stats, enhanced.samples.size()};
  r.cells.push_back(evaluate_cell(ctx, r.model.model, "enhanced", "base", ctx.partition.test));
  r.cells.push_back(evaluate_cell(ctx, r.model.model, "enhanced", "morphed", morphed.samples));
  r.cells.push_back(evaluate_cell(ctx, r.model.model, "enhanced", "packed", packed.samples));
  return r;
}

std::vector<ProgressivePoint> progressive_training(const Context& ctx, const std::vector<double>& fractions,
                                                   const harness::Metrics* full) {
  std::vector<int> labels;
  for (const auto& b : ctx.partition.train) {
    labels.push_back(static_cast<int>(std::find(ctx.classes.begin(), ctx.classes.end(), b.family) -
                                      ctx.classes.begin()));
  }
  std::vector<ProgressivePoint> out;
  for (double f : fractions) {
    const auto idx = harness::nested_subset(labels, f, ctx.seeds.subset);
    ProgressivePoint p{f, idx.size(), {}};
    if (full && idx.size() == ctx.partition.train.size()) {
      p.metrics = *full;
    } else {
      std::vector<Binary> subset;
      subset.reserve(idx.size());
      for (auto i : idx) subset.push_back(ctx.partition.train[i]);
      std::ostringstream tag;
      tag << "progressive " << f;
      const auto m = train_model(ctx, subset, tag.str());
      p.metrics = harness::evaluate(m.model, ctx.test);
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PassPoint> morph_pass_sensitivity(const Context& ctx, const nn::Model& model,
                                              const std::vector<int>& passes) {
  std::vector<PassPoint> out;
  for (int p : passes) {
    const auto v = morphed_variant(ctx, ctx.partition.test, p);
    const Cell c = evaluate_cell(ctx, model, "base", "morphed", v.samples);
    out.push_back(PassPoint{p, c.applicable, c.total, c.metrics});
  }
  return out;
}

OverlayShift overlay_shift(const Context& ctx, const nn::Model& model, const std::string& model_name,
                           const std::vector<Binary>& packed) {
  std::map<std::string, const Binary*> by_id;
  for (const auto& b : ctx.partition.test) by_id[b.id] = &b;
  const std::size_t side = ctx.config.model.input_side;
  const std::size_t quarter = side / 4;
  OverlayShift s;
  s.model = model_name;
  for (const auto& p : packed) {
    if (!p.parent_id) continue;
    const auto it = by_id.find(*p.parent_id);
    if (it == by_id.end()) continue;
    const auto cls = static_cast<std::size_t>(
        std::find(ctx.classes.begin(), ctx.classes.end(), p.family) - ctx.classes.begin());
    const auto hb = xai::hirescam(model, resize_to_input(binary_to_image(*it->second), side), cls);
    const auto hp = xai::hirescam(model, resize_to_input(binary_to_image(p), side), cls);
    s.base_top += xai::positive_mass_fraction(hb, 0, quarter);
    s.base_bottom += xai::positive_mass_fraction(hb, side - quarter, side);
    s.packed_top += xai::positive_mass_fraction(hp, 0, quarter);
    s.packed_bottom += xai::positive_mass_fraction(hp, side - quarter, side);
    ++s.samples;
  }
  if (s.samples) {
    const auto n = static_cast<double>(s.samples);
    s.base_top /= n;
    s.base_bottom /= n;
    s.packed_top /= n;
    s.packed_bottom /= n;
  }
  return s;
}

std::vector<AgreementSummary> explainer_agreement(const Context& ctx, const nn::Model& model) {
  const auto& x = ctx.config.xai;
  const xai::ModelClassifier clf(model);
  const auto seg = xai::Segmentation::regular(ctx.config.model.input_side, x.grid);
  std::vector<AgreementSummary> pairs{{xai::Method::occlusion, xai::Method::hirescam},
                                      {xai::Method::occlusion, xai::Method::shap},
                                      {xai::Method::hirescam, xai::Method::shap}};
  std::vector<std::size_t> taken(ctx.classes.size(), 0);
  for (std::size_t i = 0; i < ctx.test.size(); ++i) {
    const auto cls = static_cast<std::size_t>(ctx.test.labels[i]);
    if (taken[cls] >= x.samples_per_class) continue;
    ++taken[cls];
    const auto& in = ctx.test.inputs[i];
    const auto occ = xai::occlusion_map(clf, in, x.window, x.stride, x.baseline, cls);
    const auto cam = xai::hirescam(model, in, cls);
    const auto shap = xai::kernel_shap(clf, in, seg, x.baseline, x.coalitions, derive_seed(ctx.seeds.xai, ctx.partition.test[i].id), cls);
    const xai::Heatmap* maps[] = {&occ, &cam, &shap};
    const std::pair<int, int> idx[] = {{0, 1}, {0, 2}, {1, 2}};
    for (std::size_t k = 0; k < 3; ++k) {
      const auto a = xai::agreement(*maps[idx[k].first], *maps[idx[k].second], x.top_k);
      pairs[k].mean_iou_topk += a.iou_topk;
      pairs[k].mean_rank_corr += a.rank_corr;
      pairs[k].samples += 1;
    }
    say(ctx, "explained " + ctx.partition.test[i].id);
  }
  for (auto& p : pairs) {
    if (p.samples) {
      p.mean_iou_topk /= static_cast<double>(p.samples);
      p.mean_rank_corr /= static_cast<double>(p.samples);
    }
  }
  return pairs;
}

const Cell& Report::cell(const std::string& train_variant, const std::string& test_variant) const {
  for (const auto& c : grid)
    if (c.train_variant == train_variant && c.test_variant == test_variant) return c;
  throw validation_error("MissingCell", train_variant + "/" + test_variant);
}

RunResult run(const Config& config, const std::vector<Binary>& corpus, Log log) {
  const Context ctx = prepare(config, corpus, std::move(log));
  Report r;
  r.config = config_to_json(config);
  r.seeds = ctx.seeds;
  r.corpus_digest = ctx.corpus_digest;
  r.classes = ctx.classes;
  r.train_size = ctx.partition.train.size();
  r.val_size = ctx.partition.val.size();
  r.test_size = ctx.partition.test.size();

  auto deg = degradation_experiment(ctx);
  r.pack_conversion = deg.packed.conversion;
  r.morph_conversion = deg.morphed.conversion;
  r.grid = deg.cells;
  r.base_history = deg.model.history;
  r.base_checkpoint_digest = deg.model.digest;

  auto enh = enhancement_experiment(ctx, deg.packed, deg.morphed);
  r.grid.insert(r.grid.end(), enh.cells.begin(), enh.cells.end());
  r.enhance_stats = enh.stats;
  r.enhanced_train_size = enh.train_size;
  r.enhanced_history = enh.model.history;
  r.enhanced_checkpoint_digest = enh.model.digest;

  r.progressive = progressive_training(ctx, config.progressive_fractions, &r.cell("base", "base").metrics);
  r.morph_passes = morph_pass_sensitivity(ctx, deg.model.model, config.obfuscation.sensitivity_passes);

  if (config.run_xai) {
    r.overlay_shift.push_back(overlay_shift(ctx, deg.model.model, "base", deg.packed.samples));
    r.overlay_shift.push_back(overlay_shift(ctx, enh.model.model, "enhanced", deg.packed.samples));
    r.agreement = explainer_agreement(ctx, deg.model.model);
  }
  return RunResult{std::move(r), std::move(deg.model), std::move(enh.model)};
}

std::vector<Binary> corpus_for(const Config& config) {
  const auto specs = config.corpus == "default" ? default_family_specs() : load_family_specs(config.corpus);
  return generate_corpus(specs, derive_seed(config.seed, "corpus"));
}

namespace {

ordered_json cell_to_json(const Cell& c, const std::vector<std::string>& classes) {
  ordered_json j;
  j["train"] = c.train_variant;
  j["test"] = c.test_variant;
  j["applicable"] = c.applicable;
  j["total"] = c.total;
  if (c.skipped) {
    j["skipped"] = true;
    j["reason"] = c.skip_reason;
  } else {
    j["metrics"] = harness::metrics_to_json(c.metrics, classes);
  }
  return j;
}

ordered_json stats_to_json(const obfusc::EnhanceStats& s) {
  return ordered_json{{"pack_selected", s.pack_selected},   {"pack_appended", s.pack_appended},
                      {"pack_skipped", s.pack_skipped},     {"morph_selected", s.morph_selected},
                      {"morph_appended", s.morph_appended}, {"morph_skipped", s.morph_skipped}};
}

}  // namespace

ordered_json conversion_report_to_json(const obfusc::ConversionReport& r) {
  ordered_json j;
  auto per = ordered_json::object();
  for (const auto& [fam, c] : r.per_family) {
    per[fam] = {{"total", c.total}, {"converted", c.converted}, {"percentage", c.percentage}};
  }
  j["per_family"] = per;
  j["overall"] = {{"total", r.overall.total}, {"converted", r.overall.converted}, {"percentage", r.overall.percentage}};
  j["empty_classes"] = r.empty_classes;
  return j;
}

ordered_json history_to_json(const nn::TrainHistory& h) {
  ordered_json j;
  auto epochs = ordered_json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_accuracy", e.val_accuracy}});
  }
  j["epochs"] = epochs;
  j["best_epoch"] = h.best_epoch;
  j["early_stopped"] = h.early_stopped;
  return j;
}

std::string history_csv(const nn::TrainHistory& h) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_accuracy\n";
  for (const auto& e : h.epochs) os << e.epoch << ',' << e.train_loss << ',' << e.val_accuracy << '\n';
  return os.str();
}

ordered_json report_to_json(const Report& r) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["config"] = r.config;
  j["seeds"] = {{"split", r.seeds.split},     {"model", r.seeds.model},     {"train", r.seeds.train},
                {"morph", r.seeds.morph},     {"enhance", r.seeds.enhance}, {"subset", r.seeds.subset},
                {"xai", r.seeds.xai}};
  j["corpus_digest"] = r.corpus_digest;
  j["classes"] = r.classes;
  j["partition"] = {{"train", r.train_size}, {"val", r.val_size}, {"test", r.test_size}};
  j["conversion"] = {{"packed", conversion_report_to_json(r.pack_conversion)},
                     {"morphed", conversion_report_to_json(r.morph_conversion)}};
  j["enhancement"] = {{"train_size", r.enhanced_train_size}, {"stats", stats_to_json(r.enhance_stats)}};
  auto grid = ordered_json::array();
  for (const auto& c : r.grid) grid.push_back(cell_to_json(c, r.classes));
  j["grid"] = grid;
  auto prog = ordered_json::array();
  for (const auto& p : r.progressive) {
    prog.push_back({{"fraction", p.fraction},
                    {"train_size", p.train_size},
                    {"metrics", harness::metrics_to_json(p.metrics, r.classes)}});
  }
  j["progressive"] = prog;
  auto passes = ordered_json::array();
  for (const auto& p : r.morph_passes) {
    passes.push_back({{"passes", p.passes},
                      {"applicable", p.applicable},
                      {"total", p.total},
                      {"metrics", harness::metrics_to_json(p.metrics, r.classes)}});
  }
  j["morph_passes"] = passes;
  j["training"] = {{"base", history_to_json(r.base_history)}, {"enhanced", history_to_json(r.enhanced_history)}};
  j["checkpoints"] = {{"base", r.base_checkpoint_digest}, {"enhanced", r.enhanced_checkpoint_digest}};
  auto shift = ordered_json::array();
  for (const auto& s : r.overlay_shift) {
    shift.push_back({{"model", s.model},
                     {"samples", s.samples},
                     {"base_top", s.base_top},
                     {"base_bottom", s.base_bottom},
                     {"packed_top", s.packed_top},
                     {"packed_bottom", s.packed_bottom}});
  }
  j["overlay_shift"] = shift;
  auto agree = ordered_json::array();
  for (const auto& a : r.agreement) {
    agree.push_back({{"first", std::string(xai::to_string(a.first))},
                     {"second", std::string(xai::to_string(a.second))},
                     {"samples", a.samples},
                     {"mean_iou_topk", a.mean_iou_topk},
                     {"mean_rank_corr", a.mean_rank_corr}});
  }
  j["xai_agreement"] = agree;
  return j;
}

std::string report_csv(const Report& r) {
  std::ostringstream os;
  os.precision(17);
  os << "train,test,applicable,total,skipped,accuracy,macro_precision,macro_f1\n";
  for (const auto& c : r.grid) {
    os << c.train_variant << ',' << c.test_variant << ',' << c.applicable << ',' << c.total << ','
       << (c.skipped ? 1 : 0) << ',';
    if (c.skipped) {
      os << ",,\n";
    } else {
      os << c.metrics.accuracy << ',' << c.metrics.macro_precision << ',' << c.metrics.macro_f1 << '\n';
    }
  }
  return os.str();
}

}  // namespace malvis::experiment
