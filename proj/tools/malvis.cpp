#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "malvis/binviz.hpp"
#include "malvis/config.hpp"
#include "malvis/corpus.hpp"
#include "malvis/error.hpp"
#include "malvis/experiment.hpp"
#include "malvis/harness.hpp"
#include "malvis/nn.hpp"
#include "malvis/obfusc.hpp"
#include "malvis/rng.hpp"
#include "malvis/xai.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace malvis;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_json(const fs::path& path, const ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

Config config_or_default(const std::string& path) {
  Config c = path.empty() ? Config{} : load_config(path);
  apply_env_overrides(c);
  validate(c);
  return c;
}

void progress(const std::string& msg) { std::cerr << msg << '\n'; }

const obfusc::SubstitutionTable& table_from(const std::string& path,
                                            std::optional<obfusc::SubstitutionTable>& storage) {
  if (path.empty()) return obfusc::default_substitution_table();
  storage = obfusc::SubstitutionTable::from_json_file(path);
  return *storage;
}

std::vector<Binary> with_origin(const std::vector<Binary>& all, const std::string& origin) {
  if (origin == "any") return all;
  std::vector<Binary> out;
  for (const auto& b : all) {
    const bool keep = (origin == "base" && b.origin == Origin::base) ||
                      (origin == "packed" && b.origin == Origin::packed) ||
                      (origin == "morphed" && b.origin == Origin::morphed);
    if (keep) out.push_back(b);
  }
  return out;
}

// --- gen-corpus ---
struct GenArgs {
  std::string spec = "default";
  std::string out;
  std::uint64_t seed = 1;
};

void cmd_gen_corpus(const GenArgs& a) {
  const auto specs = a.spec == "default" ? default_family_specs() : load_family_specs(a.spec);
  const auto corpus = generate_corpus(specs, a.seed);
  save_corpus(corpus, a.out);
  write_json(fs::path(a.out) / "corpus.json", ordered_json{{"seed", a.seed},
                                                         {"samples", corpus.size()},
                                                         {"digest", corpus_digest(corpus)},
                                                         {"families", ordered_json::parse(family_specs_to_json(specs))}});
  std::cout << (fs::path(a.out) / kManifestName).string() << '\n';
}

// --- convert ---
struct ConvertArgs {
  std::string manifest;
  std::string out;
  std::size_t side = 0;
};

void cmd_convert(const ConvertArgs& a) {
  const auto corpus = load_corpus(a.manifest);
  for (const auto& b : corpus) {
    ByteImage img = binary_to_image(b);
    if (a.side) {
      const auto t = resize_to_input(img, a.side, false);
      img = ByteImage{a.side, a.side, std::vector<std::uint8_t>(t.values.begin(), t.values.end())};
    }
    write_pgm(fs::path(a.out) / (b.id + ".pgm"), img);
  }
  std::cout << corpus.size() << " images written to " << a.out << '\n';
}

// --- train ---
struct TrainArgs {
  std::string manifest;
  std::string config;
  std::string out;
};

void cmd_train(const TrainArgs& a) {
  const Config cfg = config_or_default(a.config);
  const auto corpus = load_corpus(a.manifest);
  const auto ctx = experiment::prepare(cfg, corpus, progress);
  const auto m = experiment::train_model(ctx, ctx.partition.train, "train");
  const fs::path out(a.out);
  nn::save_checkpoint(m.model, out / "model.ckpt");
  write_text(out / "history.csv", experiment::history_csv(m.history));
  write_json(out / "train.json", ordered_json{{"config", config_to_json(cfg)},
                                            {"corpus_digest", ctx.corpus_digest},
                                            {"checkpoint_digest", m.digest},
                                            {"history", experiment::history_to_json(m.history)},
                                            {"test_metrics", harness::metrics_to_json(
                                                                 harness::evaluate(m.model, ctx.test), ctx.classes)}});
  std::cout << (out / "model.ckpt").string() << '\n';
}

// --- eval ---
struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string origin = "any";
  std::string out;
};

void cmd_eval(const EvalArgs& a) {
  const auto model = nn::load_checkpoint(a.checkpoint);
  const auto samples = with_origin(load_corpus(a.manifest), a.origin);
  const auto data = harness::to_dataset(samples, model.classes(), model.hyperparams().input_side);
  const auto m = harness::evaluate(model, data);
  ordered_json j{{"checkpoint_digest", nn::model_digest(model)},
                 {"origin", a.origin},
                 {"samples", samples.size()},
                 {"metrics", harness::metrics_to_json(m, model.classes())}};
  if (a.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json(fs::path(a.out) / "metrics.json", j);
    std::cout << "accuracy " << m.accuracy << '\n';
  }
}

// --- obfuscate ---
struct ObfArgs {
  std::string manifest;
  std::string mode;
  std::string out;
  int passes = 3;
  std::uint64_t seed = 1;
  std::string table;
  std::string packer_cmd;
};

void cmd_obfuscate(const ObfArgs& a) {
  const auto all = load_corpus(a.manifest);
  const auto base = with_origin(all, "base");
  std::optional<obfusc::SubstitutionTable> storage;
  const auto& table = table_from(a.table, storage);
  std::vector<Binary> converted;
  ordered_json refused = ordered_json::object();
  for (const auto& b : base) {
    auto r = a.mode == "pack"
                 ? (a.packer_cmd.empty() ? obfusc::pack(b)
                                         : obfusc::pack_external(b, a.packer_cmd, fs::path(a.out) / "scratch"))
                 : obfusc::morph(b, table, a.passes, a.seed);
    if (r.applied()) {
      converted.push_back(std::move(r.binary()));
    } else {
      refused[b.id] = r.reason();
    }
  }
  const auto report = obfusc::conversion_report(base, converted);
  std::vector<Binary> out = base;
  out.insert(out.end(), converted.begin(), converted.end());
  save_corpus(out, a.out);
  write_json(fs::path(a.out) / "conversion.json",
             ordered_json{{"mode", a.mode},
                          {"passes", a.passes},
                          {"seed", a.seed},
                          {"report", experiment::conversion_report_to_json(report)},
                          {"not_applicable", refused}});
  std::cout << report.overall.converted << "/" << report.overall.total << " converted ("
            << report.overall.percentage << "%)\n";
}

// --- augment ---
struct AugmentArgs {
  std::string manifest;
  std::string out;
  double pack_fraction = 1.0;
  double morph_fraction = 0.5;
  int passes = 3;
  std::uint64_t seed = 1;
  std::string table;
};

void cmd_augment(const AugmentArgs& a) {
  const auto base = with_origin(load_corpus(a.manifest), "base");
  std::optional<obfusc::SubstitutionTable> storage;
  const auto set = obfusc::build_enhanced_training_set(base, a.pack_fraction, a.morph_fraction, a.seed, a.passes,
                                                       table_from(a.table, storage));
  save_corpus(set.samples, a.out);
  const auto& s = set.stats;
  write_json(fs::path(a.out) / "augment.json",
             ordered_json{{"pack_fraction", a.pack_fraction},
                          {"morph_fraction", a.morph_fraction},
                          {"passes", a.passes},
                          {"seed", a.seed},
                          {"samples", set.samples.size()},
                          {"stats",
                           {{"pack_selected", s.pack_selected},
                            {"pack_appended", s.pack_appended},
                            {"pack_skipped", s.pack_skipped},
                            {"morph_selected", s.morph_selected},
                            {"morph_appended", s.morph_appended},
                            {"morph_skipped", s.morph_skipped}}}});
  std::cout << set.samples.size() << " samples\n";
}

// --- explain ---
struct ExplainArgs {
  std::string checkpoint;
  std::string manifest;
  std::string sample;
  std::string cls;
  std::string method = "all";
  std::string out;
  std::string config;
  std::size_t samples = 0;
  bool exact = false;
};

void cmd_explain(const ExplainArgs& a) {
  if (a.sample.empty() == a.cls.empty()) throw validation_error("InvalidArgument", "give exactly one of --sample or --class");
  const Config cfg = config_or_default(a.config);
  const auto& x = cfg.xai;
  const auto model = nn::load_checkpoint(a.checkpoint);
  const auto& classes = model.classes();
  const std::size_t side = model.hyperparams().input_side;
  const auto corpus = load_corpus(a.manifest);

  std::vector<const Binary*> chosen;
  if (!a.sample.empty()) {
    for (const auto& b : corpus)
      if (b.id == a.sample) chosen.push_back(&b);
    if (chosen.empty()) throw validation_error("UnknownSample", a.sample);
  } else {
    const std::size_t limit = a.samples ? a.samples : x.samples_per_class;
    for (const auto& b : corpus)
      if (b.family == a.cls && b.origin == Origin::base && chosen.size() < limit) chosen.push_back(&b);
    if (chosen.empty()) throw validation_error("UnknownClass", a.cls);
  }
  const auto it = std::find(classes.begin(), classes.end(), chosen.front()->family);
  if (it == classes.end()) throw validation_error("UnknownClass", chosen.front()->family);
  const auto target = static_cast<std::size_t>(it - classes.begin());

  std::vector<xai::Method> methods;
  if (a.method == "all") {
    methods = {xai::Method::occlusion, xai::Method::hirescam, xai::Method::shap};
  } else {
    methods = {xai::method_from_string(a.method)};
  }
  const xai::ModelClassifier clf(model);
  const auto seg = xai::Segmentation::regular(side, x.grid);
  const std::optional<std::size_t> coalitions = a.exact ? std::nullopt : std::optional<std::size_t>(x.coalitions);

  std::vector<xai::Heatmap> finals;
  for (auto m : methods) {
    std::vector<xai::Heatmap> maps;
    for (const Binary* b : chosen) {
      const auto in = resize_to_input(binary_to_image(*b), side);
      switch (m) {
        case xai::Method::occlusion: maps.push_back(xai::occlusion_map(clf, in, x.window, x.stride, x.baseline, target)); break;
        case xai::Method::hirescam: maps.push_back(xai::hirescam(model, in, target)); break;
        case xai::Method::shap:
          maps.push_back(xai::kernel_shap(clf, in, seg, x.baseline, coalitions, derive_seed(cfg.seed, b->id), target));
          break;
      }
      progress(std::string(xai::to_string(m)) + " " + b->id);
    }
    auto h = xai::cumulative_heatmap(maps);
    const fs::path base = fs::path(a.out) / std::string(xai::to_string(m));
    xai::export_heatmap(fs::path(base.string() + ".pgm"), h, classes[target]);
    if (m == xai::Method::shap) xai::export_grid_overlay(fs::path(base.string() + "_grid.pgm"), h, x.grid);
    finals.push_back(std::move(h));
  }
  if (finals.size() > 1) {
    auto arr = ordered_json::array();
    for (std::size_t i = 0; i < finals.size(); ++i) {
      for (std::size_t j = i + 1; j < finals.size(); ++j) {
        const auto s = xai::agreement(finals[i], finals[j], x.top_k);
        arr.push_back({{"first", std::string(xai::to_string(s.first))},
                       {"second", std::string(xai::to_string(s.second))},
                       {"k", s.k},
                       {"iou_topk", s.iou_topk},
                       {"rank_corr", s.rank_corr}});
      }
    }
    ordered_json ids = ordered_json::array();
    for (const Binary* b : chosen) ids.push_back(b->id);
    write_json(fs::path(a.out) / "agreement.json",
               ordered_json{{"class", classes[target]}, {"samples", ids}, {"xai", config_to_json(cfg)["xai"]}, {"pairs", arr}});
  }
  std::cout << finals.size() << " heatmaps written to " << a.out << '\n';
}

// --- experiment ---
struct ExperimentArgs {
  std::string config;
  std::string out;
};

void cmd_experiment(const ExperimentArgs& a) {
  const Config cfg = config_or_default(a.config);
  const auto corpus = experiment::corpus_for(cfg);
  auto result = experiment::run(cfg, corpus, progress);
  const fs::path out(a.out);
  write_json(out / "report.json", experiment::report_to_json(result.report));
  write_text(out / "report.csv", experiment::report_csv(result.report));
  nn::save_checkpoint(result.base.model, out / "base.ckpt");
  nn::save_checkpoint(result.enhanced.model, out / "enhanced.ckpt");
  write_text(out / "history_base.csv", experiment::history_csv(result.base.history));
  write_text(out / "history_enhanced.csv", experiment::history_csv(result.enhanced.history));
  for (const auto& c : result.report.grid) {
    std::cout << c.train_variant << "/" << c.test_variant << ": ";
    if (c.skipped) {
      std::cout << "skipped (" << c.skip_reason << ")\n";
    } else {
      std::cout << "acc " << c.metrics.accuracy << " P " << c.metrics.macro_precision << " F1 " << c.metrics.macro_f1
                << " (" << c.applicable << "/" << c.total << ")\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"malvis: image-based malware classification, obfuscation and explanation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-corpus", "Generate a synthetic labeled corpus");
  g->add_option("--spec", gen.spec, "Family spec JSON or 'default'");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Corpus seed");

  ConvertArgs conv;
  auto* c = app.add_subcommand("convert", "Render samples as PGM byte images");
  c->add_option("--manifest", conv.manifest)->required()->check(CLI::ExistingFile);
  c->add_option("--out", conv.out)->required();
  c->add_option("--side", conv.side, "Resize to side x side (0 keeps the byte image)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a classifier on a manifest");
  t->add_option("--manifest", tr.manifest)->required()->check(CLI::ExistingFile);
  t->add_option("--config", tr.config)->check(CLI::ExistingFile);
  t->add_option("--out", tr.out)->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  e->add_option("--manifest", ev.manifest)->required()->check(CLI::ExistingFile);
  e->add_option("--origin", ev.origin)->check(CLI::IsMember({"any", "base", "packed", "morphed"}));
  e->add_option("--out", ev.out, "Directory for metrics.json (stdout when absent)");

  ObfArgs ob;
  auto* o = app.add_subcommand("obfuscate", "Pack or morph every base sample");
  o->add_option("--manifest", ob.manifest)->required()->check(CLI::ExistingFile);
  o->add_option("--mode", ob.mode)->required()->check(CLI::IsMember({"pack", "morph"}));
  o->add_option("--out", ob.out)->required();
  o->add_option("--passes", ob.passes)->check(CLI::PositiveNumber);
  o->add_option("--seed", ob.seed);
  o->add_option("--table", ob.table, "Substitution table JSON")->check(CLI::ExistingFile);
  o->add_option("--packer-cmd", ob.packer_cmd, "External packer, invoked as '<cmd> in out'");

  AugmentArgs au;
  auto* u = app.add_subcommand("augment", "Build an enhanced training manifest");
  u->add_option("--manifest", au.manifest)->required()->check(CLI::ExistingFile);
  u->add_option("--out", au.out)->required();
  u->add_option("--pack-fraction", au.pack_fraction)->check(CLI::Range(0.0, 1.0));
  u->add_option("--morph-fraction", au.morph_fraction)->check(CLI::Range(0.0, 1.0));
  u->add_option("--passes", au.passes)->check(CLI::PositiveNumber);
  u->add_option("--seed", au.seed);
  u->add_option("--table", au.table)->check(CLI::ExistingFile);

  ExplainArgs ex;
  auto* x = app.add_subcommand("explain", "Heatmaps for a sample or a class");
  x->add_option("--checkpoint", ex.checkpoint)->required()->check(CLI::ExistingFile);
  x->add_option("--manifest", ex.manifest)->required()->check(CLI::ExistingFile);
  x->add_option("--sample", ex.sample);
  x->add_option("--class", ex.cls);
  x->add_option("--method", ex.method)->check(CLI::IsMember({"all", "occlusion", "hirescam", "shap"}));
  x->add_option("--out", ex.out)->required();
  x->add_option("--config", ex.config, "Config file for XAI parameters")->check(CLI::ExistingFile);
  x->add_option("--samples", ex.samples, "Samples averaged for --class");
  x->add_flag("--exact", ex.exact, "Enumerate every SHAP coalition");

  ExperimentArgs xp;
  auto* p = app.add_subcommand("experiment", "Run the full experiment pipeline");
  p->add_option("--config", xp.config)->check(CLI::ExistingFile);
  p->add_option("--out", xp.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*g) cmd_gen_corpus(gen);
    if (*c) cmd_convert(conv);
    if (*t) cmd_train(tr);
    if (*e) cmd_eval(ev);
    if (*o) cmd_obfuscate(ob);
    if (*u) cmd_augment(au);
    if (*x) cmd_explain(ex);
    if (*p) cmd_experiment(xp);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return err.error_class() == ErrorClass::validation ? 1 : 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
  return 0;
}
