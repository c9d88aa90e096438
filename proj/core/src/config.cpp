#include "malvis/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "malvis/error.hpp"

namespace malvis {
namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw validation_error("InvalidConfig", where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw validation_error("InvalidConfig", "unknown key '" + where + key + "'");
  }
}

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("InvalidConfig", "key '" + where + key + "': " + e.what());
  }
}

}  // namespace

nlohmann::ordered_json hyperparams_to_json(const nn::Hyperparams& hp) {
  nlohmann::ordered_json j;
  j["input_side"] = hp.input_side;
  j["filters"] = hp.filters;
  j["first_kernel"] = hp.first_kernel;
  j["kernel"] = hp.kernel;
  j["pool"] = hp.pool;
  j["lambda_norm"] = hp.lambda_norm;
  j["dense1"] = hp.dense1;
  j["dense2"] = hp.dense2;
  j["dropout_conv"] = hp.dropout_conv;
  j["dropout_dense"] = hp.dropout_dense;
  j["learning_rate"] = hp.learning_rate;
  j["momentum"] = hp.momentum;
  j["batch_size"] = hp.batch_size;
  j["epochs"] = hp.epochs;
  j["patience"] = hp.patience;
  j["restore_best"] = hp.restore_best;
  j["bn_momentum"] = hp.bn_momentum;
  j["bn_eps"] = hp.bn_eps;
  return j;
}

nn::Hyperparams hyperparams_from_json(const nlohmann::json& j) {
  const std::string w = "model.";
  reject_unknown(j,
                 {"input_side", "filters", "first_kernel", "kernel", "pool", "lambda_norm", "dense1", "dense2",
                  "dropout_conv", "dropout_dense", "learning_rate", "momentum", "batch_size", "epochs",
                  "patience", "restore_best", "bn_momentum", "bn_eps"},
                 w);
  nn::Hyperparams hp;
  read(j, "input_side", hp.input_side, w);
  read(j, "filters", hp.filters, w);
  read(j, "first_kernel", hp.first_kernel, w);
  read(j, "kernel", hp.kernel, w);
  read(j, "pool", hp.pool, w);
  read(j, "lambda_norm", hp.lambda_norm, w);
  read(j, "dense1", hp.dense1, w);
  read(j, "dense2", hp.dense2, w);
  read(j, "dropout_conv", hp.dropout_conv, w);
  read(j, "dropout_dense", hp.dropout_dense, w);
  read(j, "learning_rate", hp.learning_rate, w);
  read(j, "momentum", hp.momentum, w);
  read(j, "batch_size", hp.batch_size, w);
  read(j, "epochs", hp.epochs, w);
  read(j, "patience", hp.patience, w);
  read(j, "restore_best", hp.restore_best, w);
  read(j, "bn_momentum", hp.bn_momentum, w);
  read(j, "bn_eps", hp.bn_eps, w);
  hp.validate();
  return hp;
}

Config config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"seed", "corpus", "model", "split", "obfuscation", "xai", "progressive_fractions", "run_xai"}, "");
  Config c;
  read(j, "seed", c.seed, "");
  read(j, "corpus", c.corpus, "");
  read(j, "progressive_fractions", c.progressive_fractions, "");
  read(j, "run_xai", c.run_xai, "");
  if (j.contains("model")) c.model = hyperparams_from_json(j.at("model"));
  if (j.contains("split")) {
    const auto& s = j.at("split");
    reject_unknown(s, {"test_fraction", "val_fraction", "stratified", "seed"}, "split.");
    read(s, "test_fraction", c.split.test_fraction, "split.");
    read(s, "val_fraction", c.split.val_fraction, "split.");
    read(s, "stratified", c.split.stratified, "split.");
    read(s, "seed", c.split.seed, "split.");
  }
  if (j.contains("obfuscation")) {
    const auto& o = j.at("obfuscation");
    reject_unknown(o, {"pack_fraction", "morph_fraction", "morph_passes", "sensitivity_passes", "packer_cmd",
                       "substitution_table"},
                   "obfuscation.");
    read(o, "pack_fraction", c.obfuscation.pack_fraction, "obfuscation.");
    read(o, "morph_fraction", c.obfuscation.morph_fraction, "obfuscation.");
    read(o, "morph_passes", c.obfuscation.morph_passes, "obfuscation.");
    read(o, "sensitivity_passes", c.obfuscation.sensitivity_passes, "obfuscation.");
    read(o, "packer_cmd", c.obfuscation.packer_cmd, "obfuscation.");
    read(o, "substitution_table", c.obfuscation.substitution_table, "obfuscation.");
  }
  if (j.contains("xai")) {
    const auto& x = j.at("xai");
    reject_unknown(x, {"window", "stride", "baseline", "grid", "coalitions", "samples_per_class", "top_k"}, "xai.");
    read(x, "window", c.xai.window, "xai.");
    read(x, "stride", c.xai.stride, "xai.");
    read(x, "baseline", c.xai.baseline, "xai.");
    read(x, "grid", c.xai.grid, "xai.");
    read(x, "coalitions", c.xai.coalitions, "xai.");
    read(x, "samples_per_class", c.xai.samples_per_class, "xai.");
    read(x, "top_k", c.xai.top_k, "xai.");
  }
  validate(c);
  return c;
}

nlohmann::ordered_json config_to_json(const Config& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["corpus"] = c.corpus;
  j["model"] = hyperparams_to_json(c.model);
  j["split"] = {{"test_fraction", c.split.test_fraction},
                {"val_fraction", c.split.val_fraction},
                {"stratified", c.split.stratified},
                {"seed", c.split.seed}};
  j["obfuscation"] = {{"pack_fraction", c.obfuscation.pack_fraction},
                      {"morph_fraction", c.obfuscation.morph_fraction},
                      {"morph_passes", c.obfuscation.morph_passes},
                      {"sensitivity_passes", c.obfuscation.sensitivity_passes},
                      {"packer_cmd", c.obfuscation.packer_cmd},
                      {"substitution_table", c.obfuscation.substitution_table}};
  j["xai"] = {{"window", c.xai.window},         {"stride", c.xai.stride},
              {"baseline", c.xai.baseline},     {"grid", c.xai.grid},
              {"coalitions", c.xai.coalitions}, {"samples_per_class", c.xai.samples_per_class},
              {"top_k", c.xai.top_k}};
  j["progressive_fractions"] = c.progressive_fractions;
  j["run_xai"] = c.run_xai;
  return j;
}

void validate(const Config& c) {
  auto bad = [](const std::string& why) { throw validation_error("InvalidConfig", why); };
  c.model.validate();
  if (!(c.split.test_fraction > 0 && c.split.test_fraction < 1)) bad("split.test_fraction must lie in (0, 1)");
  if (!(c.split.val_fraction > 0 && c.split.val_fraction < 1)) bad("split.val_fraction must lie in (0, 1)");
  const auto& o = c.obfuscation;
  if (o.pack_fraction < 0 || o.pack_fraction > 1 || o.morph_fraction < 0 || o.morph_fraction > 1) {
    bad("obfuscation fractions must lie in [0, 1]");
  }
  if (o.morph_passes < 1) bad("obfuscation.morph_passes must be >= 1");
  for (int p : o.sensitivity_passes) {
    if (p < 1) bad("obfuscation.sensitivity_passes entries must be >= 1");
  }
  if (c.xai.window == 0 || c.xai.window > c.model.input_side) bad("xai.window must lie in [1, input_side]");
  if (c.xai.stride == 0) bad("xai.stride must be positive");
  if (c.xai.grid == 0 || c.model.input_side % c.xai.grid != 0) bad("xai.grid must divide input_side");
  if (c.xai.baseline < 0 || c.xai.baseline > 1) bad("xai.baseline is a normalized intensity in [0, 1]");
  for (double f : c.progressive_fractions) {
    if (!(f > 0 && f <= 1)) bad("progressive_fractions entries must lie in (0, 1]");
  }
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("MissingFile", path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("InvalidConfig", path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_env_overrides(Config& c) {
  if (const char* s = std::getenv("MALVIS_SEED"); s && *s) {
    try {
      c.seed = std::stoull(s);
    } catch (const std::exception&) {
      throw validation_error("InvalidConfig", std::string("MALVIS_SEED is not an integer: ") + s);
    }
  }
}

}  // namespace malvis
