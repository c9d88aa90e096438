#include <doctest.h>

#include <cstdlib>

#include "malvis/config.hpp"
#include "malvis/error.hpp"

using namespace malvis;

TEST_CASE("defaults validate and round trip through json") {
  Config c;
  validate(c);
  c.seed = 42;
  c.model.filters = {4, 8};
  c.obfuscation.morph_passes = 2;
  c.xai.coalitions = 100;
  c.split.seed = 5;
  const auto j = config_to_json(c);
  const Config back = config_from_json(nlohmann::json::parse(j.dump()));
  CHECK(config_to_json(back) == j);
  CHECK(back.model == c.model);
}

TEST_CASE("unknown keys are rejected at every level") {
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"seeed", 1}}), Error);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"model", {{"filterz", {1}}}}}), Error);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"xai", {{"windw", 4}}}}), Error);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"split", {{"test", 0.1}}}}), Error);
  try {
    config_from_json(nlohmann::json{{"obfuscation", {{"pack", 1}}}});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.name() == "InvalidConfig");
    CHECK(e.error_class() == ErrorClass::validation);
  }
}

TEST_CASE("partial configs keep defaults") {
  const Config c = config_from_json(nlohmann::json{{"model", {{"epochs", 3}}}});
  CHECK(c.model.epochs == 3);
  CHECK(c.model.filters == Config{}.model.filters);
  CHECK(c.obfuscation.morph_passes == 3);
}

TEST_CASE("invalid values") {
  CHECK_THROWS_AS(validate(config_from_json(nlohmann::json{{"split", {{"test_fraction", 1.5}}}})), Error);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"model", {{"epochs", "ten"}}}}), Error);
  Config c;
  c.obfuscation.pack_fraction = -0.1;
  CHECK_THROWS_AS(validate(c), Error);
  c = Config{};
  c.progressive_fractions = {0.5, 1.2};
  CHECK_THROWS_AS(validate(c), Error);
}

TEST_CASE("MALVIS_SEED overrides the seed") {
  Config c;
  setenv("MALVIS_SEED", "1234", 1);
  apply_env_overrides(c);
  CHECK(c.seed == 1234);
  setenv("MALVIS_SEED", "abc", 1);
  CHECK_THROWS_AS(apply_env_overrides(c), Error);
  unsetenv("MALVIS_SEED");
  Config d;
  apply_env_overrides(d);
  CHECK(d.seed == 1);
}
