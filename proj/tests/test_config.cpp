#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "fpps/config.hpp"

using fpps::ConfigMap;
using fpps::ValidationError;

TEST_CASE("sections, comments and quoting") {
  ConfigMap c = ConfigMap::parse(R"(
# top-level keys
seed = 42
name = "with # hash"   # trailing comment

[integrator]
t_end = 2.5
stop_times = [0.5, 1.0, 2]
[flow]
gradient = gradient_free
)");
  CHECK(c.get_uint64("seed", 0) == 42);
  CHECK(c.get_string("name", "") == "with # hash");
  CHECK(c.get_double("integrator.t_end", 0) == 2.5);
  const auto stops = c.get_doubles("integrator.stop_times");
  REQUIRE(stops);
  CHECK(*stops == std::vector<double>{0.5, 1.0, 2.0});
  CHECK(c.get_choice("flow.gradient", "exact", {"exact", "gradient_free"}) == "gradient_free");
  CHECK(c.unused().empty());
}

TEST_CASE("defaults are recorded in the resolved view") {
  ConfigMap c = ConfigMap::parse("M = 10\n");
  CHECK(c.get_long("M", 1) == 10);
  CHECK(c.get_double("kernel.alpha", 0.25) == 0.25);
  CHECK(c.get_bool("langevin.noise", true));
  CHECK_FALSE(c.get_optional_double("kernel.freeze_time"));
  CHECK(c.resolved().at("M") == "10");
  CHECK(c.resolved().at("kernel.alpha") == "0.25");
  CHECK(c.resolved().at("langevin.noise") == "true");
  CHECK(c.resolved().at("kernel.freeze_time") == "none");
}

TEST_CASE("overrides replace file values") {
  ConfigMap c = ConfigMap::parse("[kernel]\nalpha = 1\n");
  c.set("kernel.alpha=0.5");
  c.set("M", "7");
  CHECK(c.get_double("kernel.alpha", 0) == 0.5);
  CHECK(c.get_long("M", 0) == 7);
  CHECK_THROWS_AS(c.set("no_equals_sign"), ValidationError);
  CHECK_THROWS_AS(c.set("=3"), ValidationError);
}

TEST_CASE("malformed values name the offending field") {
  ConfigMap c = ConfigMap::parse("a = abc\nb = 1.5\nc = maybe\nd = [1, x]\ne = -3\n");
  try {
    c.get_double("a", 0);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.field() == "a");
  }
  CHECK_THROWS_AS(c.get_long("b", 0), ValidationError);
  CHECK_THROWS_AS(c.get_bool("c", false), ValidationError);
  CHECK_THROWS_AS(c.get_doubles("d"), ValidationError);
  CHECK_THROWS_AS(c.get_uint64("e", 0), ValidationError);
  CHECK_THROWS_AS(c.get_choice("c", "x", {"x", "y"}), ValidationError);
}

TEST_CASE("malformed lines are rejected") {
  CHECK_THROWS_AS(ConfigMap::parse("just words\n"), ValidationError);
  CHECK_THROWS_AS(ConfigMap::parse("[]\n"), ValidationError);
  CHECK_THROWS_AS(ConfigMap::parse(" = 3\n"), ValidationError);
}

TEST_CASE("unused keys are reported") {
  ConfigMap c = ConfigMap::parse("x = 1\ny = 2\n");
  c.get_long("x", 0);
  CHECK(c.unused() == std::vector<std::string>{"y"});
}

TEST_CASE("loading from disk") {
  const std::string path = "fpps_config_test.toml";
  {
    std::ofstream out(path);
    out << "[problem]\nname = bimodal\n";
  }
  ConfigMap c = ConfigMap::load(path);
  CHECK(c.get_string("problem.name", "") == "bimodal");
  std::remove(path.c_str());
  CHECK_THROWS_AS(ConfigMap::load("does/not/exist.toml"), ValidationError);
}
