#include <doctest.h>

#include <fstream>

#include "hilgnn/grid.hpp"
#include "support.hpp"

using namespace hilgnn;
using hilgnn::testing::wscc9;

namespace {

nlohmann::json wscc9_json() {
  std::ifstream in(hilgnn::testing::data_dir() / "wscc9.json");
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("bundled 9-bus case loads") {
  const auto g = wscc9();
  CHECK(g.buses.size() == 9);
  CHECK(g.generators.size() == 3);
  CHECK(g.loads.size() == 3);
  CHECK(g.lines.size() == 9);
  CHECK(g.slack.bus == 1);
  CHECK(g.slack_generator() == 0);
  CHECK(grid::validate(g).empty());
  // file powers are MW, internal per-unit
  CHECK(g.loads[0].p == doctest::Approx(0.9));
  CHECK(g.generators[1].p_set == doctest::Approx(1.63));
  CHECK(g.lines[0].s_max == doctest::Approx(2.5));
}

TEST_CASE("case errors") {
  SUBCASE("two slack entries") {
    auto doc = wscc9_json();
    doc["slack"] = nlohmann::json::array({doc["slack"], doc["slack"]});
    CHECK_THROWS_AS(grid::case_from_json(doc), grid::ValidationError);
  }
  SUBCASE("dangling bus reference") {
    auto doc = wscc9_json();
    doc["lines"][2]["to_bus"] = 99;
    try {
      grid::case_from_json(doc);
      FAIL("expected a validation error");
    } catch (const grid::ValidationError& e) {
      REQUIRE(e.violations().size() == 1);
      CHECK(e.violations()[0].find("99") != std::string::npos);
    }
  }
  SUBCASE("malformed json") {
    const auto dir = hilgnn::testing::scratch_dir("case");
    std::ofstream(dir / "bad.json") << "{\"base_mva\": 100, ";
    CHECK_THROWS_AS(grid::load_case(dir / "bad.json"), grid::CaseError);
    CHECK_THROWS_AS(grid::load_case(dir / "missing.json"), grid::CaseError);
    std::filesystem::remove_all(dir);
  }
  SUBCASE("missing key") {
    auto doc = wscc9_json();
    doc.erase("loads");
    CHECK_THROWS_AS(grid::case_from_json(doc), grid::CaseError);
  }
}

TEST_CASE("validate reports one violation per broken invariant") {
  auto g = wscc9();
  g.buses[3].v_min = 1.1;
  g.buses[3].v_max = 0.9;
  CHECK(grid::validate(g).size() == 1);
  g = wscc9();
  g.lines[4].x = 0.0;
  CHECK(grid::validate(g).size() == 1);
}

TEST_CASE("per-unit conversion") {
  CHECK(grid::power_to_pu(100.0, 100.0) == 1.0);
  CHECK(grid::power_to_pu(0.0, 100.0) == 0.0);
  CHECK(grid::impedance_to_pu(5.29, 100.0, 230.0) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK_THROWS_AS(grid::power_to_pu(1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(grid::impedance_to_pu(1.0, 100.0, -1.0), std::invalid_argument);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1e3, 1e3), base(1.0, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double s = u(rng), b = base(rng), kv = base(rng);
    CHECK(grid::power_from_pu(grid::power_to_pu(s, b), b) == doctest::Approx(s).epsilon(1e-12));
    CHECK(grid::impedance_from_pu(grid::impedance_to_pu(s, b, kv), b, kv) == doctest::Approx(s).epsilon(1e-12));
  }
  // array arguments
  const Eigen::Array3d mw(50.0, 100.0, 150.0);
  CHECK((grid::power_to_pu(mw, 100.0) - Eigen::Array3d(0.5, 1.0, 1.5)).abs().maxCoeff() < 1e-15);
}

TEST_CASE("save and load round trip") {
  const auto dir = hilgnn::testing::scratch_dir("case");
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto g = i == 0 ? wscc9() : hilgnn::testing::random_case(rng);
    grid::save_case(g, dir / "c.json");
    const auto back = grid::load_case(dir / "c.json");
    CHECK(back.buses == g.buses);
    CHECK(back.lines.size() == g.lines.size());
    for (std::size_t k = 0; k < g.lines.size(); ++k) CHECK(back.lines[k].s_max == doctest::Approx(g.lines[k].s_max));
    CHECK(back.loads.size() == g.loads.size());
    CHECK(back.slack == g.slack);
  }
  // per-unit files are exact
  const auto g = wscc9();
  CHECK(grid::case_from_json(grid::case_to_json(g, grid::PowerUnit::PerUnit)) == g);
  std::filesystem::remove_all(dir);
}
