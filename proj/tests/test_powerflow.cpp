#include <doctest.h>

#include <cmath>

#include "hilgnn/dataset.hpp"
#include "hilgnn/powerflow.hpp"
#include "support.hpp"

using namespace hilgnn;
using hilgnn::testing::wscc9;

namespace {

grid::GridCase two_bus(double r, double x, double load_p, double load_q) {
  grid::GridCase g;
  g.buses = {{1, 0.9, 1.1, 1.0}, {2, 0.9, 1.1, 1.0}};
  g.lines = {{1, 2, r, x, 0.0, 5.0, 1.0}};
  g.generators = {{1, 0.0, 1.0, 0.0, 5.0, -5.0, 5.0}};
  g.loads = {{2, load_p, load_q}};
  g.slack = {1, 1.0, 0.0};
  return g;
}

}  // namespace

TEST_CASE("ybus stamps") {
  SUBCASE("single line") {
    const auto g = two_bus(0.01, 0.1, 0.0, 0.0);
    const auto y = pf::build_ybus(g);
    const std::complex<double> ys = 1.0 / std::complex<double>(0.01, 0.1);
    CHECK(std::abs(y(0, 0) - ys) < 1e-14);
    CHECK(std::abs(y(0, 1) + ys) < 1e-14);
    CHECK(std::abs(y(1, 0) + ys) < 1e-14);
    CHECK(std::abs(y(1, 1) - ys) < 1e-14);
  }
  SUBCASE("parallel lines add") {
    auto g = two_bus(0.01, 0.1, 0.0, 0.0);
    g.lines[0].b_shunt = 0.04;
    const auto single = pf::build_ybus(g);
    g.lines.push_back(g.lines[0]);
    CHECK((pf::build_ybus(g) - 2.0 * single).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("matches incidence-matrix construction") {
    const auto g = wscc9();
    CHECK((pf::build_ybus(g) - hilgnn::testing::incidence_ybus(g)).cwiseAbs().maxCoeff() < 1e-10);
    std::mt19937_64 rng(11);
    for (int i = 0; i < 50; ++i) {
      const auto c = hilgnn::testing::random_case(rng);
      CHECK((pf::build_ybus(c) - hilgnn::testing::incidence_ybus(c)).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
  SUBCASE("symmetry and row sums without taps") {
    const auto g = wscc9();
    const auto y = pf::build_ybus(g);
    CHECK((y - y.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      std::complex<double> shunt = 0.0;
      for (const auto& l : g.lines)
        if (g.bus_index(l.from_bus) == static_cast<std::size_t>(i) || g.bus_index(l.to_bus) == static_cast<std::size_t>(i))
          shunt += std::complex<double>(0.0, l.b_shunt / 2.0);
      CHECK(std::abs(y.row(i).sum() - shunt) < 1e-12);
    }
  }
}

TEST_CASE("power injections agree with complex form") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> vm(0.9, 1.1), va(-0.5, 0.5);
  for (int t = 0; t < 30; ++t) {
    const auto g = t == 0 ? wscc9() : hilgnn::testing::random_case(rng);
    const auto n = static_cast<Eigen::Index>(g.buses.size());
    Eigen::VectorXd m(n), a(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      m(i) = vm(rng);
      a(i) = va(rng);
    }
    Eigen::VectorXcd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = std::polar(m(i), a(i));
    const Eigen::VectorXcd s = v.cwiseProduct((hilgnn::testing::incidence_ybus(g) * v).conjugate());
    const auto pq = pf::power_injections(g, m, a);
    CHECK((pq.col(0) - s.real()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((pq.col(1) - s.imag()).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("flat profile, zero-injection network") {
    auto g = two_bus(0.0, 0.1, 0.0, 0.0);
    const auto pq = pf::power_injections(g, Eigen::VectorXd::Ones(2), Eigen::VectorXd::Zero(2));
    CHECK(pq.cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("two-bus solutions") {
  SUBCASE("zero load, lossless") {
    const auto sol = pf::solve_pf(two_bus(0.0, 0.1, 0.0, 0.0));
    CHECK(std::abs(sol.v_mag(1) - 1.0) < 1e-10);
    CHECK(std::abs(sol.v_ang(1)) < 1e-10);
    CHECK(std::abs(sol.slack_p) < 1e-10);
    CHECK(std::abs(sol.slack_q) < 1e-10);
  }
  SUBCASE("closed form, z = j0.1, P = 1") {
    // V2 sin(d) = P x and V2 = cos(d) for zero Q, so sin(2d) = 2 P x.
    const double d = std::asin(0.2) / 2.0;
    const double v2 = std::cos(d);
    const auto sol = pf::solve_pf(two_bus(0.0, 0.1, 1.0, 0.0));
    CHECK(std::abs(sol.v_mag(1) - v2) < 1e-8);
    CHECK(std::abs(sol.v_ang(1) + d) < 1e-8);
    CHECK(std::abs(sol.slack_p - 1.0) < 1e-8);
    CHECK(std::abs(sol.slack_q - (1.0 - v2 * v2) / 0.1) < 1e-8);
  }
}

TEST_CASE("9-bus solution") {
  const auto g = wscc9();
  const auto sol = pf::solve_pf(g);
  CHECK(sol.iterations <= 10);
  CHECK(sol.max_mismatch < 1e-8);
  CHECK(sol.v_mag(0) == g.slack.v_set);
  CHECK(sol.v_ang(0) == g.slack.angle);
  // generator 1 output of the standard case
  CHECK(sol.slack_p * g.base_mva == doctest::Approx(71.95).epsilon(1e-3));

  SUBCASE("Gauss-Seidel oracle") {
    const auto gs = hilgnn::testing::gauss_seidel(g);
    CHECK((sol.v_mag - gs.v_mag).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((sol.v_ang - gs.v_ang).cwiseAbs().maxCoeff() < 1e-6);
  }
  SUBCASE("converged injections equal specification") {
    const auto pq = pf::power_injections(g, sol.v_mag, sol.v_ang);
    for (const auto& d : g.loads) {
      const auto i = static_cast<Eigen::Index>(g.bus_index(d.bus));
      CHECK(std::abs(pq(i, 0) + d.p) < 1e-8);
      CHECK(std::abs(pq(i, 1) + d.q) < 1e-8);
    }
    for (std::size_t k = 1; k < g.generators.size(); ++k) {
      const auto i = static_cast<Eigen::Index>(g.bus_index(g.generators[k].bus));
      CHECK(std::abs(pq(i, 0) - g.generators[k].p_set) < 1e-8);
      CHECK(sol.v_mag(i) == g.generators[k].v_set);
    }
  }
  SUBCASE("superlinear convergence") {
    const auto& h = sol.mismatch_history;
    REQUIRE(h.size() >= 4);
    for (std::size_t k = 2; k + 1 < h.size(); ++k) {
      CHECK(h[k + 1] < h[k]);
      CHECK(h[k + 1] / h[k] < 0.5 * h[k] / h[k - 1]);
    }
  }
  SUBCASE("deterministic") {
    const auto again = pf::solve_pf(g);
    CHECK(again.v_mag == sol.v_mag);
    CHECK(again.v_ang == sol.v_ang);
    CHECK(again.slack_p == sol.slack_p);
    CHECK(again.slack_q == sol.slack_q);
  }
}

TEST_CASE("random cases agree with Gauss-Seidel and conserve power") {
  std::mt19937_64 rng(21);
  int solved = 0;
  for (int t = 0; t < 40; ++t) {
    const auto g = hilgnn::testing::random_case(rng);
    pf::PfSolution sol;
    try {
      sol = pf::solve_pf(g);
    } catch (const pf::PowerFlowError&) {
      continue;
    }
    ++solved;
    const auto gs = hilgnn::testing::gauss_seidel(g);
    CHECK((sol.v_mag - gs.v_mag).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(pf::power_balance(g, sol)) < 1e-8);
  }
  CHECK(solved >= 30);
}

TEST_CASE("conservation on mutated 9-bus solutions") {
  const auto g = wscc9();
  const auto gen = data::generate(g, 50, {0.7, 0.5, 99});
  for (const auto& s : gen.samples) {
    const auto bal = pf::power_balance(s.grid, s.solution);
    CHECK(std::abs(bal.real()) < 1e-8);
    CHECK(std::abs(bal.imag()) < 1e-8);
  }
}

TEST_CASE("branch flows") {
  const auto g = two_bus(0.02, 0.1, 0.5, 0.2);
  const auto sol = pf::solve_pf(g);
  const auto f = pf::branch_flows(g, sol.v_mag, sol.v_ang);
  CHECK(std::abs(f.from(0).real() - sol.slack_p) < 1e-8);
  CHECK(std::abs(f.to(0) + std::complex<double>(0.5, 0.2)) < 1e-8);
  // series loss |I|^2 r
  const std::complex<double> v1 = std::polar(sol.v_mag(0), sol.v_ang(0)), v2 = std::polar(sol.v_mag(1), sol.v_ang(1));
  const double i2 = std::norm((v1 - v2) / std::complex<double>(0.02, 0.1));
  CHECK(std::abs((f.from(0) + f.to(0)).real() - i2 * 0.02) < 1e-12);
}

TEST_CASE("solver errors") {
  SUBCASE("divergence reports last mismatch") {
    const auto g = two_bus(0.0, 0.1, 20.0, 5.0);
    try {
      pf::solve_pf(g);
      FAIL("expected failure");
    } catch (const pf::ConvergenceError& e) {
      CHECK(e.last_mismatch() > 1e-8);
    } catch (const pf::SingularJacobian&) {
    }
  }
  SUBCASE("iteration cap") {
    pf::PfOptions opts;
    opts.max_iter = 1;
    CHECK_THROWS_AS(pf::solve_pf(wscc9(), opts), pf::ConvergenceError);
  }
  SUBCASE("islanded bus") {
    auto g = two_bus(0.0, 0.1, 0.5, 0.0);
    g.buses.push_back({3, 0.9, 1.1, 1.0});
    g.loads.push_back({3, 0.1, 0.0});
    CHECK_THROWS_AS(pf::solve_pf(g), pf::PowerFlowError);
  }
}

TEST_CASE("q-limit switching") {
  auto g = wscc9();
  const auto free = pf::solve_pf(g);
  // clamp generator 2 below its unconstrained output
  const double q2 = free.gen_q(1);
  g.generators[1].q_max = q2 - 0.05;
  pf::PfOptions opts;
  opts.enforce_q_limits = true;
  const auto sol = pf::solve_pf(g, opts);
  CHECK(sol.gen_q(1) == doctest::Approx(q2 - 0.05).epsilon(1e-8));
  CHECK(sol.v_mag(1) < g.generators[1].v_set);
}
