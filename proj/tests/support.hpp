#pragma once

// Test-only oracles and generators. Nothing here calls into the code paths
// it is used to check.

#include <complex>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "hilgnn/grid.hpp"

namespace hilgnn::testing {

inline std::filesystem::path data_dir() { return HILGNN_DATA_DIR; }
inline grid::GridCase wscc9() { return grid::load_case(data_dir() / "wscc9.json"); }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto dir = std::filesystem::temp_directory_path() / ("hilgnn-" + tag + "-" + std::to_string(rng() % 1000000000));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Ybus from incidence matrices: Y = Cf' Yff Cf + Cf' Yft Ct + Ct' Ytf Cf + Ct' Ytt Ct.
inline Eigen::MatrixXcd incidence_ybus(const grid::GridCase& g) {
  using C = std::complex<double>;
  const auto n = static_cast<Eigen::Index>(g.buses.size());
  const auto m = static_cast<Eigen::Index>(g.lines.size());
  Eigen::MatrixXcd cf = Eigen::MatrixXcd::Zero(m, n), ct = Eigen::MatrixXcd::Zero(m, n);
  Eigen::VectorXcd yff(m), yft(m), ytf(m), ytt(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto& l = g.lines[k];
    cf(k, static_cast<Eigen::Index>(g.bus_index(l.from_bus))) = 1.0;
    ct(k, static_cast<Eigen::Index>(g.bus_index(l.to_bus))) = 1.0;
    const C z(l.r, l.x);
    const C ys = C(1.0) / z;
    const C bc(0.0, l.b_shunt);
    ytt(k) = ys + bc / 2.0;
    yff(k) = ytt(k) / (l.tap * l.tap);
    yft(k) = -ys / l.tap;
    ytf(k) = -ys / l.tap;
  }
  const Eigen::MatrixXcd yf = yff.asDiagonal() * cf + yft.asDiagonal() * ct;
  const Eigen::MatrixXcd yt = ytf.asDiagonal() * cf + ytt.asDiagonal() * ct;
  return cf.transpose() * yf + ct.transpose() * yt;
}

struct GsResult {
  Eigen::VectorXd v_mag, v_ang;
  int iterations = 0;
};

/// Gauss-Seidel power flow on the complex voltage phasors. PV buses hold
/// their magnitude, re-estimating Q each sweep.
inline GsResult gauss_seidel(const grid::GridCase& g, double tol = 1e-10, int max_iter = 200000) {
  using C = std::complex<double>;
  const Eigen::MatrixXcd y = incidence_ybus(g);
  const auto n = static_cast<Eigen::Index>(g.buses.size());
  const auto slack = static_cast<Eigen::Index>(g.bus_index(g.slack.bus));
  Eigen::VectorXcd s_spec = Eigen::VectorXcd::Zero(n);
  std::vector<int> pv(n, 0);
  Eigen::VectorXd v_hold = Eigen::VectorXd::Ones(n);
  for (const auto& gen : g.generators) {
    const auto i = static_cast<Eigen::Index>(g.bus_index(gen.bus));
    if (i == slack) continue;
    s_spec(i) += gen.p_set;
    if (!pv[i]) v_hold(i) = gen.v_set;
    pv[i] = 1;
  }
  for (const auto& d : g.loads) s_spec(static_cast<Eigen::Index>(g.bus_index(d.bus))) -= C(d.p, d.q);

  Eigen::VectorXcd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = std::polar(v_hold(i), g.slack.angle);
  v(slack) = std::polar(g.slack.v_set, g.slack.angle);

  GsResult res;
  for (int it = 1; it <= max_iter; ++it) {
    double change = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (i == slack) continue;
      C yv = 0.0;
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i) yv += y(i, j) * v(j);
      C s = s_spec(i);
      if (pv[i]) s = C(s.real(), -std::imag(std::conj(v(i)) * (yv + y(i, i) * v(i))));
      C next = (std::conj(s / v(i)) - yv) / y(i, i);
      if (pv[i]) next = std::polar(v_hold(i), std::arg(next));
      change = std::max(change, std::abs(next - v(i)));
      v(i) = next;
    }
    res.iterations = it;
    if (change < tol) break;
  }
  res.v_mag = v.cwiseAbs();
  res.v_ang.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) res.v_ang(i) = std::arg(v(i));
  return res;
}

/// Small random radial-plus-loops network that a flat start solves easily.
inline grid::GridCase random_case(std::mt19937_64& rng, int min_bus = 3, int max_bus = 8) {
  std::uniform_int_distribution<int> nb(min_bus, max_bus);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  grid::GridCase g;
  g.base_mva = 100.0;
  const int n = nb(rng);
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = 10 + 3 * i + static_cast<int>(u(rng) * 2);
  for (int id : ids) g.buses.push_back({id, 0.9, 1.1, 1.0});
  auto line = [&](int a, int b) {
    grid::Line l;
    l.from_bus = ids[a];
    l.to_bus = ids[b];
    l.r = 0.005 + 0.02 * u(rng);
    l.x = 0.03 + 0.08 * u(rng);
    l.b_shunt = 0.1 * u(rng);
    l.tap = u(rng) < 0.2 ? 0.95 + 0.1 * u(rng) : 1.0;
    l.s_max = 1.0 + 2.0 * u(rng);
    g.lines.push_back(l);
  };
  for (int i = 1; i < n; ++i) line(static_cast<int>(u(rng) * i), i);
  for (int extra = static_cast<int>(u(rng) * 3); extra > 0; --extra) {
    const int a = static_cast<int>(u(rng) * n), b = static_cast<int>(u(rng) * n);
    if (a != b) line(a, b);
  }
  const int slack = static_cast<int>(u(rng) * n);
  g.slack = {ids[slack], 1.0 + 0.04 * u(rng), 0.2 * (u(rng) - 0.5)};
  g.generators.push_back({ids[slack], 0.0, g.slack.v_set, 0.0, 5.0, -3.0, 3.0});
  for (int i = 0; i < n; ++i) {
    if (i == slack) continue;
    const double r = u(rng);
    if (r < 0.3) g.generators.push_back({ids[i], 0.2 + 0.3 * u(rng), 0.98 + 0.05 * u(rng), 0.0, 2.0, -2.0, 2.0});
    else if (r < 0.8) g.loads.push_back({ids[i], 0.1 + 0.4 * u(rng), 0.02 + 0.15 * u(rng)});
  }
  return g;
}

/// Central difference of f at x along every coordinate.
inline Eigen::MatrixXd numeric_gradient(const std::function<double(const Eigen::MatrixXd&)>& f, Eigen::MatrixXd x,
                                        double h = 1e-6) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x(i);
    x(i) = keep + h;
    const double fp = f(x);
    x(i) = keep - h;
    const double fm = f(x);
    x(i) = keep;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace hilgnn::testing
