#include "hilgnn/powerflow.hpp"

#include <cmath>
#include <sstream>

namespace hilgnn::pf {

using grid::GridCase;

BranchAdmittance branch_admittance(const grid::Line& line) {
  const Complex ys = 1.0 / Complex(line.r, line.x);
  const Complex half_charging(0.0, line.b_shunt / 2.0);
  const double t = line.tap;
  return {(ys + half_charging) / (t * t), -ys / t, -ys / t, ys + half_charging};
}

Ybus build_ybus(const GridCase& grid) {
  const auto n = static_cast<Eigen::Index>(grid.buses.size());
  Ybus y = Ybus::Zero(n, n);
  for (const auto& line : grid.lines) {
    const auto f = static_cast<Eigen::Index>(grid.bus_index(line.from_bus));
    const auto t = static_cast<Eigen::Index>(grid.bus_index(line.to_bus));
    const auto a = branch_admittance(line);
    y(f, f) += a.ff;
    y(f, t) += a.ft;
    y(t, f) += a.tf;
    y(t, t) += a.tt;
  }
  return y;
}

Eigen::MatrixX2d power_injections(const GridCase& grid, const Eigen::VectorXd& v_mag, const Eigen::VectorXd& v_ang) {
  return power_injections(build_ybus(grid), v_mag, v_ang);
}

ConvergenceError::ConvergenceError(int iterations, double mismatch)
    : PowerFlowError([&] {
        std::ostringstream os;
        os << "power flow did not converge after " << iterations << " iterations (max mismatch " << mismatch
           << " p.u.)";
        return os.str();
      }()),
      mismatch_(mismatch) {}

namespace {

enum class BusKind { PQ, PV, Slack };

struct BusSetup {
  std::vector<BusKind> kind;
  Eigen::VectorXd p_spec, q_spec, v_start;
  Eigen::VectorXd load_p, load_q;
};

BusSetup classify(const GridCase& grid) {
  const auto n = static_cast<Eigen::Index>(grid.buses.size());
  BusSetup s;
  s.kind.assign(n, BusKind::PQ);
  s.p_spec = Eigen::VectorXd::Zero(n);
  s.q_spec = Eigen::VectorXd::Zero(n);
  s.load_p = Eigen::VectorXd::Zero(n);
  s.load_q = Eigen::VectorXd::Zero(n);
  s.v_start = Eigen::VectorXd::Ones(n);

  const auto slack = static_cast<Eigen::Index>(grid.bus_index(grid.slack.bus));
  for (const auto& g : grid.generators) {
    const auto i = static_cast<Eigen::Index>(grid.bus_index(g.bus));
    if (i == slack) continue;
    if (s.kind[i] != BusKind::PV) s.v_start(i) = g.v_set;
    s.kind[i] = BusKind::PV;
    s.p_spec(i) += g.p_set;
  }
  for (const auto& d : grid.loads) {
    const auto i = static_cast<Eigen::Index>(grid.bus_index(d.bus));
    s.load_p(i) += d.p;
    s.load_q(i) += d.q;
  }
  s.p_spec -= s.load_p;
  s.q_spec -= s.load_q;
  s.kind[slack] = BusKind::Slack;
  s.v_start(slack) = grid.slack.v_set;
  return s;
}

struct NewtonResult {
  Eigen::VectorXd v_mag, v_ang;
  int iterations = 0;
  double mismatch = 0.0;
  std::vector<double> history;
};

NewtonResult newton(const Ybus& y, const BusSetup& setup, double slack_angle, const PfOptions& opts) {
  const Eigen::Index n = y.rows();
  std::vector<Eigen::Index> ang_idx, mag_idx;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (setup.kind[i] != BusKind::Slack) ang_idx.push_back(i);
    if (setup.kind[i] == BusKind::PQ) mag_idx.push_back(i);
  }
  const auto na = static_cast<Eigen::Index>(ang_idx.size());
  const auto nm = static_cast<Eigen::Index>(mag_idx.size());
  const Eigen::Index dim = na + nm;

  NewtonResult res;
  res.v_mag = setup.v_start;
  res.v_ang = Eigen::VectorXd::Constant(n, slack_angle);
  const Eigen::MatrixXd g = y.real();
  const Eigen::MatrixXd b = y.imag();

  Eigen::VectorXd mismatch(dim);
  Eigen::MatrixXd jac(dim, dim);
  for (int iter = 0;; ++iter) {
    const Eigen::MatrixX2d s = power_injections(y, res.v_mag, res.v_ang);
    for (Eigen::Index k = 0; k < na; ++k) mismatch(k) = setup.p_spec(ang_idx[k]) - s(ang_idx[k], 0);
    for (Eigen::Index k = 0; k < nm; ++k) mismatch(na + k) = setup.q_spec(mag_idx[k]) - s(mag_idx[k], 1);
    res.mismatch = dim > 0 ? mismatch.lpNorm<Eigen::Infinity>() : 0.0;
    res.history.push_back(res.mismatch);
    res.iterations = iter;
    if (!std::isfinite(res.mismatch)) throw ConvergenceError(iter, res.mismatch);
    if (res.mismatch <= opts.tol) return res;
    if (iter >= opts.max_iter) throw ConvergenceError(iter, res.mismatch);

    // dP/dtheta, dP/dV, dQ/dtheta, dQ/dV
    auto dp_dth = [&](Eigen::Index i, Eigen::Index j) {
      if (i == j) return -s(i, 1) - b(i, i) * res.v_mag(i) * res.v_mag(i);
      const double t = res.v_ang(i) - res.v_ang(j);
      return res.v_mag(i) * res.v_mag(j) * (g(i, j) * std::sin(t) - b(i, j) * std::cos(t));
    };
    auto dp_dv = [&](Eigen::Index i, Eigen::Index j) {
      if (i == j) return s(i, 0) / res.v_mag(i) + g(i, i) * res.v_mag(i);
      const double t = res.v_ang(i) - res.v_ang(j);
      return res.v_mag(i) * (g(i, j) * std::cos(t) + b(i, j) * std::sin(t));
    };
    auto dq_dth = [&](Eigen::Index i, Eigen::Index j) {
      if (i == j) return s(i, 0) - g(i, i) * res.v_mag(i) * res.v_mag(i);
      const double t = res.v_ang(i) - res.v_ang(j);
      return -res.v_mag(i) * res.v_mag(j) * (g(i, j) * std::cos(t) + b(i, j) * std::sin(t));
    };
    auto dq_dv = [&](Eigen::Index i, Eigen::Index j) {
      if (i == j) return s(i, 1) / res.v_mag(i) - b(i, i) * res.v_mag(i);
      const double t = res.v_ang(i) - res.v_ang(j);
      return res.v_mag(i) * (g(i, j) * std::sin(t) - b(i, j) * std::cos(t));
    };
    for (Eigen::Index r = 0; r < na; ++r) {
      for (Eigen::Index c = 0; c < na; ++c) jac(r, c) = dp_dth(ang_idx[r], ang_idx[c]);
      for (Eigen::Index c = 0; c < nm; ++c) jac(r, na + c) = dp_dv(ang_idx[r], mag_idx[c]);
    }
    for (Eigen::Index r = 0; r < nm; ++r) {
      for (Eigen::Index c = 0; c < na; ++c) jac(na + r, c) = dq_dth(mag_idx[r], ang_idx[c]);
      for (Eigen::Index c = 0; c < nm; ++c) jac(na + r, na + c) = dq_dv(mag_idx[r], mag_idx[c]);
    }

    Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
    if (!(lu.rcond() > 1e-14)) throw SingularJacobian("singular power-flow Jacobian");
    const Eigen::VectorXd dx = lu.solve(mismatch);
    for (Eigen::Index k = 0; k < na; ++k) res.v_ang(ang_idx[k]) += dx(k);
    for (Eigen::Index k = 0; k < nm; ++k) res.v_mag(mag_idx[k]) += dx(na + k);
  }
}

}  // namespace

PfSolution solve_pf(const GridCase& grid, const PfOptions& opts) {
  if (!(opts.tol > 0.0)) throw std::invalid_argument("power-flow tolerance must be positive");
  const Ybus y = build_ybus(grid);
  BusSetup setup = classify(grid);
  const auto n = static_cast<Eigen::Index>(grid.buses.size());
  const auto slack = static_cast<Eigen::Index>(grid.bus_index(grid.slack.bus));

  // Generators grouped per bus for output splitting and limit checks.
  std::vector<std::vector<std::size_t>> gens_at(n);
  for (std::size_t k = 0; k < grid.generators.size(); ++k) gens_at[grid.bus_index(grid.generators[k].bus)].push_back(k);

  NewtonResult nr;
  Eigen::MatrixX2d s;
  for (;;) {
    nr = newton(y, setup, grid.slack.angle, opts);
    s = power_injections(y, nr.v_mag, nr.v_ang);
    if (!opts.enforce_q_limits) break;
    bool switched = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (setup.kind[i] != BusKind::PV) continue;
      double q_lo = 0.0, q_hi = 0.0;
      for (auto k : gens_at[i]) {
        q_lo += grid.generators[k].q_min;
        q_hi += grid.generators[k].q_max;
      }
      const double q_gen = s(i, 1) + setup.load_q(i);
      if (q_gen > q_hi || q_gen < q_lo) {
        setup.kind[i] = BusKind::PQ;
        setup.q_spec(i) = (q_gen > q_hi ? q_hi : q_lo) - setup.load_q(i);
        switched = true;
      }
    }
    if (!switched) break;
  }

  PfSolution sol;
  sol.v_mag = nr.v_mag;
  sol.v_ang = nr.v_ang;
  sol.v_mag(slack) = grid.slack.v_set;
  sol.v_ang(slack) = grid.slack.angle;
  sol.iterations = nr.iterations;
  sol.max_mismatch = nr.mismatch;
  sol.mismatch_history = std::move(nr.history);
  sol.slack_p = s(slack, 0) + setup.load_p(slack);
  sol.slack_q = s(slack, 1) + setup.load_q(slack);
  sol.gen_q = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid.generators.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (gens_at[i].empty()) continue;
    const double share = (setup.kind[i] == BusKind::PQ ? setup.q_spec(i) + setup.load_q(i)
                                                        : s(i, 1) + setup.load_q(i)) /
                         static_cast<double>(gens_at[i].size());
    for (auto k : gens_at[i]) sol.gen_q(static_cast<Eigen::Index>(k)) = share;
  }
  return sol;
}

BranchFlows branch_flows(const GridCase& grid, const Eigen::VectorXd& v_mag, const Eigen::VectorXd& v_ang) {
  const auto m = static_cast<Eigen::Index>(grid.lines.size());
  BranchFlows flows{Eigen::VectorXcd(m), Eigen::VectorXcd(m)};
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto& line = grid.lines[k];
    const auto f = static_cast<Eigen::Index>(grid.bus_index(line.from_bus));
    const auto t = static_cast<Eigen::Index>(grid.bus_index(line.to_bus));
    const Complex vf = std::polar(v_mag(f), v_ang(f));
    const Complex vt = std::polar(v_mag(t), v_ang(t));
    const auto a = branch_admittance(line);
    flows.from(k) = vf * std::conj(a.ff * vf + a.ft * vt);
    flows.to(k) = vt * std::conj(a.tf * vf + a.tt * vt);
  }
  return flows;
}

Complex power_balance(const GridCase& grid, const PfSolution& sol) {
  Complex gen(sol.slack_p, sol.slack_q);
  for (std::size_t k = 0; k < grid.generators.size(); ++k) {
    if (grid.generators[k].bus == grid.slack.bus) continue;
    gen += Complex(grid.generators[k].p_set, sol.gen_q(static_cast<Eigen::Index>(k)));
  }
  Complex load(0.0, 0.0);
  for (const auto& d : grid.loads) load += Complex(d.p, d.q);
  const auto flows = branch_flows(grid, sol.v_mag, sol.v_ang);
  const Complex losses = flows.from.sum() + flows.to.sum();
  return gen - load - losses;
}

}  // namespace hilgnn::pf
