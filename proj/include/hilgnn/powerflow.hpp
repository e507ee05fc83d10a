#pragma once

#include <complex>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "hilgnn/grid.hpp"

namespace hilgnn::pf {

using Complex = std::complex<double>;
using Ybus = Eigen::MatrixXcd;

/// Dense nodal admittance matrix, rows/cols in `grid.buses` order.
/// Pi-model stamps with the tap ratio on the from side.
Ybus build_ybus(const grid::GridCase& grid);

/// Pi-model two-port admittances of one branch:
/// [I_f; I_t] = [ff ft; tf tt] [V_f; V_t].
struct BranchAdmittance {
  Complex ff, ft, tf, tt;
};
BranchAdmittance branch_admittance(const grid::Line& line);

/// Net complex power injections S_i = V_i * conj(sum_j Y_ij V_j) in polar form:
/// P_i = V_i sum_j V_j (G_ij cos t_ij + B_ij sin t_ij),
/// Q_i = V_i sum_j V_j (G_ij sin t_ij - B_ij cos t_ij).
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 2> power_injections(const Ybus& y,
                                                                            const Eigen::MatrixBase<Derived>& v_mag,
                                                                            const Eigen::MatrixBase<Derived>& v_ang) {
  using Scalar = typename Derived::Scalar;
  using std::cos;
  using std::sin;
  const Eigen::Index n = y.rows();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 2> pq(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    Scalar p(0), q(0);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double g = y(i, j).real();
      const double b = y(i, j).imag();
      if (g == 0.0 && b == 0.0) continue;
      const Scalar t = v_ang(i) - v_ang(j);
      const Scalar c = cos(t), s = sin(t);
      p += v_mag(j) * (g * c + b * s);
      q += v_mag(j) * (g * s - b * c);
    }
    pq(i, 0) = v_mag(i) * p;
    pq(i, 1) = v_mag(i) * q;
  }
  return pq;
}

/// Convenience overload that builds the admittance matrix first.
Eigen::MatrixX2d power_injections(const grid::GridCase& grid, const Eigen::VectorXd& v_mag,
                                  const Eigen::VectorXd& v_ang);

struct PfOptions {
  double tol = 1e-8;
  int max_iter = 20;
  /// Switch PV buses to PQ at the violated reactive limit and re-solve.
  bool enforce_q_limits = false;
};

struct PfSolution {
  Eigen::VectorXd v_mag;
  Eigen::VectorXd v_ang;
  double slack_p = 0.0;
  double slack_q = 0.0;
  /// Reactive output per generator in `grid.generators` order (slack
  /// generator included); generators sharing a bus split it evenly.
  Eigen::VectorXd gen_q;
  int iterations = 0;
  double max_mismatch = 0.0;
  /// Infinity-norm mismatch before each Newton update, then the final one.
  std::vector<double> mismatch_history;
};

class PowerFlowError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConvergenceError : public PowerFlowError {
 public:
  ConvergenceError(int iterations, double mismatch);
  [[nodiscard]] double last_mismatch() const noexcept { return mismatch_; }

 private:
  double mismatch_;
};

class SingularJacobian : public PowerFlowError {
 public:
  using PowerFlowError::PowerFlowError;
};

/// Newton-Raphson AC power flow in polar coordinates from a flat start.
PfSolution solve_pf(const grid::GridCase& grid, const PfOptions& opts = {});

/// Complex flows at both ends of each line, p.u.
struct BranchFlows {
  Eigen::VectorXcd from;
  Eigen::VectorXcd to;
};
BranchFlows branch_flows(const grid::GridCase& grid, const Eigen::VectorXd& v_mag, const Eigen::VectorXd& v_ang);

/// Sum of generation minus load minus branch losses (complex); zero on a
/// consistent solution.
Complex power_balance(const grid::GridCase& grid, const PfSolution& sol);

}  // namespace hilgnn::pf
