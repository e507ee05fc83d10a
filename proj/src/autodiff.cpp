#include "hilgnn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace hilgnn::ad {

namespace {

std::string shape(const Tensor& t) {
  std::ostringstream os;
  os << t.rows() << "x" << t.cols();
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, shape(a) + " vs " + shape(b));
}

void same_tape(const char* op, Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::logic_error(std::string(op) + ": operands on different tapes");
}

Tensor scalar(double x) { return Tensor::Constant(1, 1, x); }

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) { return record(std::move(value), {}, nullptr, "constant"); }

Var Tape::variable(Tensor value) {
  Var v = record(std::move(value), {}, nullptr, "variable");
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn fn, const char* op) {
  if (!value.allFinite()) throw NumericError(std::string(op) + " produced a non-finite value");
  Node node;
  node.value = std::move(value);
  for (int i : inputs) node.requires_grad = node.requires_grad || nodes_[i].requires_grad;
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.has_grad) {
    n.grad += g;
  } else {
    n.grad = g;
    n.has_grad = true;
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.has_grad) return Tensor::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward: loss belongs to another tape");
  const Tensor& lv = nodes_.at(loss.id).value;
  if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward: loss must be 1x1, got " + shape(lv));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(loss.id, scalar(1.0));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

Var matmul(Var a, Var b) {
  same_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", shape(av) + " * " + shape(bv));
  return a.tape->record(av * bv, {a.id, b.id},
                        [a, b](Tape& t, const Tensor& g) {
                          t.accumulate(a.id, g * b.value().transpose());
                          t.accumulate(b.id, a.value().transpose() * g);
                        },
                        "matmul");
}

Var linear(Var x, Var w) {
  same_tape("linear", x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.cols() != wv.cols()) shape_error("linear", shape(xv) + " * (" + shape(wv) + ")^T");
  return x.tape->record(xv * wv.transpose(), {x.id, w.id},
                        [x, w](Tape& t, const Tensor& g) {
                          if (t.requires_grad(x.id)) t.accumulate(x.id, g * w.value());
                          if (t.requires_grad(w.id)) t.accumulate(w.id, g.transpose() * x.value());
                        },
                        "linear");
}

Var add(Var a, Var b) {
  same_tape("add", a, b);
  same_shape("add", a.value(), b.value());
  return a.tape->record(a.value() + b.value(), {a.id, b.id},
                        [a, b](Tape& t, const Tensor& g) {
                          t.accumulate(a.id, g);
                          t.accumulate(b.id, g);
                        },
                        "add");
}

Var add_row(Var a, Var row) {
  same_tape("add_row", a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) shape_error("add_row", shape(a.value()) + " + " + shape(row.value()));
  Tensor out = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(out), {a.id, row.id},
                        [a, row](Tape& t, const Tensor& g) {
                          t.accumulate(a.id, g);
                          t.accumulate(row.id, g.colwise().sum());
                        },
                        "add_row");
}

Var scale(Var a, double c) {
  return a.tape->record(a.value() * c, {a.id}, [a, c](Tape& t, const Tensor& g) { t.accumulate(a.id, g * c); },
                        "scale");
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) shape_error("concat", "no operands");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    same_tape("concat", parts[0], p);
    if (p.rows() != rows) shape_error("concat", "row count mismatch");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), ids,
                               [inputs, offsets](Tape& t, const Tensor& g) {
                                 for (std::size_t k = 0; k < inputs.size(); ++k)
                                   t.accumulate(inputs[k].id, g.middleCols(offsets[k], inputs[k].cols()));
                               },
                               "concat");
}

Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) shape_error("slice_cols", "range outside " + shape(a.value()));
  return a.tape->record(a.value().middleCols(start, count), {a.id},
                        [a, start, count](Tape& t, const Tensor& g) {
                          Tensor full = Tensor::Zero(a.rows(), a.cols());
                          full.middleCols(start, count) = g;
                          t.accumulate(a.id, full);
                        },
                        "slice_cols");
}

Var leaky_relu(Var a, double slope) {
  const Tensor& x = a.value();
  Tensor slopes = (x.array() > 0.0).select(Tensor::Ones(x.rows(), x.cols()), slope);
  Tensor out = x.cwiseProduct(slopes);
  return a.tape->record(std::move(out), {a.id},
                        [a, slopes](Tape& t, const Tensor& g) { t.accumulate(a.id, g.cwiseProduct(slopes)); },
                        "leaky_relu");
}

Var relu(Var a) { return leaky_relu(a, 0.0); }

Var exp(Var a) {
  Tensor out = a.value().array().exp().matrix();
  Tensor saved = out;
  return a.tape->record(std::move(out), {a.id},
                        [a, saved](Tape& t, const Tensor& g) { t.accumulate(a.id, g.cwiseProduct(saved)); }, "exp");
}

Var segment_softmax(Var logits, std::span<const int> segment, Eigen::Index n) {
  const Tensor& z = logits.value();
  if (z.cols() != 1 || z.rows() != static_cast<Eigen::Index>(segment.size()))
    shape_error("segment_softmax", "logits " + shape(z) + " vs " + std::to_string(segment.size()) + " segment ids");
  for (int s : segment)
    if (s < 0 || s >= n) shape_error("segment_softmax", "segment id out of range");

  Eigen::VectorXd seg_max = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
  for (Eigen::Index e = 0; e < z.rows(); ++e) seg_max(segment[e]) = std::max(seg_max(segment[e]), z(e, 0));
  Tensor y(z.rows(), 1);
  Eigen::VectorXd denom = Eigen::VectorXd::Zero(n);
  for (Eigen::Index e = 0; e < z.rows(); ++e) {
    y(e, 0) = std::exp(z(e, 0) - seg_max(segment[e]));
    denom(segment[e]) += y(e, 0);
  }
  for (Eigen::Index e = 0; e < z.rows(); ++e) y(e, 0) /= denom(segment[e]);

  std::vector<int> seg(segment.begin(), segment.end());
  Tensor saved = y;
  return logits.tape->record(std::move(y), {logits.id},
                             [logits, seg = std::move(seg), saved, n](Tape& t, const Tensor& g) {
                               Eigen::VectorXd dot = Eigen::VectorXd::Zero(n);
                               for (std::size_t e = 0; e < seg.size(); ++e)
                                 dot(seg[e]) += g(static_cast<Eigen::Index>(e), 0) * saved(static_cast<Eigen::Index>(e), 0);
                               Tensor gz(saved.rows(), 1);
                               for (std::size_t e = 0; e < seg.size(); ++e) {
                                 const auto i = static_cast<Eigen::Index>(e);
                                 gz(i, 0) = saved(i, 0) * (g(i, 0) - dot(seg[e]));
                               }
                               t.accumulate(logits.id, gz);
                             },
                             "segment_softmax");
}

Var l2_normalize(Var a, double eps) {
  const Tensor& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm();
  Tensor out = (x.array().colwise() / (norms.array() + eps)).matrix();
  return a.tape->record(std::move(out), {a.id},
                        [a, norms, eps](Tape& t, const Tensor& g) {
                          const Tensor& xv = a.value();
                          Tensor gx(xv.rows(), xv.cols());
                          for (Eigen::Index r = 0; r < xv.rows(); ++r) {
                            const double n = norms(r);
                            const double d = n + eps;
                            gx.row(r) = g.row(r) / d;
                            if (n > 0.0) gx.row(r) -= xv.row(r) * (xv.row(r).dot(g.row(r)) / (n * d * d));
                          }
                          t.accumulate(a.id, gx);
                        },
                        "l2_normalize");
}

Var mse(Var a, const Tensor& target) {
  same_shape("mse", a.value(), target);
  const double count = static_cast<double>(target.size());
  if (count == 0) shape_error("mse", "empty operand");
  Tensor diff = a.value() - target;
  const double value = diff.squaredNorm() / count;
  return a.tape->record(scalar(value), {a.id},
                        [a, diff, count](Tape& t, const Tensor& g) { t.accumulate(a.id, diff * (2.0 * g(0, 0) / count)); },
                        "mse");
}

Var weighted_sq_error(Var a, const Tensor& target, const Tensor& weights) {
  same_shape("weighted_sq_error", a.value(), target);
  same_shape("weighted_sq_error", a.value(), weights);
  Tensor diff = a.value() - target;
  const double value = (weights.array() * diff.array().square()).sum();
  Tensor dvalue = 2.0 * weights.cwiseProduct(diff);
  return a.tape->record(scalar(value), {a.id},
                        [a, dvalue](Tape& t, const Tensor& g) { t.accumulate(a.id, dvalue * g(0, 0)); },
                        "weighted_sq_error");
}

Var sum(Var a) {
  return a.tape->record(scalar(a.value().sum()), {a.id},
                        [a](Tape& t, const Tensor& g) {
                          t.accumulate(a.id, Tensor::Constant(a.rows(), a.cols(), g(0, 0)));
                        },
                        "sum");
}

Var hinge_sq(Var a, const Tensor& lower, const Tensor& upper) {
  same_shape("hinge_sq", a.value(), lower);
  same_shape("hinge_sq", a.value(), upper);
  const Tensor& x = a.value();
  Tensor below = (lower - x).cwiseMax(0.0);
  Tensor above = (x - upper).cwiseMax(0.0);
  Tensor out = below.cwiseAbs2() + above.cwiseAbs2();
  Tensor slope = 2.0 * (above - below);
  return a.tape->record(std::move(out), {a.id},
                        [a, slope](Tape& t, const Tensor& g) { t.accumulate(a.id, g.cwiseProduct(slope)); },
                        "hinge_sq");
}

Var gather_rows(Var a, std::span<const int> index) {
  const Tensor& x = a.value();
  Tensor out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] < 0 || index[e] >= x.rows()) shape_error("gather_rows", "index out of range");
    out.row(static_cast<Eigen::Index>(e)) = x.row(index[e]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return a.tape->record(std::move(out), {a.id},
                        [a, idx = std::move(idx)](Tape& t, const Tensor& g) {
                          Tensor gx = Tensor::Zero(a.rows(), a.cols());
                          for (std::size_t e = 0; e < idx.size(); ++e) gx.row(idx[e]) += g.row(static_cast<Eigen::Index>(e));
                          t.accumulate(a.id, gx);
                        },
                        "gather_rows");
}

Var scatter_add_rows(Var a, std::span<const int> index, Eigen::Index n) {
  const Tensor& x = a.value();
  if (x.rows() != static_cast<Eigen::Index>(index.size()))
    shape_error("scatter_add_rows", shape(x) + " vs " + std::to_string(index.size()) + " indices");
  Tensor out = Tensor::Zero(n, x.cols());
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] < 0 || index[e] >= n) shape_error("scatter_add_rows", "index out of range");
    out.row(index[e]) += x.row(static_cast<Eigen::Index>(e));
  }
  std::vector<int> idx(index.begin(), index.end());
  return a.tape->record(std::move(out), {a.id},
                        [a, idx = std::move(idx)](Tape& t, const Tensor& g) {
                          Tensor gx(static_cast<Eigen::Index>(idx.size()), g.cols());
                          for (std::size_t e = 0; e < idx.size(); ++e) gx.row(static_cast<Eigen::Index>(e)) = g.row(idx[e]);
                          t.accumulate(a.id, gx);
                        },
                        "scatter_add_rows");
}

Var row_scale(Var a, Var s) {
  same_tape("row_scale", a, s);
  if (s.cols() != 1 || s.rows() != a.rows()) shape_error("row_scale", shape(a.value()) + " by " + shape(s.value()));
  Tensor out = (a.value().array().colwise() * s.value().col(0).array()).matrix();
  return a.tape->record(std::move(out), {a.id, s.id},
                        [a, s](Tape& t, const Tensor& g) {
                          if (t.requires_grad(a.id))
                            t.accumulate(a.id, (g.array().colwise() * s.value().col(0).array()).matrix());
                          if (t.requires_grad(s.id)) t.accumulate(s.id, g.cwiseProduct(a.value()).rowwise().sum());
                        },
                        "row_scale");
}

namespace {

// Apparent power at end `a` of a branch whose far end is `b`, with
// partials w.r.t. (V_a, V_b, theta_a - theta_b).
struct EndFlow {
  double s;
  double ds_dva, ds_dvb, ds_dd;
};

EndFlow end_flow(double va, double vb, double delta, std::complex<double> yaa, std::complex<double> yab) {
  const double gaa = yaa.real(), baa = yaa.imag();
  const double g = yab.real(), b = yab.imag();
  const double c = std::cos(delta), sn = std::sin(delta);
  const double p = gaa * va * va + va * vb * (g * c + b * sn);
  const double q = -baa * va * va + va * vb * (g * sn - b * c);
  const double dp_dva = 2.0 * gaa * va + vb * (g * c + b * sn);
  const double dp_dvb = va * (g * c + b * sn);
  const double dp_dd = va * vb * (-g * sn + b * c);
  const double dq_dva = -2.0 * baa * va + vb * (g * sn - b * c);
  const double dq_dvb = va * (g * sn - b * c);
  const double dq_dd = va * vb * (g * c + b * sn);
  const double s = std::hypot(p, q);
  if (s < 1e-12) return {s, 0.0, 0.0, 0.0};
  return {s, (p * dp_dva + q * dq_dva) / s, (p * dp_dvb + q * dq_dvb) / s, (p * dp_dd + q * dq_dd) / s};
}

}  // namespace

Var branch_apparent_power(Var vm_va, const BranchSet& br) {
  const Tensor& x = vm_va.value();
  if (x.cols() != 2) shape_error("branch_apparent_power", "bus state must be n x 2, got " + shape(x));
  const Eigen::Index m = br.size();
  if (static_cast<Eigen::Index>(br.to.size()) != m || br.yff.size() != m || br.yft.size() != m ||
      br.ytf.size() != m || br.ytt.size() != m)
    shape_error("branch_apparent_power", "inconsistent branch arrays");
  Tensor out(m, 2);
  // Jacobian rows per branch end: d|S|/d(Vf, Vt, theta_f, theta_t).
  Eigen::MatrixXd jf(m, 4), jt(m, 4);
  for (Eigen::Index k = 0; k < m; ++k) {
    const int f = br.from[k], t = br.to[k];
    if (f < 0 || t < 0 || f >= x.rows() || t >= x.rows()) shape_error("branch_apparent_power", "bus index out of range");
    const double vf = x(f, 0), vt = x(t, 0), d = x(f, 1) - x(t, 1);
    const EndFlow ef = end_flow(vf, vt, d, br.yff(k), br.yft(k));
    const EndFlow et = end_flow(vt, vf, -d, br.ytt(k), br.ytf(k));
    out(k, 0) = ef.s;
    out(k, 1) = et.s;
    jf.row(k) << ef.ds_dva, ef.ds_dvb, ef.ds_dd, -ef.ds_dd;
    jt.row(k) << et.ds_dvb, et.ds_dva, -et.ds_dd, et.ds_dd;
  }
  return vm_va.tape->record(std::move(out), {vm_va.id},
                            [vm_va, from = br.from, to = br.to, jf, jt](Tape& t, const Tensor& g) {
                              Tensor gx = Tensor::Zero(vm_va.rows(), 2);
                              for (Eigen::Index k = 0; k < jf.rows(); ++k) {
                                const int f = from[k], o = to[k];
                                for (const auto& [jac, gk] : {std::pair{&jf, g(k, 0)}, std::pair{&jt, g(k, 1)}}) {
                                  gx(f, 0) += gk * (*jac)(k, 0);
                                  gx(o, 0) += gk * (*jac)(k, 1);
                                  gx(f, 1) += gk * (*jac)(k, 2);
                                  gx(o, 1) += gk * (*jac)(k, 3);
                                }
                              }
                              t.accumulate(vm_va.id, gx);
                            },
                            "branch_apparent_power");
}

}  // namespace hilgnn::ad
