#include "hilgnn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace hilgnn::train {

using ad::Tape;
using ad::Var;

std::string_view to_string(ConstraintKind k) {
  switch (k) {
    case ConstraintKind::BusVoltageBand: return "bus_voltage_band";
    case ConstraintKind::GenPCapacity: return "gen_p_capacity";
    case ConstraintKind::GenQCapacity: return "gen_q_capacity";
    case ConstraintKind::LineFlowLimit: return "line_flow_limit";
  }
  return "?";
}

std::vector<ConstraintSpec> resolve_constraints(const grid::GridCase& grid) {
  std::vector<ConstraintSpec> out;
  for (std::size_t i = 0; i < grid.buses.size(); ++i)
    out.push_back({ConstraintKind::BusVoltageBand, static_cast<int>(i), grid.buses[i].v_min, grid.buses[i].v_max});
  if (const int g = grid.slack_generator(); g >= 0) {
    const auto& gen = grid.generators[g];
    out.push_back({ConstraintKind::GenPCapacity, g, gen.p_min, gen.p_max});
    out.push_back({ConstraintKind::GenQCapacity, g, gen.q_min, gen.q_max});
  }
  for (std::size_t k = 0; k < grid.lines.size(); ++k)
    out.push_back({ConstraintKind::LineFlowLimit, static_cast<int>(k), 0.0, grid.lines[k].s_max});
  return out;
}

Targets targets(const grid::GridCase& grid, const pf::PfSolution& sol) {
  const auto n = sol.v_mag.size();
  Targets t{Eigen::MatrixX2d(n, 2), Eigen::MatrixX2d(1, 2)};
  t.bus.col(0) = sol.v_mag;
  t.bus.col(1) = sol.v_ang.array() - grid.slack.angle;
  t.slack << sol.slack_p, sol.slack_q;
  return t;
}

double supervised_loss(const gnn::Prediction& pred, const Targets& truth, double lambda_bus, double lambda_slack) {
  if (pred.y_b.rows() != truth.bus.rows() || pred.y_s.rows() != truth.slack.rows())
    throw ad::ShapeError("supervised_loss: prediction and truth shapes differ");
  return lambda_bus * (pred.y_b - truth.bus).squaredNorm() / static_cast<double>(truth.bus.size()) +
         lambda_slack * (pred.y_s - truth.slack).squaredNorm() / static_cast<double>(truth.slack.size());
}

namespace {

double hinge2(double v, double lo, double hi) {
  const double below = std::max(lo - v, 0.0);
  const double above = std::max(v - hi, 0.0);
  return below * below + above * above;
}

}  // namespace

double ctrloss(const grid::GridCase& grid, const gnn::Prediction& pred, const ConstraintSpec& spec) {
  switch (spec.kind) {
    case ConstraintKind::BusVoltageBand:
      return hinge2(pred.y_b(spec.component, 0), spec.lower, spec.upper);
    case ConstraintKind::GenPCapacity:
      return hinge2(pred.y_s(0, 0), spec.lower, spec.upper);
    case ConstraintKind::GenQCapacity:
      return hinge2(pred.y_s(0, 1), spec.lower, spec.upper);
    case ConstraintKind::LineFlowLimit: {
      grid::GridCase one = grid;
      one.lines = {grid.lines.at(spec.component)};
      const auto flows = pf::branch_flows(one, pred.y_b.col(0), pred.y_b.col(1));
      return hinge2(std::abs(flows.from(0)), spec.lower, spec.upper) +
             hinge2(std::abs(flows.to(0)), spec.lower, spec.upper);
    }
  }
  return 0.0;
}

Batch make_batch(std::span<const data::Sample* const> samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  b.size = static_cast<int>(samples.size());
  std::vector<gnn::HeteroGraph> graphs;
  graphs.reserve(samples.size());
  Eigen::Index n_bus = 0, n_line = 0;
  for (const auto* s : samples) {
    graphs.push_back(gnn::build_graph(s->grid));
    n_bus += static_cast<Eigen::Index>(s->grid.buses.size());
    n_line += static_cast<Eigen::Index>(s->grid.lines.size());
  }
  b.graph = gnn::batch_graphs(graphs);
  const auto n_graphs = static_cast<Eigen::Index>(samples.size());
  constexpr double inf = std::numeric_limits<double>::infinity();

  b.target_bus.resize(n_bus, 2);
  b.weight_bus.resize(n_bus, 2);
  b.v_min.resize(n_bus, 1);
  b.v_max.resize(n_bus, 1);
  b.target_slack.resize(n_graphs, 2);
  b.weight_slack = Tensor::Constant(n_graphs, 2, 1.0 / (2.0 * static_cast<double>(n_graphs)));
  for (auto* t : {&b.p_min, &b.q_min}) t->setConstant(n_graphs, 1, -inf);
  for (auto* t : {&b.p_max, &b.q_max}) t->setConstant(n_graphs, 1, inf);
  b.s_max.resize(n_line, 2);
  b.branches.yff.resize(n_line);
  b.branches.yft.resize(n_line);
  b.branches.ytf.resize(n_line);
  b.branches.ytt.resize(n_line);

  Eigen::Index bus_off = 0, line_off = 0;
  for (Eigen::Index g = 0; g < n_graphs; ++g) {
    const auto& s = *samples[static_cast<std::size_t>(g)];
    const auto nb = static_cast<Eigen::Index>(s.grid.buses.size());
    if (s.solution.v_mag.size() != nb) throw std::invalid_argument("make_batch: solution size mismatch");
    const Targets t = targets(s.grid, s.solution);
    b.target_bus.middleRows(bus_off, nb) = t.bus;
    b.weight_bus.middleRows(bus_off, nb).setConstant(1.0 / (2.0 * static_cast<double>(nb * n_graphs)));
    b.target_slack.row(g) = t.slack.row(0);
    for (Eigen::Index i = 0; i < nb; ++i) {
      b.v_min(bus_off + i, 0) = s.grid.buses[i].v_min;
      b.v_max(bus_off + i, 0) = s.grid.buses[i].v_max;
    }
    if (const int sg = s.grid.slack_generator(); sg >= 0) {
      const auto& gen = s.grid.generators[sg];
      b.p_min(g, 0) = gen.p_min;
      b.p_max(g, 0) = gen.p_max;
      b.q_min(g, 0) = gen.q_min;
      b.q_max(g, 0) = gen.q_max;
    }
    for (const auto& line : s.grid.lines) {
      b.branches.from.push_back(static_cast<int>(bus_off + s.grid.bus_index(line.from_bus)));
      b.branches.to.push_back(static_cast<int>(bus_off + s.grid.bus_index(line.to_bus)));
      const auto a = pf::branch_admittance(line);
      b.branches.yff(line_off) = a.ff;
      b.branches.yft(line_off) = a.ft;
      b.branches.ytf(line_off) = a.tf;
      b.branches.ytt(line_off) = a.tt;
      b.s_max.row(line_off).setConstant(line.s_max);
      ++line_off;
    }
    bus_off += nb;
  }
  return b;
}

Batch make_batch(const std::vector<data::Sample>& samples) {
  std::vector<const data::Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return make_batch(std::span<const data::Sample* const>(ptrs));
}

LossTerms total_loss(const Batch& b, const gnn::BoundParams& bound, Tape& tape, const LossConfig& cfg) {
  const auto fwd = gnn::forward(bound, b.graph, tape);
  LossTerms out;
  out.sup_bus = ad::scale(ad::weighted_sq_error(fwd.y_bus, b.target_bus, b.weight_bus), cfg.lambda_bus);
  out.sup_slack = ad::scale(ad::weighted_sq_error(fwd.y_slack, b.target_slack, b.weight_slack), cfg.lambda_slack);

  const double per_graph = 1.0 / static_cast<double>(b.size);
  std::vector<Var> parts;
  auto add_term = [&](ConstraintKind kind, Var violations) {
    parts.push_back(ad::scale(ad::sum(violations), cfg.lambda_constraint[static_cast<int>(kind)] * per_graph));
  };
  const auto& lam = cfg.lambda_constraint;
  if (lam[0] != 0.0)
    add_term(ConstraintKind::BusVoltageBand, ad::hinge_sq(ad::slice_cols(fwd.y_bus, 0, 1), b.v_min, b.v_max));
  if (lam[1] != 0.0)
    add_term(ConstraintKind::GenPCapacity, ad::hinge_sq(ad::slice_cols(fwd.y_slack, 0, 1), b.p_min, b.p_max));
  if (lam[2] != 0.0)
    add_term(ConstraintKind::GenQCapacity, ad::hinge_sq(ad::slice_cols(fwd.y_slack, 1, 1), b.q_min, b.q_max));
  if (lam[3] != 0.0 && b.branches.size() > 0)
    add_term(ConstraintKind::LineFlowLimit, ad::hinge_sq(ad::branch_apparent_power(fwd.y_bus, b.branches),
                                                         Tensor::Zero(b.s_max.rows(), 2), b.s_max));
  out.ctr = tape.constant(Tensor::Zero(1, 1));
  for (const Var& p : parts) out.ctr = ad::add(out.ctr, p);
  out.total = ad::add(ad::add(out.sup_bus, out.sup_slack), out.ctr);
  return out;
}

Adam::Adam(const gnn::ModelParams& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& t : params.tensors) {
    m_.push_back(Tensor::Zero(t.rows(), t.cols()));
    v_.push_back(Tensor::Zero(t.rows(), t.cols()));
  }
}

void Adam::step(gnn::ModelParams& params, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params.tensors.size()) throw std::invalid_argument("Adam::step: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * grads[k];
    v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * grads[k].cwiseAbs2();
    const auto update = (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + cfg_.eps);
    params.tensors[k].array() -= lr * update;
  }
}

double multistep_lr(double lr_start, double decay, std::span<const int> milestones, int epoch) {
  double lr = lr_start;
  for (int m : milestones)
    if (epoch >= m) lr *= decay;
  return lr;
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) g *= f;
  }
  return norm;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (!(lr_start >= 0.0) || !(lr_decay > 0.0)) throw std::invalid_argument("learning-rate settings must be positive");
  if (!std::is_sorted(lr_milestones.begin(), lr_milestones.end()))
    throw std::invalid_argument("lr milestones must be sorted");
  if (!lr_milestones.empty() && lr_milestones.back() >= epochs && epochs > 0)
    throw std::invalid_argument("lr milestones must be below the epoch count");
}

TrainConfig finetune_defaults() {
  TrainConfig cfg;
  cfg.epochs = 100;
  cfg.lr_start = 0.01;
  cfg.lr_milestones = {50, 75, 90};
  return cfg;
}

namespace {

TrainResult fit(gnn::ModelParams params, const std::vector<data::Sample>& dataset, const TrainConfig& cfg,
                const LossConfig& loss_cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  TrainResult res;
  Adam adam(params, cfg.adam);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = multistep_lr(cfg.lr_start, cfg.lr_decay, cfg.lr_milestones, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const data::Sample*> members;
      for (std::size_t k = start; k < stop; ++k) members.push_back(&dataset[order[k]]);
      const Batch batch = make_batch(std::span<const data::Sample* const>(members));

      Tape tape;
      const auto bound = gnn::bind(tape, params);
      LossTerms terms;
      try {
        terms = total_loss(batch, bound, tape, loss_cfg);
        tape.backward(terms.total);
      } catch (const ad::NumericError& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + ", batch at " + std::to_string(start) + ": " + e.what());
      }
      const double loss = terms.total.value()(0, 0);
      if (!std::isfinite(loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch at " + std::to_string(start));

      std::vector<Tensor> grads;
      grads.reserve(bound.vars.size());
      for (const Var& v : bound.vars) grads.push_back(tape.grad(v));
      clip_global_norm(grads, cfg.clip_norm);
      adam.step(params, grads, lr);

      const double w = static_cast<double>(members.size()) / static_cast<double>(dataset.size());
      rec.loss_total += w * loss;
      rec.loss_sup_bus += w * terms.sup_bus.value()(0, 0);
      rec.loss_sup_slack += w * terms.sup_slack.value()(0, 0);
      rec.loss_ctr += w * terms.ctr.value()(0, 0);
    }
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  res.params = std::move(params);
  return res;
}

}  // namespace

TrainResult train(const std::vector<data::Sample>& dataset, const TrainConfig& cfg, const LossConfig& loss_cfg,
                  const gnn::ModelConfig& model_cfg, const EpochCallback& on_epoch) {
  return fit(gnn::init_params(model_cfg), dataset, cfg, loss_cfg, on_epoch);
}

TrainResult finetune(const gnn::ModelParams& params, const std::vector<data::Sample>& dataset, const TrainConfig& cfg,
                     const LossConfig& loss_cfg, const EpochCallback& on_epoch) {
  return fit(params, dataset, cfg, loss_cfg, on_epoch);
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(17);
  os << "epoch,lr,loss_total,loss_sup_bus,loss_sup_slack,loss_ctr\n";
  for (const auto& r : history)
    os << r.epoch << ',' << r.lr << ',' << r.loss_total << ',' << r.loss_sup_bus << ',' << r.loss_sup_slack << ','
       << r.loss_ctr << '\n';
}

}  // namespace hilgnn::train
