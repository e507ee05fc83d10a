#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "hilgnn/dataset.hpp"
#include "hilgnn/hgnn.hpp"

namespace hilgnn::train {

using ad::Tensor;

enum class ConstraintKind : int { BusVoltageBand = 0, GenPCapacity = 1, GenQCapacity = 2, LineFlowLimit = 3 };
inline constexpr int kConstraintKinds = 4;
std::string_view to_string(ConstraintKind k);

/// One soft limit resolved against a case. `component` is the bus index,
/// generator index, or line index depending on `kind`.
struct ConstraintSpec {
  ConstraintKind kind;
  int component = 0;
  double lower = 0.0;
  double upper = 0.0;
};

/// Voltage bands for every bus, P/Q capability of the slack generator, and
/// apparent-power limits of every line.
std::vector<ConstraintSpec> resolve_constraints(const grid::GridCase& grid);

struct LossConfig {
  double lambda_bus = 1.0;
  double lambda_slack = 1.0;
  /// Weight per ConstraintKind; a zero weight removes that kind.
  std::array<double, kConstraintKinds> lambda_constraint = {0.1, 0.1, 0.1, 0.1};
};

/// Regression targets of one sample: bus (v_mag, v_ang - slack angle) and
/// slack (p, q).
struct Targets {
  Eigen::MatrixX2d bus;
  Eigen::MatrixX2d slack;
};
Targets targets(const grid::GridCase& grid, const pf::PfSolution& sol);

/// lambda_bus * mean over bus (V, theta) squared errors + lambda_slack *
/// mean over slack (P, Q) squared errors.
double supervised_loss(const gnn::Prediction& pred, const Targets& truth, double lambda_bus, double lambda_slack);

/// Hinge-squared violation relu(lower - v)^2 + relu(v - upper)^2 of one
/// constraint under a predicted state. Line limits apply at both ends.
double ctrloss(const grid::GridCase& grid, const gnn::Prediction& pred, const ConstraintSpec& spec);

/// Mini-batch prepared for the tape: merged graph plus constant targets and
/// bounds aligned with its rows.
struct Batch {
  gnn::HeteroGraph graph;
  Tensor target_bus, target_slack;
  Tensor weight_bus, weight_slack;
  Tensor v_min, v_max;
  Tensor p_min, p_max, q_min, q_max;
  ad::BranchSet branches;
  Tensor s_max;
  int size = 0;
};
Batch make_batch(std::span<const data::Sample* const> samples);
Batch make_batch(const std::vector<data::Sample>& samples);

struct LossTerms {
  ad::Var total;
  ad::Var sup_bus;
  ad::Var sup_slack;
  ad::Var ctr;
};

/// Mean over the batch of supervised loss plus weighted constraint losses.
LossTerms total_loss(const Batch& batch, const gnn::BoundParams& bound, ad::Tape& tape, const LossConfig& cfg);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const gnn::ModelParams& params, AdamConfig cfg = {});
  void step(gnn::ModelParams& params, const std::vector<Tensor>& grads, double lr);
  [[nodiscard]] long steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// lr_start * decay^(number of milestones <= epoch).
double multistep_lr(double lr_start, double decay, std::span<const int> milestones, int epoch);

/// Rescales `grads` in place so their global L2 norm is at most max_norm;
/// returns the norm before clipping. max_norm <= 0 disables clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

struct TrainConfig {
  int epochs = 500;
  int batch_size = 128;
  AdamConfig adam;
  double lr_start = 0.1;
  double lr_decay = 0.3;
  std::vector<int> lr_milestones = {250, 375, 450};
  std::uint64_t seed = 0;
  double clip_norm = 10.0;

  void validate() const;
};

/// Fine-tuning defaults: same protocol with a smaller starting rate.
TrainConfig finetune_defaults();

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_sup_bus = 0.0;
  double loss_sup_slack = 0.0;
  double loss_ctr = 0.0;
};

struct TrainResult {
  gnn::ModelParams params;
  std::vector<EpochRecord> history;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const std::vector<data::Sample>& dataset, const TrainConfig& cfg, const LossConfig& loss_cfg,
                  const gnn::ModelConfig& model_cfg, const EpochCallback& on_epoch = {});

/// Continues optimization of `params` on `dataset` with a fresh Adam state.
TrainResult finetune(const gnn::ModelParams& params, const std::vector<data::Sample>& dataset, const TrainConfig& cfg,
                     const LossConfig& loss_cfg, const EpochCallback& on_epoch = {});

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

}  // namespace hilgnn::train
