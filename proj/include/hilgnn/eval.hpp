#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hilgnn/trainer.hpp"

namespace hilgnn::eval {

struct NseResult {
  double value = 0.0;
  /// False when the truth was all-zero and plain squared error was returned.
  bool normalized = true;
};

/// Normalized squared error ||pred - truth||^2 / ||truth||^2.
template <typename DerivedA, typename DerivedB>
NseResult nse(const Eigen::MatrixBase<DerivedA>& pred, const Eigen::MatrixBase<DerivedB>& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("nse: length mismatch");
  const double err = (pred - truth).squaredNorm();
  const double ref = truth.squaredNorm();
  if (ref == 0.0) return {err, false};
  return {err / ref, true};
}

inline NseResult nse(double pred, double truth) {
  return nse(Eigen::Matrix<double, 1, 1>(pred), Eigen::Matrix<double, 1, 1>(truth));
}

struct SampleMetrics {
  double nse_v = 0.0;
  double nse_theta = 0.0;
  double nse_p = 0.0;
  double nse_q = 0.0;
  /// Quantities whose truth was all-zero (plain squared error reported).
  std::vector<std::string> fallback;

  [[nodiscard]] double total() const { return nse_v + nse_theta + nse_p + nse_q; }
};

/// NSE per quantity over all buses of one sample, then averaged over
/// samples. Total is the sum of the four means.
struct MetricsReport {
  std::string label;
  std::vector<SampleMetrics> per_sample;
  double nse_v = 0.0;
  double nse_theta = 0.0;
  double nse_p = 0.0;
  double nse_q = 0.0;
  double total = 0.0;
  /// Mean squared error per bus position (samples sharing the topology).
  std::vector<double> bus_v_mse;
  std::vector<double> bus_theta_mse;
  std::string test_hash;
  /// Differences against a baseline report (this minus baseline), if any.
  std::optional<nlohmann::json> baseline_delta;
};

MetricsReport evaluate(const gnn::ModelParams& params, const std::vector<data::Sample>& test,
                       std::string label = "evaluate");

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& doc);
/// Plain-text table of the mean metrics.
std::string render_table(const MetricsReport& report);
/// Bar chart of per-bus voltage-magnitude and angle MSE.
std::string render_svg(const MetricsReport& report);

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScenarioConfig {
  train::TrainConfig pretrain;
  train::TrainConfig finetune = train::finetune_defaults();
  train::LossConfig loss;
  gnn::ModelConfig model;
};

struct ScenarioOutcome {
  MetricsReport report;
  gnn::ModelParams params;
  std::vector<train::EpochRecord> pretrain_history;
  std::vector<train::EpochRecord> finetune_history;
};

/// Train on synthetic data only, evaluate on hardware data.
ScenarioOutcome run_scenario_1(const std::vector<data::Sample>& synthetic_train,
                               const std::vector<data::Sample>& hil_test, const ScenarioConfig& cfg);

/// Pre-train (or reuse `pretrained`), fine-tune on hardware data, evaluate on
/// the same hardware test set as `baseline`. Refuses a test set whose hash
/// differs from the baseline's and any training sample that also appears in
/// the test set.
ScenarioOutcome run_scenario_2(const std::vector<data::Sample>& synthetic_train,
                               const std::vector<data::Sample>& hil_finetune,
                               const std::vector<data::Sample>& hil_test, const ScenarioConfig& cfg,
                               const MetricsReport& baseline, const gnn::ModelParams* pretrained = nullptr);

nlohmann::json metric_delta(const MetricsReport& report, const MetricsReport& baseline);

}  // namespace hilgnn::eval
