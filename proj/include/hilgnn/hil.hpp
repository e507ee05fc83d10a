#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hilgnn/dataset.hpp"

namespace hilgnn::hil {

struct CommandRow {
  std::int64_t cmd_id = 0;
  /// (p, q) per load in GridCase::loads order, p.u.
  std::vector<std::pair<double, double>> loads;
  /// Milliseconds since the Unix epoch.
  std::int64_t issued_at = 0;
};

struct MeasurementRow {
  std::int64_t cmd_id = 0;
  Eigen::VectorXd v_mag;
  Eigen::VectorXd v_ang;
  double slack_p = 0.0;
  double slack_q = 0.0;
  bool settled = false;
  std::string note;
};

nlohmann::json to_json(const CommandRow& row);
CommandRow command_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const MeasurementRow& row);
MeasurementRow measurement_from_json(const nlohmann::json& doc);

/// Sensor and plant mismatch model of the emulated hardware.
struct NoiseModel {
  /// Std of multiplicative Gaussian noise on voltage magnitudes.
  double sigma_v = 0.0;
  /// Std of additive Gaussian noise on angles, rad.
  double sigma_theta = 0.0;
  /// Std of multiplicative Gaussian noise on slack P and Q.
  double sigma_s = 0.0;
  /// Optional systematic per-bus offset on voltage magnitudes, p.u.
  std::vector<double> bias;
  /// Half-width of the uniform relative perturbation applied once to each
  /// line's r and x when the server starts.
  double param_perturb = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const NoiseModel& noise);
NoiseModel noise_from_json(const nlohmann::json& doc);

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Command/measurement tables shared by the collector and the server.
/// Rows are append-only; the cursor holds the last consumed cmd_id.
class Store {
 public:
  virtual ~Store() = default;

  /// Appends a command with the next cmd_id and returns that id.
  virtual std::int64_t issue(std::vector<std::pair<double, double>> loads) = 0;
  virtual std::vector<CommandRow> commands() = 0;
  virtual void publish(const MeasurementRow& row) = 0;
  virtual std::vector<MeasurementRow> measurements() = 0;
  virtual std::optional<MeasurementRow> measurement(std::int64_t cmd_id) = 0;
  virtual std::int64_t cursor() = 0;
  virtual void advance_cursor(std::int64_t cmd_id) = 0;
};

/// Directory-backed store: commands.jsonl, measurements.jsonl and cursor.
/// Each row is appended with a single O_APPEND write; readers skip a
/// trailing partial line. The cursor is replaced by rename.
class FileStore final : public Store {
 public:
  /// Opens `dir`, creating it and empty tables when missing.
  explicit FileStore(std::filesystem::path dir);

  std::int64_t issue(std::vector<std::pair<double, double>> loads) override;
  std::vector<CommandRow> commands() override;
  void publish(const MeasurementRow& row) override;
  std::vector<MeasurementRow> measurements() override;
  std::optional<MeasurementRow> measurement(std::int64_t cmd_id) override;
  std::int64_t cursor() override;
  void advance_cursor(std::int64_t cmd_id) override;

  [[nodiscard]] const std::filesystem::path& dir() const noexcept { return dir_; }

 private:
  template <typename Row, typename Parse>
  void refresh(const std::filesystem::path& file, std::uintmax_t& offset, std::vector<Row>& cache, Parse parse);

  std::filesystem::path dir_;
  std::uintmax_t cmd_offset_ = 0;
  std::uintmax_t meas_offset_ = 0;
  std::vector<CommandRow> cmd_cache_;
  std::vector<MeasurementRow> meas_cache_;
};

/// Emulated hardware: applies commanded loads to a privately perturbed copy
/// of the case, settles it with the power-flow solver, and publishes noisy
/// measurements.
class HilServer {
 public:
  HilServer(grid::GridCase base, NoiseModel noise, Store& store, pf::PfOptions pf_opts = {});

  /// Measurement for a command. Deterministic in (noise.seed, cmd_id).
  [[nodiscard]] MeasurementRow settle(const CommandRow& cmd) const;

  /// Consumes every command after the cursor; returns how many were handled.
  /// Commands that already have a measurement are skipped, not re-measured.
  std::size_t poll_once();

  /// Polls until `stop` becomes true.
  void run(const std::atomic<bool>& stop, std::chrono::milliseconds poll_interval = std::chrono::milliseconds(10));

  /// The perturbed case the server actually simulates.
  [[nodiscard]] const grid::GridCase& plant() const noexcept { return plant_; }

 private:
  grid::GridCase plant_;
  NoiseModel noise_;
  Store& store_;
  pf::PfOptions pf_opts_;
};

/// Returns `base` with every line's r and x scaled by independent
/// Uniform[1 - p, 1 + p] factors.
grid::GridCase perturb_lines(const grid::GridCase& base, double p, std::uint64_t seed);

class HilTimeout : public std::runtime_error {
 public:
  explicit HilTimeout(std::int64_t cmd_id);
  [[nodiscard]] std::int64_t cmd_id() const noexcept { return cmd_id_; }

 private:
  std::int64_t cmd_id_;
};

class UnsettledError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CollectConfig {
  std::size_t n = 1;
  data::MutationConfig mutation;
  std::chrono::milliseconds timeout{5000};
  std::chrono::milliseconds poll_interval{1};
};

struct CollectResult {
  std::vector<data::Sample> samples;
  /// Commands whose measurement came back unsettled and were redrawn.
  std::size_t redraws = 0;
};

/// Issues mutated-load commands one at a time and turns each settled
/// measurement into a hil Sample. Sample i draws from the stream seeded with
/// `mutation.rng_seed + i`, exactly as data::generate does.
CollectResult hil_collect(const grid::GridCase& base, const CollectConfig& cfg, Store& store);

}  // namespace hilgnn::hil
