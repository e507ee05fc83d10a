#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace hilgnn::grid {

struct Bus {
  int id = 0;
  double v_min = 0.9;
  double v_max = 1.1;
  double base_kv = 1.0;

  bool operator==(const Bus&) const = default;
};

/// Series branch in pi-model form. Transformers are lines with tap != 1
/// (off-nominal ratio on the from side).
struct Line {
  int from_bus = 0;
  int to_bus = 0;
  double r = 0.0;
  double x = 0.0;
  double b_shunt = 0.0;
  double s_max = 0.0;
  double tap = 1.0;

  bool operator==(const Line&) const = default;
};

struct Generator {
  int bus = 0;
  double p_set = 0.0;
  double v_set = 1.0;
  double p_min = 0.0;
  double p_max = 0.0;
  double q_min = 0.0;
  double q_max = 0.0;

  bool operator==(const Generator&) const = default;
};

struct Load {
  int bus = 0;
  double p = 0.0;
  double q = 0.0;

  bool operator==(const Load&) const = default;
};

struct SlackRef {
  int bus = 0;
  double v_set = 1.0;
  double angle = 0.0;

  bool operator==(const SlackRef&) const = default;
};

/// Network in per-unit on `base_mva`. Immutable once loaded; pass by const&.
struct GridCase {
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Line> lines;
  std::vector<Generator> generators;
  std::vector<Load> loads;
  SlackRef slack;

  /// Position of bus `id` in `buses`; throws std::out_of_range when absent.
  [[nodiscard]] std::size_t bus_index(int id) const;
  /// Index into `generators` of the first generator at the slack bus, or -1.
  [[nodiscard]] int slack_generator() const;

  bool operator==(const GridCase&) const = default;
};

class CaseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public CaseError {
 public:
  explicit ValidationError(std::vector<std::string> violations);
  [[nodiscard]] const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  std::vector<std::string> violations_;
};

/// Lists every broken invariant; empty means the case is usable.
std::vector<std::string> validate(const GridCase& grid);

// Per-unit conversion. Scalar-templated so the same helpers serve plain and
// Eigen array arguments.
template <typename Scalar>
Scalar power_to_pu(const Scalar& s_mva, double base_mva) {
  if (!(base_mva > 0.0)) throw std::invalid_argument("base_mva must be positive");
  return s_mva / base_mva;
}

template <typename Scalar>
Scalar power_from_pu(const Scalar& s_pu, double base_mva) {
  if (!(base_mva > 0.0)) throw std::invalid_argument("base_mva must be positive");
  return s_pu * base_mva;
}

template <typename Scalar>
Scalar impedance_to_pu(const Scalar& z_ohm, double base_mva, double base_kv) {
  if (!(base_mva > 0.0) || !(base_kv > 0.0)) throw std::invalid_argument("bases must be positive");
  return z_ohm * (base_mva / (base_kv * base_kv));
}

template <typename Scalar>
Scalar impedance_from_pu(const Scalar& z_pu, double base_mva, double base_kv) {
  if (!(base_mva > 0.0) || !(base_kv > 0.0)) throw std::invalid_argument("bases must be positive");
  return z_pu * (base_kv * base_kv / base_mva);
}

enum class PowerUnit { MW, PerUnit };

/// Case-file JSON. Powers (loads, generator setpoints and limits, line
/// ratings) are in MW/MVAr/MVA when `unit` is MW; impedances are per-unit;
/// angles are radians. A `"power_unit": "pu"` key marks per-unit files.
nlohmann::json case_to_json(const GridCase& grid, PowerUnit unit = PowerUnit::MW);
GridCase case_from_json(const nlohmann::json& doc);

GridCase load_case(const std::filesystem::path& path);
void save_case(const GridCase& grid, const std::filesystem::path& path);

}  // namespace hilgnn::grid
