#include "hilgnn/grid.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace hilgnn::grid {

using nlohmann::json;

std::size_t GridCase::bus_index(int id) const {
  for (std::size_t i = 0; i < buses.size(); ++i)
    if (buses[i].id == id) return i;
  throw std::out_of_range("unknown bus id " + std::to_string(id));
}

int GridCase::slack_generator() const {
  for (std::size_t g = 0; g < generators.size(); ++g)
    if (generators[g].bus == slack.bus) return static_cast<int>(g);
  return -1;
}

namespace {

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += "; ";
    out += s;
  }
  return out;
}

bool finite_all(std::initializer_list<double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> violations)
    : CaseError("invalid case: " + join(violations)), violations_(std::move(violations)) {}

std::vector<std::string> validate(const GridCase& grid) {
  std::vector<std::string> out;
  if (!(grid.base_mva > 0.0)) out.push_back("base_mva must be positive");

  std::set<int> ids;
  for (const auto& b : grid.buses) {
    if (!ids.insert(b.id).second) out.push_back("duplicate bus id " + std::to_string(b.id));
    if (!(b.v_min > 0.0 && b.v_min <= b.v_max))
      out.push_back("bus " + std::to_string(b.id) + ": requires 0 < v_min <= v_max");
    if (!(b.base_kv > 0.0)) out.push_back("bus " + std::to_string(b.id) + ": base_kv must be positive");
  }
  auto known = [&](int id) { return ids.count(id) != 0; };

  for (std::size_t i = 0; i < grid.lines.size(); ++i) {
    const auto& l = grid.lines[i];
    const std::string tag = "line " + std::to_string(i);
    if (!known(l.from_bus)) out.push_back(tag + ": unknown from_bus " + std::to_string(l.from_bus));
    if (!known(l.to_bus)) out.push_back(tag + ": unknown to_bus " + std::to_string(l.to_bus));
    if (l.from_bus == l.to_bus) out.push_back(tag + ": from_bus equals to_bus");
    if (l.x == 0.0) out.push_back(tag + ": x must be non-zero");
    if (!(l.s_max > 0.0)) out.push_back(tag + ": s_max must be positive");
    if (!(l.tap > 0.0)) out.push_back(tag + ": tap must be positive");
    if (!finite_all({l.r, l.x, l.b_shunt, l.s_max, l.tap})) out.push_back(tag + ": non-finite parameter");
  }
  for (std::size_t i = 0; i < grid.generators.size(); ++i) {
    const auto& g = grid.generators[i];
    const std::string tag = "generator " + std::to_string(i);
    if (!known(g.bus)) out.push_back(tag + ": unknown bus " + std::to_string(g.bus));
    if (!(g.p_min <= g.p_max)) out.push_back(tag + ": p_min > p_max");
    if (!(g.q_min <= g.q_max)) out.push_back(tag + ": q_min > q_max");
    if (!(g.v_set > 0.0)) out.push_back(tag + ": v_set must be positive");
    if (!finite_all({g.p_set, g.v_set, g.p_min, g.p_max, g.q_min, g.q_max}))
      out.push_back(tag + ": non-finite parameter");
  }
  for (std::size_t i = 0; i < grid.loads.size(); ++i) {
    const auto& d = grid.loads[i];
    const std::string tag = "load " + std::to_string(i);
    if (!known(d.bus)) out.push_back(tag + ": unknown bus " + std::to_string(d.bus));
    if (!finite_all({d.p, d.q})) out.push_back(tag + ": non-finite power");
  }
  if (!known(grid.slack.bus)) out.push_back("slack: unknown bus " + std::to_string(grid.slack.bus));
  if (!(grid.slack.v_set > 0.0) || !std::isfinite(grid.slack.angle))
    out.push_back("slack: invalid setpoint");
  return out;
}

json case_to_json(const GridCase& grid, PowerUnit unit) {
  const double k = unit == PowerUnit::MW ? grid.base_mva : 1.0;
  json doc;
  doc["base_mva"] = grid.base_mva;
  if (unit == PowerUnit::PerUnit) doc["power_unit"] = "pu";
  doc["buses"] = json::array();
  for (const auto& b : grid.buses)
    doc["buses"].push_back({{"id", b.id}, {"v_min", b.v_min}, {"v_max", b.v_max}, {"base_kv", b.base_kv}});
  doc["lines"] = json::array();
  for (const auto& l : grid.lines)
    doc["lines"].push_back({{"from_bus", l.from_bus},
                            {"to_bus", l.to_bus},
                            {"r", l.r},
                            {"x", l.x},
                            {"b_shunt", l.b_shunt},
                            {"s_max", l.s_max * k},
                            {"tap", l.tap}});
  doc["generators"] = json::array();
  for (const auto& g : grid.generators)
    doc["generators"].push_back({{"bus", g.bus},
                                 {"p_set", g.p_set * k},
                                 {"v_set", g.v_set},
                                 {"p_min", g.p_min * k},
                                 {"p_max", g.p_max * k},
                                 {"q_min", g.q_min * k},
                                 {"q_max", g.q_max * k}});
  doc["loads"] = json::array();
  for (const auto& d : grid.loads) doc["loads"].push_back({{"bus", d.bus}, {"p", d.p * k}, {"q", d.q * k}});
  doc["slack"] = {{"bus", grid.slack.bus}, {"v_set", grid.slack.v_set}, {"angle", grid.slack.angle}};
  return doc;
}

GridCase case_from_json(const json& doc) {
  GridCase grid;
  try {
    if (!doc.is_object()) throw CaseError("case must be a JSON object");
    if (doc.contains("slack") && doc["slack"].is_array()) {
      if (doc["slack"].size() != 1)
        throw ValidationError({"exactly one slack reference required, found " + std::to_string(doc["slack"].size())});
    }
    grid.base_mva = doc.at("base_mva").get<double>();
    if (!(grid.base_mva > 0.0)) throw ValidationError({"base_mva must be positive"});
    bool per_unit = doc.value("power_unit", std::string("MW")) == "pu";
    const double k = per_unit ? 1.0 : grid.base_mva;

    for (const auto& b : doc.at("buses"))
      grid.buses.push_back({b.at("id").get<int>(), b.at("v_min").get<double>(), b.at("v_max").get<double>(),
                            b.at("base_kv").get<double>()});
    for (const auto& l : doc.at("lines"))
      grid.lines.push_back({l.at("from_bus").get<int>(), l.at("to_bus").get<int>(), l.at("r").get<double>(),
                            l.at("x").get<double>(), l.value("b_shunt", 0.0), l.at("s_max").get<double>() / k,
                            l.value("tap", 1.0)});
    for (const auto& g : doc.at("generators"))
      grid.generators.push_back({g.at("bus").get<int>(), g.at("p_set").get<double>() / k, g.at("v_set").get<double>(),
                                 g.at("p_min").get<double>() / k, g.at("p_max").get<double>() / k,
                                 g.at("q_min").get<double>() / k, g.at("q_max").get<double>() / k});
    for (const auto& d : doc.at("loads"))
      grid.loads.push_back({d.at("bus").get<int>(), d.at("p").get<double>() / k, d.at("q").get<double>() / k});

    const json& s = doc.at("slack").is_array() ? doc.at("slack").at(0) : doc.at("slack");
    grid.slack = {s.at("bus").get<int>(), s.at("v_set").get<double>(), s.value("angle", 0.0)};
  } catch (const json::exception& e) {
    throw CaseError(std::string("malformed case: ") + e.what());
  }
  if (auto violations = validate(grid); !violations.empty()) throw ValidationError(std::move(violations));
  return grid;
}

GridCase load_case(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CaseError("cannot open case file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw CaseError("parse error in " + path.string() + ": " + e.what());
  }
  return case_from_json(doc);
}

void save_case(const GridCase& grid, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CaseError("cannot write case file " + path.string());
  out << case_to_json(grid).dump(2) << '\n';
}

}  // namespace hilgnn::grid
