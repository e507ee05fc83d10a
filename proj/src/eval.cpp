#include "hilgnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_set>

namespace hilgnn::eval {

using nlohmann::json;

MetricsReport evaluate(const gnn::ModelParams& params, const std::vector<data::Sample>& test, std::string label) {
  if (test.empty()) throw ScenarioError("evaluation set is empty");
  MetricsReport rep;
  rep.label = std::move(label);
  rep.test_hash = data::dataset_hash(test);
  const auto n_bus = test.front().grid.buses.size();
  bool same_topology = true;
  std::vector<double> v_sq(n_bus, 0.0), t_sq(n_bus, 0.0);

  for (const auto& s : test) {
    const auto pred = gnn::predict(params, gnn::build_graph(s.grid));
    const auto truth = train::targets(s.grid, s.solution);
    SampleMetrics m;
    const auto v = nse(pred.y_b.col(0), truth.bus.col(0));
    const auto t = nse(pred.y_b.col(1), truth.bus.col(1));
    const auto p = nse(pred.y_s(0, 0), truth.slack(0, 0));
    const auto q = nse(pred.y_s(0, 1), truth.slack(0, 1));
    m.nse_v = v.value;
    m.nse_theta = t.value;
    m.nse_p = p.value;
    m.nse_q = q.value;
    if (!v.normalized) m.fallback.push_back("v");
    if (!t.normalized) m.fallback.push_back("theta");
    if (!p.normalized) m.fallback.push_back("p");
    if (!q.normalized) m.fallback.push_back("q");
    rep.per_sample.push_back(m);

    if (s.grid.buses.size() != n_bus) {
      same_topology = false;
      continue;
    }
    for (std::size_t i = 0; i < n_bus; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      v_sq[i] += std::pow(pred.y_b(r, 0) - truth.bus(r, 0), 2);
      t_sq[i] += std::pow(pred.y_b(r, 1) - truth.bus(r, 1), 2);
    }
  }
  const double n = static_cast<double>(test.size());
  for (const auto& m : rep.per_sample) {
    rep.nse_v += m.nse_v / n;
    rep.nse_theta += m.nse_theta / n;
    rep.nse_p += m.nse_p / n;
    rep.nse_q += m.nse_q / n;
  }
  rep.total = rep.nse_v + rep.nse_theta + rep.nse_p + rep.nse_q;
  if (same_topology) {
    for (std::size_t i = 0; i < n_bus; ++i) {
      rep.bus_v_mse.push_back(v_sq[i] / n);
      rep.bus_theta_mse.push_back(t_sq[i] / n);
    }
  }
  return rep;
}

json to_json(const MetricsReport& r) {
  json per = json::array();
  for (const auto& m : r.per_sample)
    per.push_back({{"nse_v", m.nse_v},
                   {"nse_theta", m.nse_theta},
                   {"nse_p", m.nse_p},
                   {"nse_q", m.nse_q},
                   {"total", m.total()},
                   {"fallback", m.fallback}});
  json doc = {{"label", r.label},
              {"convention",
               "per-sample NSE = ||pred - truth||^2 / ||truth||^2 per quantity over all buses of the sample "
               "(plain squared error where the truth is all-zero, listed under fallback), averaged over "
               "samples; total = nse_v + nse_theta + nse_p + nse_q; angles relative to the slack bus"},
              {"test_hash", r.test_hash},
              {"samples", r.per_sample.size()},
              {"mean",
               {{"nse_v", r.nse_v},
                {"nse_theta", r.nse_theta},
                {"nse_p", r.nse_p},
                {"nse_q", r.nse_q},
                {"total", r.total}}},
              {"per_bus", {{"v_mse", r.bus_v_mse}, {"theta_mse", r.bus_theta_mse}}},
              {"per_sample", per}};
  if (r.baseline_delta) doc["baseline_delta"] = *r.baseline_delta;
  return doc;
}

MetricsReport report_from_json(const json& doc) {
  MetricsReport r;
  try {
    r.label = doc.value("label", std::string());
    r.test_hash = doc.at("test_hash").get<std::string>();
    const auto& mean = doc.at("mean");
    r.nse_v = mean.at("nse_v").get<double>();
    r.nse_theta = mean.at("nse_theta").get<double>();
    r.nse_p = mean.at("nse_p").get<double>();
    r.nse_q = mean.at("nse_q").get<double>();
    r.total = mean.at("total").get<double>();
    if (doc.contains("per_bus")) {
      r.bus_v_mse = doc["per_bus"].value("v_mse", std::vector<double>{});
      r.bus_theta_mse = doc["per_bus"].value("theta_mse", std::vector<double>{});
    }
    for (const auto& m : doc.value("per_sample", json::array()))
      r.per_sample.push_back({m.at("nse_v").get<double>(), m.at("nse_theta").get<double>(),
                              m.at("nse_p").get<double>(), m.at("nse_q").get<double>(),
                              m.value("fallback", std::vector<std::string>{})});
    if (doc.contains("baseline_delta")) r.baseline_delta = doc["baseline_delta"];
  } catch (const json::exception& e) {
    throw ScenarioError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string render_table(const MetricsReport& r) {
  std::ostringstream os;
  os << "report: " << r.label << "  (" << r.per_sample.size() << " samples, test " << r.test_hash.substr(0, 12)
     << ")\n";
  os << std::left << std::setw(12) << "quantity" << std::right << std::setw(16) << "mean NSE";
  if (r.baseline_delta) os << std::setw(16) << "vs baseline";
  os << '\n';
  const std::pair<const char*, double> rows[] = {
      {"nse_v", r.nse_v}, {"nse_theta", r.nse_theta}, {"nse_p", r.nse_p}, {"nse_q", r.nse_q}, {"total", r.total}};
  os << std::scientific << std::setprecision(4);
  for (const auto& [name, value] : rows) {
    os << std::left << std::setw(12) << name << std::right << std::setw(16) << value;
    if (r.baseline_delta && r.baseline_delta->contains(name))
      os << std::setw(16) << std::showpos << (*r.baseline_delta)[name].get<double>() << std::noshowpos;
    os << '\n';
  }
  return os.str();
}

std::string render_svg(const MetricsReport& r) {
  const std::size_t n = r.bus_v_mse.size();
  const double width = 80.0 + 48.0 * static_cast<double>(std::max<std::size_t>(n, 1));
  const double height = 260.0, top = 30.0, base = 220.0;
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) peak = std::max({peak, r.bus_v_mse[i], r.bus_theta_mse[i]});
  if (peak <= 0.0) peak = 1.0;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<text x=\"10\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">per-bus MSE (" << r.label
     << "), max " << peak << "</text>\n";
  os << "<line x1=\"60\" y1=\"" << base << "\" x2=\"" << width - 10 << "\" y2=\"" << base
     << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = 64.0 + 48.0 * static_cast<double>(i);
    const double hv = (base - top) * r.bus_v_mse[i] / peak;
    const double ht = (base - top) * r.bus_theta_mse[i] / peak;
    os << "<rect x=\"" << x << "\" y=\"" << base - hv << "\" width=\"18\" height=\"" << hv
       << "\" fill=\"#4878d0\"><title>bus " << i << " v_mse " << r.bus_v_mse[i] << "</title></rect>\n";
    os << "<rect x=\"" << x + 20 << "\" y=\"" << base - ht << "\" width=\"18\" height=\"" << ht
       << "\" fill=\"#ee854a\"><title>bus " << i << " theta_mse " << r.bus_theta_mse[i] << "</title></rect>\n";
    os << "<text x=\"" << x + 10 << "\" y=\"" << base + 14 << "\" font-family=\"sans-serif\" font-size=\"10\">"
       << i << "</text>\n";
  }
  os << "<text x=\"64\" y=\"" << height - 12
     << "\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#4878d0\">v_mag</text>\n";
  os << "<text x=\"110\" y=\"" << height - 12
     << "\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#ee854a\">v_ang</text>\n";
  os << "</svg>\n";
  return os.str();
}

json metric_delta(const MetricsReport& r, const MetricsReport& b) {
  return {{"nse_v", r.nse_v - b.nse_v},
          {"nse_theta", r.nse_theta - b.nse_theta},
          {"nse_p", r.nse_p - b.nse_p},
          {"nse_q", r.nse_q - b.nse_q},
          {"total", r.total - b.total}};
}

ScenarioOutcome run_scenario_1(const std::vector<data::Sample>& synthetic_train,
                               const std::vector<data::Sample>& hil_test, const ScenarioConfig& cfg) {
  if (synthetic_train.empty()) throw ScenarioError("scenario 1: synthetic training set is empty");
  if (hil_test.empty()) throw ScenarioError("scenario 1: hardware test set is empty");
  ScenarioOutcome out;
  auto trained = train::train(synthetic_train, cfg.pretrain, cfg.loss, cfg.model);
  out.params = std::move(trained.params);
  out.pretrain_history = std::move(trained.history);
  out.report = evaluate(out.params, hil_test, "scenario1");
  return out;
}

ScenarioOutcome run_scenario_2(const std::vector<data::Sample>& synthetic_train,
                               const std::vector<data::Sample>& hil_finetune,
                               const std::vector<data::Sample>& hil_test, const ScenarioConfig& cfg,
                               const MetricsReport& baseline, const gnn::ModelParams* pretrained) {
  if (hil_test.empty()) throw ScenarioError("scenario 2: hardware test set is empty");
  if (hil_finetune.empty()) throw ScenarioError("scenario 2: fine-tuning set is empty");
  if (data::dataset_hash(hil_test) != baseline.test_hash)
    throw ScenarioError("scenario 2: test set hash " + data::dataset_hash(hil_test) +
                        " differs from the scenario-1 report's " + baseline.test_hash);
  std::unordered_set<std::string> test_hashes;
  for (const auto& s : hil_test) test_hashes.insert(data::sample_hash(s));
  for (const auto* set : {&synthetic_train, &hil_finetune})
    for (std::size_t i = 0; i < set->size(); ++i)
      if (test_hashes.count(data::sample_hash((*set)[i])))
        throw ScenarioError(std::string("scenario 2: ") + (set == &hil_finetune ? "fine-tuning" : "training") +
                            " sample " + std::to_string(i) + " also appears in the test set");

  ScenarioOutcome out;
  if (pretrained) {
    out.params = *pretrained;
  } else {
    if (synthetic_train.empty()) throw ScenarioError("scenario 2: synthetic training set is empty");
    auto trained = train::train(synthetic_train, cfg.pretrain, cfg.loss, cfg.model);
    out.params = std::move(trained.params);
    out.pretrain_history = std::move(trained.history);
  }
  auto tuned = train::finetune(out.params, hil_finetune, cfg.finetune, cfg.loss);
  out.params = std::move(tuned.params);
  out.finetune_history = std::move(tuned.history);
  out.report = evaluate(out.params, hil_test, "scenario2");
  out.report.baseline_delta = metric_delta(out.report, baseline);
  return out;
}

}  // namespace hilgnn::eval
