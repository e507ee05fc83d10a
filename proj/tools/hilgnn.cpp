#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hilgnn/eval.hpp"
#include "hilgnn/hil.hpp"

namespace fs = std::filesystem;
using namespace hilgnn;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

// JSON config files. Top-level scalars apply to the subcommand being run;
// an object keyed by a subcommand name applies to that subcommand only.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* app) : app_(app) {}

  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    json j;
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
      const auto& name = opt->get_lnames().front();
      if (opt->count() > 0)
        j[name] = opt->results().size() == 1 ? json(opt->results().front()) : json(opt->results());
      else if (default_also && !opt->get_default_str().empty())
        j[name] = opt->get_default_str();
    }
    for (const CLI::App* sub : app->get_subcommands()) j[sub->get_name()] = json::parse(to_config(sub, default_also, false, ""));
    return j.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json doc;
    try {
      input >> doc;
    } catch (const json::exception& e) {
      throw CLI::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw CLI::ConfigError("config must be a JSON object");
    std::vector<std::string> active;
    for (const CLI::App* sub : app_->get_subcommands()) active.push_back(sub->get_name());

    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : doc.items()) {
      if (value.is_object()) {
        if (std::find(active.begin(), active.end(), key) == active.end()) continue;
        for (const auto& [k, v] : value.items()) items.push_back({{key}, k, inputs(v, key + "." + k)});
      } else {
        for (const auto& sub : active) items.push_back({{sub}, key, inputs(value, key)});
      }
    }
    return items;
  }

 private:
  static std::vector<std::string> inputs(const json& v, const std::string& where) {
    if (v.is_string()) return {v.get<std::string>()};
    if (v.is_boolean()) return {v.get<bool>() ? "true" : "false"};
    if (v.is_number()) return {v.dump()};
    if (v.is_array()) {
      std::vector<std::string> out;
      for (const auto& e : v) {
        if (e.is_array() || e.is_object()) throw CLI::ConfigError(where + ": nested values are not supported");
        out.push_back(e.is_string() ? e.get<std::string>() : e.dump());
      }
      return out;
    }
    throw CLI::ConfigError(where + ": unsupported value");
  }

  const CLI::App* app_;
};

struct Manifest {
  json doc = json::object();
  fs::path path;

  void dataset(const std::string& role, const fs::path& file, const std::vector<data::Sample>& samples) {
    doc["datasets"][role] = {{"path", file.string()}, {"n", samples.size()}, {"hash", data::dataset_hash(samples)}};
  }
  void write() const {
    if (path.empty()) return;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    os << doc.dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  }
};

json effective_options(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (name == "help") continue;
    if (opt->count() > 0)
      j[name] = opt->results().size() == 1 ? json(opt->results().front()) : json(opt->results());
    else if (!opt->get_default_str().empty())
      j[name] = opt->get_default_str();
  }
  return j;
}

fs::path beside(const fs::path& file) {
  return (file.has_parent_path() ? file.parent_path() : fs::path(".")) / "run.manifest.json";
}

void add_train_options(CLI::App* sub, train::TrainConfig& cfg, const std::string& prefix = "") {
  sub->add_option("--" + prefix + "epochs", cfg.epochs, "Training epochs")->capture_default_str();
  sub->add_option("--" + prefix + "batch", cfg.batch_size, "Mini-batch size")->capture_default_str();
  sub->add_option("--" + prefix + "lr", cfg.lr_start, "Initial learning rate")->capture_default_str();
  sub->add_option("--" + prefix + "lr-decay", cfg.lr_decay, "Factor applied at each milestone")->capture_default_str();
  sub->add_option("--" + prefix + "milestones", cfg.lr_milestones, "Epochs at which the rate decays")
      ->delimiter(',')
      ->capture_default_str();
  sub->add_option("--" + prefix + "seed", cfg.seed, "Shuffle seed")->capture_default_str();
  sub->add_option("--" + prefix + "clip", cfg.clip_norm, "Global gradient-norm clip (<= 0 disables)")
      ->capture_default_str();
}

void add_model_options(CLI::App* sub, gnn::ModelConfig& cfg) {
  sub->add_option("--hidden", cfg.hidden, "Hidden width")->capture_default_str();
  sub->add_option("--model-seed", cfg.seed, "Parameter initialization seed")->capture_default_str();
}

void add_loss_options(CLI::App* sub, double& lambda_ctr) {
  sub->add_option("--lambda-ctr", lambda_ctr, "Weight of every constraint penalty")->capture_default_str();
}

train::LossConfig loss_config(double lambda_ctr) {
  train::LossConfig cfg;
  cfg.lambda_constraint.fill(lambda_ctr);
  return cfg;
}

train::EpochCallback progress(const std::string& tag, int every = 10) {
  return [tag, every](const train::EpochRecord& r) {
    if (r.epoch % every == 0)
      std::cerr << tag << " epoch " << r.epoch << " lr " << r.lr << " loss " << r.loss_total << '\n';
  };
}

std::vector<data::Sample> load_data(Manifest& m, const std::string& role, const fs::path& path) {
  auto samples = data::load_dataset(path);
  m.dataset(role, path, samples);
  return samples;
}

json train_config_json(const train::TrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch", c.batch_size}, {"lr", c.lr_start},
          {"lr_decay", c.lr_decay}, {"milestones", c.lr_milestones}, {"seed", c.seed},
          {"clip", c.clip_norm}};
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const pf::PowerFlowError*>(&e) || dynamic_cast<const data::GenerationError*>(&e) ||
      dynamic_cast<const train::TrainingError*>(&e) || dynamic_cast<const ad::NumericError*>(&e))
    return kExitNumeric;
  if (dynamic_cast<const grid::CaseError*>(&e) || dynamic_cast<const data::DatasetError*>(&e) ||
      dynamic_cast<const gnn::CheckpointError*>(&e) || dynamic_cast<const eval::ScenarioError*>(&e) ||
      dynamic_cast<const json::exception*>(&e) || dynamic_cast<const std::invalid_argument*>(&e))
    return kExitConfig;
  return 1;
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous GNN power-flow surrogate with an emulated hardware-in-the-loop store"};
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  app.set_config("--config", "", "JSON config file; command-line flags take precedence");
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.fallthrough();
  std::string manifest_override;
  app.add_option("--manifest", manifest_override, "Where to write run.manifest.json");

  // generate
  std::string case_path, out_path;
  std::size_t n = 256;
  data::MutationConfig mutation;
  auto* gen = app.add_subcommand("generate", "Solve mutated-load cases into a dataset");
  gen->add_option("--case", case_path, "Case file")->required()->check(CLI::ExistingFile);
  gen->add_option("--n", n, "Number of samples")->capture_default_str();
  gen->add_option("--seed", mutation.rng_seed, "Stream seed; sample i uses seed + i")->capture_default_str();
  gen->add_option("--rate", mutation.rate, "Probability that a load is mutated")->capture_default_str();
  gen->add_option("--width", mutation.width, "Half-range of the load multiplier")->capture_default_str();
  gen->add_option("--out", out_path, "Output dataset (JSON lines)")->required();

  // train
  std::string data_path, model_path, history_path;
  train::TrainConfig tcfg;
  gnn::ModelConfig mcfg;
  double lambda_ctr = 0.1;
  auto* trn = app.add_subcommand("train", "Train a model from scratch");
  trn->add_option("--data", data_path, "Training dataset")->required()->check(CLI::ExistingFile);
  trn->add_option("--out", model_path, "Checkpoint to write")->required();
  trn->add_option("--history", history_path, "Per-epoch loss CSV (default: <out>.history.csv)");
  add_train_options(trn, tcfg);
  add_model_options(trn, mcfg);
  add_loss_options(trn, lambda_ctr);

  // hil-serve
  std::string noise_path, store_path;
  int poll_ms = 10;
  auto* serve = app.add_subcommand("hil-serve", "Emulated hardware: settle commands from a store until interrupted");
  serve->add_option("--case", case_path, "Case file")->required()->check(CLI::ExistingFile);
  serve->add_option("--noise-config", noise_path, "Noise model JSON")->check(CLI::ExistingFile);
  serve->add_option("--store", store_path, "Store directory")->required();
  serve->add_option("--poll-ms", poll_ms, "Polling interval")->capture_default_str()->check(CLI::PositiveNumber);

  // hil-collect
  int timeout_ms = 5000;
  auto* collect = app.add_subcommand("hil-collect", "Issue load commands and record settled measurements");
  collect->add_option("--case", case_path, "Case file")->required()->check(CLI::ExistingFile);
  collect->add_option("--n", n, "Number of samples")->capture_default_str();
  collect->add_option("--store", store_path, "Store directory")->required();
  collect->add_option("--out", out_path, "Output dataset (JSON lines)")->required();
  collect->add_option("--seed", mutation.rng_seed, "Stream seed; sample i uses seed + i")->capture_default_str();
  collect->add_option("--rate", mutation.rate, "Probability that a load is mutated")->capture_default_str();
  collect->add_option("--width", mutation.width, "Half-range of the load multiplier")->capture_default_str();
  collect->add_option("--timeout-ms", timeout_ms, "Wait per command")->capture_default_str()->check(CLI::PositiveNumber);

  // finetune
  train::TrainConfig fcfg = train::finetune_defaults();
  auto* ft = app.add_subcommand("finetune", "Continue training a checkpoint on new data");
  ft->add_option("--model", model_path, "Checkpoint to start from")->required()->check(CLI::ExistingFile);
  ft->add_option("--data", data_path, "Fine-tuning dataset")->required()->check(CLI::ExistingFile);
  ft->add_option("--out", out_path, "Checkpoint to write")->required();
  ft->add_option("--history", history_path, "Per-epoch loss CSV (default: <out>.history.csv)");
  add_train_options(ft, fcfg);
  add_loss_options(ft, lambda_ctr);

  // evaluate
  std::string label = "evaluate";
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint; prints the report JSON");
  ev->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_path, "Test dataset")->required()->check(CLI::ExistingFile);
  ev->add_option("--label", label, "Report label")->capture_default_str();
  ev->add_option("--out", out_path, "Also write the report here");

  // scenario1 / scenario2
  std::string train_path, test_path, ft_path, baseline_path, pretrained_path, model_out;
  eval::ScenarioConfig scfg;
  auto* s1 = app.add_subcommand("scenario1", "Train on synthetic data, evaluate on hardware data");
  s1->add_option("--train", train_path, "Synthetic training dataset")->required()->check(CLI::ExistingFile);
  s1->add_option("--test", test_path, "Hardware test dataset")->required()->check(CLI::ExistingFile);
  s1->add_option("--out", out_path, "Report JSON")->required();
  s1->add_option("--model-out", model_out, "Also write the trained checkpoint");
  add_train_options(s1, scfg.pretrain);
  add_model_options(s1, scfg.model);
  add_loss_options(s1, lambda_ctr);

  auto* s2 = app.add_subcommand("scenario2", "Pre-train, fine-tune on hardware data, evaluate against a baseline");
  s2->add_option("--train", train_path, "Synthetic training dataset")->required()->check(CLI::ExistingFile);
  s2->add_option("--finetune-data", ft_path, "Hardware fine-tuning dataset")->required()->check(CLI::ExistingFile);
  s2->add_option("--test", test_path, "Hardware test dataset")->required()->check(CLI::ExistingFile);
  s2->add_option("--baseline", baseline_path, "Scenario-1 report JSON")->required()->check(CLI::ExistingFile);
  s2->add_option("--pretrained", pretrained_path, "Reuse this checkpoint instead of pre-training")
      ->check(CLI::ExistingFile);
  s2->add_option("--out", out_path, "Report JSON")->required();
  s2->add_option("--model-out", model_out, "Also write the fine-tuned checkpoint");
  add_train_options(s2, scfg.pretrain);
  add_train_options(s2, scfg.finetune, "ft-");
  add_model_options(s2, scfg.model);
  add_loss_options(s2, lambda_ctr);

  // report
  std::string in_path, svg_path;
  auto* rep = app.add_subcommand("report", "Render a report as a table and optional SVG");
  rep->add_option("--in", in_path, "Report JSON")->required()->check(CLI::ExistingFile);
  rep->add_option("--svg", svg_path, "Per-bus error chart");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  const CLI::App* sub = app.get_subcommands().front();
  Manifest manifest;
  manifest.doc["command"] = sub->get_name();
  manifest.doc["argv"] = std::vector<std::string>(argv, argv + argc);
  manifest.doc["options"] = effective_options(sub);
  auto place = [&](const fs::path& near) { manifest.path = manifest_override.empty() ? beside(near) : fs::path(manifest_override); };

  try {
    const auto loss = loss_config(lambda_ctr);
    if (sub == gen) {
      place(out_path);
      const auto base = grid::load_case(case_path);
      const auto res = data::generate(base, n, mutation);
      data::save_dataset(res.samples, out_path);
      manifest.doc["seeds"] = {{"mutation", mutation.rng_seed}};
      manifest.dataset("out", out_path, res.samples);
      std::cerr << "wrote " << res.samples.size() << " samples (" << res.redraws << " redraws) to " << out_path << '\n';
    } else if (sub == trn) {
      place(model_path);
      tcfg.validate();
      const auto set = load_data(manifest, "train", data_path);
      const auto res = train::train(set, tcfg, loss, mcfg, progress("train"));
      gnn::save_checkpoint(res.params, model_path);
      train::write_history_csv(res.history, history_path.empty() ? model_path + ".history.csv" : history_path);
      manifest.doc["seeds"] = {{"shuffle", tcfg.seed}, {"model", mcfg.seed}};
      if (!res.history.empty()) manifest.doc["epoch1_loss"] = res.history.front().loss_total;
    } else if (sub == serve) {
      place(fs::path(store_path) / "serve");
      const auto base = grid::load_case(case_path);
      hil::NoiseModel noise;
      if (!noise_path.empty()) {
        std::ifstream is(noise_path);
        noise = hil::noise_from_json(json::parse(is));
      }
      hil::FileStore store(store_path);
      hil::HilServer server(base, noise, store);
      manifest.doc["seeds"] = {{"noise", noise.seed}};
      manifest.doc["noise"] = hil::to_json(noise);
      manifest.write();
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving " << store_path << " (ctrl-c to stop)\n";
      server.run(g_stop, std::chrono::milliseconds(poll_ms));
      std::cerr << "stopped at cursor " << store.cursor() << '\n';
      return 0;
    } else if (sub == collect) {
      place(out_path);
      const auto base = grid::load_case(case_path);
      hil::FileStore store(store_path);
      hil::CollectConfig cc;
      cc.n = n;
      cc.mutation = mutation;
      cc.timeout = std::chrono::milliseconds(timeout_ms);
      const auto res = hil::hil_collect(base, cc, store);
      data::save_dataset(res.samples, out_path);
      manifest.doc["seeds"] = {{"mutation", mutation.rng_seed}};
      manifest.dataset("out", out_path, res.samples);
      std::cerr << "collected " << res.samples.size() << " samples (" << res.redraws << " redraws)\n";
    } else if (sub == ft) {
      place(out_path);
      fcfg.validate();
      const auto params = gnn::load_checkpoint(model_path);
      const auto set = load_data(manifest, "finetune", data_path);
      const auto res = train::finetune(params, set, fcfg, loss, progress("finetune"));
      gnn::save_checkpoint(res.params, out_path);
      train::write_history_csv(res.history, history_path.empty() ? out_path + ".history.csv" : history_path);
      manifest.doc["seeds"] = {{"shuffle", fcfg.seed}};
      if (!res.history.empty()) manifest.doc["epoch1_loss"] = res.history.front().loss_total;
    } else if (sub == ev) {
      place(out_path.empty() ? model_path : out_path);
      const auto params = gnn::load_checkpoint(model_path);
      const auto set = load_data(manifest, "test", data_path);
      const auto report = eval::to_json(eval::evaluate(params, set, label));
      if (!out_path.empty()) std::ofstream(out_path) << report.dump(2) << '\n';
      std::cout << report.dump(2) << std::endl;
    } else if (sub == s1) {
      place(out_path);
      scfg.pretrain.validate();
      scfg.loss = loss;
      const auto syn = load_data(manifest, "train", train_path);
      const auto test = load_data(manifest, "test", test_path);
      const auto res = eval::run_scenario_1(syn, test, scfg);
      std::ofstream(out_path) << eval::to_json(res.report).dump(2) << '\n';
      if (!model_out.empty()) gnn::save_checkpoint(res.params, model_out);
      manifest.doc["seeds"] = {{"shuffle", scfg.pretrain.seed}, {"model", scfg.model.seed}};
      manifest.doc["pretrain"] = train_config_json(scfg.pretrain);
      std::cout << eval::render_table(res.report);
    } else if (sub == s2) {
      place(out_path);
      scfg.pretrain.validate();
      scfg.finetune.validate();
      scfg.loss = loss;
      const auto syn = load_data(manifest, "train", train_path);
      const auto ftset = load_data(manifest, "finetune", ft_path);
      const auto test = load_data(manifest, "test", test_path);
      std::ifstream bs(baseline_path);
      const auto baseline = eval::report_from_json(json::parse(bs));
      std::optional<gnn::ModelParams> pre;
      if (!pretrained_path.empty()) pre = gnn::load_checkpoint(pretrained_path);
      const auto res = eval::run_scenario_2(syn, ftset, test, scfg, baseline, pre ? &*pre : nullptr);
      std::ofstream(out_path) << eval::to_json(res.report).dump(2) << '\n';
      if (!model_out.empty()) gnn::save_checkpoint(res.params, model_out);
      manifest.doc["seeds"] = {{"shuffle", scfg.pretrain.seed}, {"finetune_shuffle", scfg.finetune.seed},
                               {"model", scfg.model.seed}};
      manifest.doc["pretrain"] = train_config_json(scfg.pretrain);
      manifest.doc["finetune"] = train_config_json(scfg.finetune);
      manifest.doc["baseline"] = {{"path", baseline_path}, {"test_hash", baseline.test_hash}};
      std::cout << eval::render_table(res.report);
    } else if (sub == rep) {
      place(svg_path.empty() ? in_path : svg_path);
      std::ifstream is(in_path);
      const auto report = eval::report_from_json(json::parse(is));
      std::cout << eval::render_table(report);
      if (!svg_path.empty()) std::ofstream(svg_path) << eval::render_svg(report);
    }
    manifest.write();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  }
  return 0;
}
