#include "hilgnn/hil.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <random>
#include <thread>

namespace hilgnn::hil {

using nlohmann::json;

namespace {

json to_array(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd from_array(const json& a) {
  const auto vals = a.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

std::int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

}  // namespace

json to_json(const CommandRow& row) {
  json loads = json::array();
  for (const auto& [p, q] : row.loads) loads.push_back({p, q});
  return {{"cmd_id", row.cmd_id}, {"loads", loads}, {"issued_at", row.issued_at}};
}

CommandRow command_from_json(const json& doc) {
  CommandRow row;
  row.cmd_id = doc.at("cmd_id").get<std::int64_t>();
  for (const auto& pq : doc.at("loads")) row.loads.emplace_back(pq.at(0).get<double>(), pq.at(1).get<double>());
  row.issued_at = doc.value("issued_at", std::int64_t{0});
  return row;
}

json to_json(const MeasurementRow& row) {
  return {{"cmd_id", row.cmd_id},     {"v_mag", to_array(row.v_mag)}, {"v_ang", to_array(row.v_ang)},
          {"slack_p", row.slack_p},   {"slack_q", row.slack_q},       {"settled", row.settled},
          {"note", row.note}};
}

MeasurementRow measurement_from_json(const json& doc) {
  MeasurementRow row;
  row.cmd_id = doc.at("cmd_id").get<std::int64_t>();
  row.v_mag = from_array(doc.at("v_mag"));
  row.v_ang = from_array(doc.at("v_ang"));
  row.slack_p = doc.at("slack_p").get<double>();
  row.slack_q = doc.at("slack_q").get<double>();
  row.settled = doc.at("settled").get<bool>();
  row.note = doc.value("note", std::string());
  return row;
}

void NoiseModel::validate() const {
  if (!(sigma_v >= 0.0 && sigma_theta >= 0.0 && sigma_s >= 0.0))
    throw std::invalid_argument("noise standard deviations must be non-negative");
  if (!(param_perturb >= 0.0)) throw std::invalid_argument("param_perturb must be non-negative");
}

json to_json(const NoiseModel& n) {
  return {{"sigma_v", n.sigma_v},         {"sigma_theta", n.sigma_theta}, {"sigma_s", n.sigma_s},
          {"bias", n.bias},               {"param_perturb", n.param_perturb}, {"seed", n.seed}};
}

NoiseModel noise_from_json(const json& doc) {
  NoiseModel n;
  n.sigma_v = doc.value("sigma_v", 0.0);
  n.sigma_theta = doc.value("sigma_theta", 0.0);
  n.sigma_s = doc.value("sigma_s", 0.0);
  n.bias = doc.value("bias", std::vector<double>{});
  n.param_perturb = doc.value("param_perturb", 0.0);
  n.seed = doc.value("seed", std::uint64_t{0});
  n.validate();
  return n;
}

// --- FileStore ---------------------------------------------------------------

namespace {

void append_line(const std::filesystem::path& file, const std::string& text) {
  std::string line = text + '\n';
  const int fd = ::open(file.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw StoreError("cannot open " + file.string() + ": " + std::strerror(errno));
  const char* p = line.data();
  std::size_t left = line.size();
  while (left > 0) {
    const ssize_t n = ::write(fd, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      ::close(fd);
      throw StoreError("append to " + file.string() + " failed: " + std::strerror(err));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
  ::close(fd);
}

void touch(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) std::ofstream(file, std::ios::app);
}

}  // namespace

FileStore::FileStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
  touch(dir_ / "commands.jsonl");
  touch(dir_ / "measurements.jsonl");
  if (!std::filesystem::exists(dir_ / "cursor")) advance_cursor(0);
}

template <typename Row, typename Parse>
void FileStore::refresh(const std::filesystem::path& file, std::uintmax_t& offset, std::vector<Row>& cache,
                        Parse parse) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw StoreError("cannot read " + file.string());
  in.seekg(static_cast<std::streamoff>(offset));
  std::string chunk((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t start = 0;
  for (std::size_t nl; (nl = chunk.find('\n', start)) != std::string::npos; start = nl + 1) {
    const std::string_view line(chunk.data() + start, nl - start);
    if (line.empty()) continue;
    try {
      cache.push_back(parse(json::parse(line)));
    } catch (const json::exception& e) {
      throw StoreError("corrupt row in " + file.string() + ": " + e.what());
    }
  }
  offset += start;
}

std::vector<CommandRow> FileStore::commands() {
  refresh(dir_ / "commands.jsonl", cmd_offset_, cmd_cache_, command_from_json);
  return cmd_cache_;
}

std::int64_t FileStore::issue(std::vector<std::pair<double, double>> loads) {
  commands();
  CommandRow row;
  row.cmd_id = cmd_cache_.empty() ? 1 : cmd_cache_.back().cmd_id + 1;
  row.loads = std::move(loads);
  row.issued_at = now_ms();
  append_line(dir_ / "commands.jsonl", to_json(row).dump());
  return row.cmd_id;
}

void FileStore::publish(const MeasurementRow& row) { append_line(dir_ / "measurements.jsonl", to_json(row).dump()); }

std::vector<MeasurementRow> FileStore::measurements() {
  refresh(dir_ / "measurements.jsonl", meas_offset_, meas_cache_, measurement_from_json);
  return meas_cache_;
}

std::optional<MeasurementRow> FileStore::measurement(std::int64_t cmd_id) {
  refresh(dir_ / "measurements.jsonl", meas_offset_, meas_cache_, measurement_from_json);
  for (auto it = meas_cache_.rbegin(); it != meas_cache_.rend(); ++it)
    if (it->cmd_id == cmd_id) return *it;
  return std::nullopt;
}

std::int64_t FileStore::cursor() {
  std::ifstream in(dir_ / "cursor");
  std::int64_t c = 0;
  if (!(in >> c)) throw StoreError("unreadable cursor in " + dir_.string());
  return c;
}

void FileStore::advance_cursor(std::int64_t cmd_id) {
  const auto tmp = dir_ / "cursor.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << cmd_id << '\n';
    if (!out) throw StoreError("cannot write cursor in " + dir_.string());
  }
  std::filesystem::rename(tmp, dir_ / "cursor");
}

// --- Server ------------------------------------------------------------------

grid::GridCase perturb_lines(const grid::GridCase& base, double p, std::uint64_t seed) {
  grid::GridCase out = base;
  if (p == 0.0) return out;
  std::seed_seq seq{seed, std::uint64_t{0x9e3779b97f4a7c15ULL}};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(1.0 - p, 1.0 + p);
  for (auto& line : out.lines) {
    line.r *= u(rng);
    line.x *= u(rng);
  }
  return out;
}

HilServer::HilServer(grid::GridCase base, NoiseModel noise, Store& store, pf::PfOptions pf_opts)
    : plant_(perturb_lines(base, noise.param_perturb, noise.seed)),
      noise_(std::move(noise)),
      store_(store),
      pf_opts_(pf_opts) {
  noise_.validate();
  if (!noise_.bias.empty() && noise_.bias.size() != plant_.buses.size())
    throw std::invalid_argument("noise bias must have one entry per bus");
}

MeasurementRow HilServer::settle(const CommandRow& cmd) const {
  MeasurementRow row;
  row.cmd_id = cmd.cmd_id;
  if (cmd.loads.size() != plant_.loads.size()) {
    row.note = "command has " + std::to_string(cmd.loads.size()) + " load setpoints, plant has " +
               std::to_string(plant_.loads.size());
    return row;
  }
  grid::GridCase grid = plant_;
  for (std::size_t k = 0; k < grid.loads.size(); ++k) {
    grid.loads[k].p = cmd.loads[k].first;
    grid.loads[k].q = cmd.loads[k].second;
  }
  pf::PfSolution sol;
  try {
    sol = pf::solve_pf(grid, pf_opts_);
  } catch (const pf::PowerFlowError& e) {
    row.note = e.what();
    return row;
  }

  std::seed_seq seq{noise_.seed, static_cast<std::uint64_t>(cmd.cmd_id)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> n01(0.0, 1.0);
  row.v_mag = sol.v_mag;
  row.v_ang = sol.v_ang;
  for (Eigen::Index i = 0; i < row.v_mag.size(); ++i) {
    row.v_mag(i) *= 1.0 + noise_.sigma_v * n01(rng);
    if (!noise_.bias.empty()) row.v_mag(i) += noise_.bias[static_cast<std::size_t>(i)];
  }
  for (Eigen::Index i = 0; i < row.v_ang.size(); ++i) row.v_ang(i) += noise_.sigma_theta * n01(rng);
  row.slack_p = sol.slack_p * (1.0 + noise_.sigma_s * n01(rng));
  row.slack_q = sol.slack_q * (1.0 + noise_.sigma_s * n01(rng));
  row.settled = true;
  return row;
}

std::size_t HilServer::poll_once() {
  const std::int64_t consumed = store_.cursor();
  std::size_t handled = 0;
  for (const auto& cmd : store_.commands()) {
    if (cmd.cmd_id <= consumed) continue;
    if (!store_.measurement(cmd.cmd_id)) store_.publish(settle(cmd));
    store_.advance_cursor(cmd.cmd_id);
    ++handled;
  }
  return handled;
}

void HilServer::run(const std::atomic<bool>& stop, std::chrono::milliseconds poll_interval) {
  while (!stop.load()) {
    if (poll_once() == 0) std::this_thread::sleep_for(poll_interval);
  }
}

// --- Collector ---------------------------------------------------------------

HilTimeout::HilTimeout(std::int64_t cmd_id)
    : std::runtime_error("timed out waiting for measurement of command " + std::to_string(cmd_id)), cmd_id_(cmd_id) {}

CollectResult hil_collect(const grid::GridCase& base, const CollectConfig& cfg, Store& store) {
  if (cfg.n == 0) throw std::invalid_argument("sample count must be positive");
  CollectResult out;
  std::size_t draws = 0;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const std::uint64_t seed = cfg.mutation.rng_seed + i;
    data::Rng rng(seed);
    for (;;) {
      ++draws;
      grid::GridCase mutated = data::mutate_loads(base, cfg.mutation, rng);
      std::vector<std::pair<double, double>> setpoints;
      for (const auto& d : mutated.loads) setpoints.emplace_back(d.p, d.q);
      const std::int64_t id = store.issue(std::move(setpoints));

      const auto deadline = std::chrono::steady_clock::now() + cfg.timeout;
      std::optional<MeasurementRow> meas;
      while (!(meas = store.measurement(id))) {
        if (std::chrono::steady_clock::now() >= deadline) throw HilTimeout(id);
        std::this_thread::sleep_for(cfg.poll_interval);
      }
      if (meas->settled) {
        data::Sample s;
        s.grid = std::move(mutated);
        s.solution.v_mag = meas->v_mag;
        s.solution.v_ang = meas->v_ang;
        s.solution.slack_p = meas->slack_p;
        s.solution.slack_q = meas->slack_q;
        s.solution.gen_q = Eigen::VectorXd(0);
        s.source = data::Source::Hil;
        s.seed = seed;
        out.samples.push_back(std::move(s));
        break;
      }
      ++out.redraws;
      if (draws >= 10 && 2 * out.redraws > draws)
        throw UnsettledError("command " + std::to_string(id) + " unsettled (" + meas->note + "); more than half of " +
                             std::to_string(draws) + " commands failed");
    }
  }
  return out;
}

}  // namespace hilgnn::hil
