#include "hilgnn/dataset.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

namespace hilgnn::data {

using nlohmann::json;

grid::GridCase mutate_loads(const grid::GridCase& base, const MutationConfig& cfg, Rng& rng) {
  if (!(cfg.rate >= 0.0 && cfg.rate <= 1.0)) throw std::invalid_argument("mutation rate must lie in [0, 1]");
  if (!(cfg.width >= 0.0)) throw std::invalid_argument("mutation width must be non-negative");
  grid::GridCase out = base;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_real_distribution<double> factor(1.0 - cfg.width, 1.0 + cfg.width);
  for (auto& load : out.loads) {
    if (!(coin(rng) < cfg.rate)) continue;
    const double u = cfg.width == 0.0 ? 1.0 : factor(rng);
    const double u_q = cfg.width == 0.0 ? 1.0 : factor(rng);
    load.p *= u;
    load.q *= u_q;
  }
  return out;
}

grid::GridCase mutate_loads(const grid::GridCase& base, const MutationConfig& cfg) {
  Rng rng(cfg.rng_seed);
  return mutate_loads(base, cfg, rng);
}

GenerateResult generate(const grid::GridCase& base, std::size_t n, const MutationConfig& cfg,
                        const pf::PfOptions& pf_opts) {
  if (n == 0) throw std::invalid_argument("sample count must be positive");
  GenerateResult out;
  out.samples.reserve(n);
  std::size_t draws = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = cfg.rng_seed + i;
    Rng rng(seed);
    for (;;) {
      ++draws;
      grid::GridCase mutated = mutate_loads(base, cfg, rng);
      try {
        auto sol = pf::solve_pf(mutated, pf_opts);
        out.samples.push_back({std::move(mutated), std::move(sol), Source::Synthetic, seed});
        break;
      } catch (const pf::PowerFlowError&) {
        ++out.redraws;
        if (draws >= 10 && 2 * out.redraws > draws)
          throw GenerationError("more than half of " + std::to_string(draws) + " draws failed to converge");
      }
    }
  }
  return out;
}

std::string_view to_string(Source s) { return s == Source::Hil ? "hil" : "synthetic"; }

Source source_from_string(std::string_view s) {
  if (s == "hil") return Source::Hil;
  if (s == "synthetic") return Source::Synthetic;
  throw DatasetError("unknown sample source '" + std::string(s) + "'");
}

namespace {

json to_array(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd from_array(const json& a) {
  const auto vals = a.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

}  // namespace

json solution_to_json(const pf::PfSolution& sol) {
  return {{"v_mag", to_array(sol.v_mag)},   {"v_ang", to_array(sol.v_ang)},
          {"slack_p", sol.slack_p},         {"slack_q", sol.slack_q},
          {"gen_q", to_array(sol.gen_q)},   {"iterations", sol.iterations},
          {"max_mismatch", sol.max_mismatch}};
}

pf::PfSolution solution_from_json(const json& doc) {
  pf::PfSolution sol;
  sol.v_mag = from_array(doc.at("v_mag"));
  sol.v_ang = from_array(doc.at("v_ang"));
  sol.slack_p = doc.at("slack_p").get<double>();
  sol.slack_q = doc.at("slack_q").get<double>();
  sol.gen_q = from_array(doc.value("gen_q", json::array()));
  sol.iterations = doc.value("iterations", 0);
  sol.max_mismatch = doc.value("max_mismatch", 0.0);
  if (sol.v_mag.size() != sol.v_ang.size()) throw DatasetError("v_mag and v_ang lengths differ");
  return sol;
}

json sample_to_json(const Sample& s) {
  return {{"seed", s.seed},
          {"source", to_string(s.source)},
          {"case", grid::case_to_json(s.grid, grid::PowerUnit::PerUnit)},
          {"solution", solution_to_json(s.solution)}};
}

Sample sample_from_json(const json& doc) {
  Sample s;
  s.seed = doc.at("seed").get<std::uint64_t>();
  s.source = source_from_string(doc.at("source").get<std::string>());
  s.grid = grid::case_from_json(doc.at("case"));
  s.solution = solution_from_json(doc.at("solution"));
  if (s.solution.v_mag.size() != static_cast<Eigen::Index>(s.grid.buses.size()))
    throw DatasetError("solution length does not match bus count");
  return s;
}

std::string serialize_line(const Sample& s) { return sample_to_json(s).dump(); }

void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write dataset " + path.string());
  for (const auto& s : samples) out << serialize_line(s) << '\n';
  if (!out) throw DatasetError("write failed for " + path.string());
}

std::vector<Sample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset " + path.string());
  std::vector<Sample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      samples.push_back(sample_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw DatasetError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(digest[i]);
  return os.str();
}

std::string sample_hash(const Sample& s) { return sha256_hex(serialize_line(s) + '\n'); }

std::string dataset_hash(const std::vector<Sample>& samples) {
  std::string all;
  for (const auto& s : samples) {
    all += serialize_line(s);
    all += '\n';
  }
  return sha256_hex(all);
}

}  // namespace hilgnn::data
