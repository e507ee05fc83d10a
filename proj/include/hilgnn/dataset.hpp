#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hilgnn/grid.hpp"
#include "hilgnn/powerflow.hpp"

namespace hilgnn::data {

enum class Source { Synthetic, Hil };

struct Sample {
  grid::GridCase grid;
  pf::PfSolution solution;
  Source source = Source::Synthetic;
  std::uint64_t seed = 0;
};

struct MutationConfig {
  /// Probability that a given load is mutated.
  double rate = 0.7;
  /// Half-range of the uniform multiplier, centred on 1.
  double width = 0.5;
  std::uint64_t rng_seed = 0;
};

using Rng = std::mt19937_64;

/// Scales each selected load's P and Q by independent Uniform[1-w, 1+w]
/// multipliers. Draws from `rng`, so successive calls continue one stream.
grid::GridCase mutate_loads(const grid::GridCase& base, const MutationConfig& cfg, Rng& rng);
/// Same, on a fresh stream seeded with `cfg.rng_seed`.
grid::GridCase mutate_loads(const grid::GridCase& base, const MutationConfig& cfg);

struct GenerateResult {
  std::vector<Sample> samples;
  /// Draws discarded because the power flow failed.
  std::size_t redraws = 0;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sample i comes from the stream seeded with `cfg.rng_seed + i`; failed
/// draws are redrawn from that same stream. Throws GenerationError once
/// more than half of all draws (after the first ten) have failed.
GenerateResult generate(const grid::GridCase& base, std::size_t n, const MutationConfig& cfg,
                        const pf::PfOptions& pf_opts = {});

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string_view to_string(Source s);
Source source_from_string(std::string_view s);

nlohmann::json solution_to_json(const pf::PfSolution& sol);
pf::PfSolution solution_from_json(const nlohmann::json& doc);
nlohmann::json sample_to_json(const Sample& s);
Sample sample_from_json(const nlohmann::json& doc);

/// One compact JSON document per line; the exact bytes written by save.
std::string serialize_line(const Sample& s);

void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& path);
std::vector<Sample> load_dataset(const std::filesystem::path& path);

/// Hex SHA-256 of a sample's serialized line.
std::string sample_hash(const Sample& s);
/// Hex SHA-256 over the concatenated serialized lines (equals the file hash).
std::string dataset_hash(const std::vector<Sample>& samples);

std::string sha256_hex(std::string_view bytes);

}  // namespace hilgnn::data
