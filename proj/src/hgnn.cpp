#include "hilgnn/hgnn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

namespace hilgnn::gnn {

using ad::Tape;
using ad::Var;

std::string_view to_string(NodeType t) {
  switch (t) {
    case NodeType::Bus: return "bus";
    case NodeType::Gen: return "gen";
    case NodeType::Load: return "load";
    case NodeType::Slack: return "slack";
  }
  return "?";
}

const std::array<Relation, kRelations>& relations() {
  static const std::array<Relation, kRelations> rels = {{
      {"bus_line_bus", NodeType::Bus, NodeType::Bus, true},
      {"gen_to_bus", NodeType::Gen, NodeType::Bus, false},
      {"load_to_bus", NodeType::Load, NodeType::Bus, false},
      {"slack_to_bus", NodeType::Slack, NodeType::Bus, false},
      {"bus_to_gen", NodeType::Bus, NodeType::Gen, false},
      {"bus_to_load", NodeType::Bus, NodeType::Load, false},
      {"bus_to_slack", NodeType::Bus, NodeType::Slack, false},
      {"bus_self", NodeType::Bus, NodeType::Bus, false},
      {"gen_self", NodeType::Gen, NodeType::Gen, false},
      {"load_self", NodeType::Load, NodeType::Load, false},
      {"slack_self", NodeType::Slack, NodeType::Slack, false},
  }};
  return rels;
}

namespace {

constexpr int idx(NodeType t) { return static_cast<int>(t); }

void add_edge(EdgeList& e, int s, int d) {
  e.src.push_back(s);
  e.dst.push_back(d);
}

}  // namespace

HeteroGraph build_graph(const grid::GridCase& grid) {
  HeteroGraph g;
  const auto nb = static_cast<Eigen::Index>(grid.buses.size());
  g.x[idx(NodeType::Bus)].resize(nb, kFeatureDims[0]);
  for (Eigen::Index i = 0; i < nb; ++i) {
    const auto& b = grid.buses[i];
    g.x[idx(NodeType::Bus)].row(i) << b.v_min, b.v_max, 1.0;
  }

  std::vector<std::size_t> gens;
  for (std::size_t k = 0; k < grid.generators.size(); ++k)
    if (grid.generators[k].bus != grid.slack.bus) gens.push_back(k);
  auto& xg = g.x[idx(NodeType::Gen)];
  xg.resize(static_cast<Eigen::Index>(gens.size()), kFeatureDims[1]);
  for (std::size_t r = 0; r < gens.size(); ++r) {
    const auto& gen = grid.generators[gens[r]];
    xg.row(static_cast<Eigen::Index>(r)) << gen.p_set, gen.v_set, gen.p_min, gen.p_max, gen.q_min, gen.q_max;
  }

  auto& xl = g.x[idx(NodeType::Load)];
  xl.resize(static_cast<Eigen::Index>(grid.loads.size()), kFeatureDims[2]);
  for (std::size_t r = 0; r < grid.loads.size(); ++r)
    xl.row(static_cast<Eigen::Index>(r)) << grid.loads[r].p, grid.loads[r].q;

  auto& xs = g.x[idx(NodeType::Slack)];
  xs.resize(1, kFeatureDims[3]);
  xs << grid.slack.v_set, grid.slack.angle;

  auto& line = g.edges[0];
  line.attr.resize(static_cast<Eigen::Index>(2 * grid.lines.size()), kEdgeFeatureDim);
  Eigen::Index row = 0;
  for (const auto& l : grid.lines) {
    const int f = static_cast<int>(grid.bus_index(l.from_bus));
    const int t = static_cast<int>(grid.bus_index(l.to_bus));
    add_edge(line, f, t);
    line.attr.row(row++) << l.r, l.x, l.b_shunt, l.tap, l.s_max;
    add_edge(line, t, f);
    line.attr.row(row++) << l.r, l.x, l.b_shunt, l.tap, l.s_max;
  }
  for (std::size_t r = 0; r < gens.size(); ++r) {
    const int b = static_cast<int>(grid.bus_index(grid.generators[gens[r]].bus));
    add_edge(g.edges[1], static_cast<int>(r), b);
    add_edge(g.edges[4], b, static_cast<int>(r));
  }
  for (std::size_t r = 0; r < grid.loads.size(); ++r) {
    const int b = static_cast<int>(grid.bus_index(grid.loads[r].bus));
    add_edge(g.edges[2], static_cast<int>(r), b);
    add_edge(g.edges[5], b, static_cast<int>(r));
  }
  const int sb = static_cast<int>(grid.bus_index(grid.slack.bus));
  add_edge(g.edges[3], 0, sb);
  add_edge(g.edges[6], sb, 0);
  for (int t = 0; t < kNodeTypes; ++t)
    for (Eigen::Index i = 0; i < g.x[t].rows(); ++i) add_edge(g.edges[7 + t], static_cast<int>(i), static_cast<int>(i));

  g.bus_graph.assign(static_cast<std::size_t>(nb), 0);
  g.slack_graph.assign(1, 0);
  g.num_graphs = 1;
  return g;
}

HeteroGraph batch_graphs(std::span<const HeteroGraph> graphs) {
  HeteroGraph out;
  out.num_graphs = 0;
  std::array<Eigen::Index, kNodeTypes> rows{};
  for (const auto& g : graphs)
    for (int t = 0; t < kNodeTypes; ++t) rows[t] += g.x[t].rows();
  for (int t = 0; t < kNodeTypes; ++t) out.x[t].resize(rows[t], kFeatureDims[t]);
  Eigen::Index line_rows = 0;
  for (const auto& g : graphs) line_rows += g.edges[0].attr.rows();
  out.edges[0].attr.resize(line_rows, kEdgeFeatureDim);

  std::array<int, kNodeTypes> offset{};
  Eigen::Index line_off = 0;
  for (const auto& g : graphs) {
    for (int t = 0; t < kNodeTypes; ++t) out.x[t].middleRows(offset[t], g.x[t].rows()) = g.x[t];
    for (int r = 0; r < kRelations; ++r) {
      const auto& rel = relations()[r];
      const auto& e = g.edges[r];
      for (std::size_t k = 0; k < e.size(); ++k)
        add_edge(out.edges[r], e.src[k] + offset[idx(rel.src)], e.dst[k] + offset[idx(rel.dst)]);
    }
    out.edges[0].attr.middleRows(line_off, g.edges[0].attr.rows()) = g.edges[0].attr;
    line_off += g.edges[0].attr.rows();
    for (int b : g.bus_graph) out.bus_graph.push_back(b + out.num_graphs);
    for (int s : g.slack_graph) out.slack_graph.push_back(s + out.num_graphs);
    for (int t = 0; t < kNodeTypes; ++t) offset[t] += static_cast<int>(g.x[t].rows());
    out.num_graphs += g.num_graphs;
  }
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

namespace {

Tensor glorot(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) t(r, c) = u(rng);
  return t;
}

int input_dim(int layer, NodeType t, int hidden) { return layer == 0 ? kFeatureDims[idx(t)] : hidden; }

}  // namespace

ModelParams init_params(const ModelConfig& cfg) {
  if (cfg.hidden <= 0 || cfg.layers <= 0) throw std::invalid_argument("model dimensions must be positive");
  ModelParams p;
  p.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  const int h = cfg.hidden;
  for (int l = 0; l < cfg.layers; ++l) {
    for (int r = 0; r < kRelations; ++r) {
      const auto& rel = relations()[r];
      const std::string prefix = "layer" + std::to_string(l) + "." + std::string(rel.name) + ".";
      const int in_src = input_dim(l, rel.src, h) + (rel.edge_features ? kEdgeFeatureDim : 0);
      p.tensors.push_back(glorot(h, in_src, rng));
      p.names.push_back(prefix + "w_src");
      p.tensors.push_back(glorot(h, input_dim(l, rel.dst, h), rng));
      p.names.push_back(prefix + "w_dst");
      p.tensors.push_back(glorot(2 * h, 1, rng));
      p.names.push_back(prefix + "attn");
    }
  }
  p.tensors.push_back(glorot(2, h, rng));
  p.names.push_back("head.bus.w");
  p.tensors.push_back(Tensor::Zero(1, 2));
  p.names.push_back("head.bus.b");
  p.tensors.push_back(glorot(2, h, rng));
  p.names.push_back("head.slack.w");
  p.tensors.push_back(Tensor::Zero(1, 2));
  p.names.push_back("head.slack.b");
  return p;
}

BoundParams bind(Tape& tape, const ModelParams& params, bool trainable) {
  BoundParams b;
  b.params = &params;
  b.vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) b.vars.push_back(trainable ? tape.variable(t) : tape.constant(t));
  return b;
}

ForwardResult forward(const BoundParams& bound, const HeteroGraph& graph, Tape& tape) {
  const ModelParams& p = *bound.params;
  const int h = p.config.hidden;
  for (int t = 0; t < kNodeTypes; ++t)
    if (graph.x[t].cols() != kFeatureDims[t])
      throw ad::ShapeError("forward: " + std::string(to_string(static_cast<NodeType>(t))) + " features have " +
                           std::to_string(graph.x[t].cols()) + " columns");

  std::array<Var, kNodeTypes> state;
  for (int t = 0; t < kNodeTypes; ++t) state[t] = tape.constant(graph.x[t]);
  Var line_attr = tape.constant(graph.edges[0].attr);

  ForwardResult out;
  for (int l = 0; l < p.config.layers; ++l) {
    LayerTrace trace;
    std::array<Var, kNodeTypes> agg{};
    for (int r = 0; r < kRelations; ++r) {
      const auto& rel = relations()[r];
      const auto& e = graph.edges[r];
      if (e.size() == 0) continue;
      const int s = idx(rel.src), d = idx(rel.dst);
      const Eigen::Index n_dst = graph.x[d].rows();
      const Var w_src = bound.vars[p.w_src(l, r)];
      const Var w_dst = bound.vars[p.w_dst(l, r)];
      const Var a = bound.vars[p.attn(l, r)];

      Var z_src;
      if (rel.edge_features) {
        z_src = ad::linear(ad::concat({ad::gather_rows(state[s], e.src), line_attr}), w_src);
      } else {
        z_src = ad::gather_rows(ad::linear(state[s], w_src), e.src);
      }
      const Var z_dst = ad::gather_rows(ad::linear(state[d], w_dst), e.dst);
      const Var logits = ad::leaky_relu(ad::matmul(ad::concat({z_dst, z_src}), a), p.config.leaky_slope);
      const Var alpha = ad::segment_softmax(logits, e.dst, n_dst);
      const Var msg = ad::scatter_add_rows(ad::row_scale(z_src, alpha), e.dst, n_dst);
      trace.alpha[r] = alpha;
      agg[d] = agg[d].tape ? ad::add(agg[d], msg) : msg;
    }
    for (int t = 0; t < kNodeTypes; ++t) {
      if (!agg[t].tape) agg[t] = tape.constant(Tensor::Zero(graph.x[t].rows(), h));
      trace.pre_activation[t] = agg[t];
      state[t] = ad::l2_normalize(ad::relu(agg[t]));
      trace.hidden[t] = state[t];
    }
    out.layers.push_back(trace);
  }
  out.y_bus = ad::add_row(ad::linear(state[idx(NodeType::Bus)], bound.vars[p.bus_head_w()]), bound.vars[p.bus_head_b()]);
  out.y_slack =
      ad::add_row(ad::linear(state[idx(NodeType::Slack)], bound.vars[p.slack_head_w()]), bound.vars[p.slack_head_b()]);
  return out;
}

Prediction predict(const ModelParams& params, const HeteroGraph& graph) {
  Tape tape;
  const auto bound = bind(tape, params, false);
  const auto res = forward(bound, graph, tape);
  return {res.y_bus.value(), res.y_slack.value()};
}

Eigen::VectorXd attention(const ModelParams& params, const HeteroGraph& graph, int layer, int relation) {
  if (layer < 0 || layer >= params.config.layers || relation < 0 || relation >= kRelations)
    throw std::out_of_range("attention: layer or relation out of range");
  Tape tape;
  const auto bound = bind(tape, params, false);
  const auto res = forward(bound, graph, tape);
  const Var a = res.layers[layer].alpha[relation];
  if (!a.tape) return Eigen::VectorXd(0);
  return a.value().col(0);
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
constexpr char kMagic[8] = {'H', 'G', 'N', 'N', 'C', 'K', 'P', '1'};

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  nlohmann::json cfg = {{"hidden", params.config.hidden},
                        {"layers", params.config.layers},
                        {"leaky_slope", params.config.leaky_slope},
                        {"seed", params.config.seed},
                        {"feature_dims", kFeatureDims},
                        {"edge_feature_dim", kEdgeFeatureDim}};
  const std::string text = cfg.dump();
  os.write(kMagic, sizeof kMagic);
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u32(os, static_cast<std::uint32_t>(params.tensors.size()));
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    const auto& t = params.tensors[k];
    put_u32(os, static_cast<std::uint32_t>(params.names[k].size()));
    os.write(params.names[k].data(), static_cast<std::streamsize>(params.names[k].size()));
    put_u32(os, static_cast<std::uint32_t>(t.rows()));
    put_u32(os, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        const double v = t(r, c);
        os.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw CheckpointError(path.string() + " is not a model checkpoint");
  std::string text(get_u32(is), '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text.size()))) throw CheckpointError("truncated checkpoint");

  ModelConfig cfg;
  try {
    const auto doc = nlohmann::json::parse(text);
    cfg.hidden = doc.at("hidden").get<int>();
    cfg.layers = doc.at("layers").get<int>();
    cfg.leaky_slope = doc.at("leaky_slope").get<double>();
    cfg.seed = doc.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
  // Shapes and names come from a freshly initialized model; the file must match.
  ModelParams params = init_params(cfg);
  const std::uint32_t count = get_u32(is);
  if (count != params.tensors.size()) throw CheckpointError("checkpoint tensor count mismatch");
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(get_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw CheckpointError("truncated checkpoint");
    const std::uint32_t rows = get_u32(is), cols = get_u32(is);
    Tensor& t = params.tensors[k];
    if (name != params.names[k] || rows != t.rows() || cols != t.cols())
      throw CheckpointError("checkpoint tensor '" + name + "' does not match the model layout");
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        double v;
        if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("truncated checkpoint");
        t(r, c) = v;
      }
  }
  return params;
}

}  // namespace hilgnn::gnn
