#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hilgnn/autodiff.hpp"
#include "hilgnn/grid.hpp"

namespace hilgnn::gnn {

using ad::Tensor;

enum class NodeType : int { Bus = 0, Gen = 1, Load = 2, Slack = 3 };
inline constexpr int kNodeTypes = 4;
std::string_view to_string(NodeType t);

/// Input feature widths per node type, and of the line edge attributes.
/// bus: [v_min, v_max, 1]; gen: [p_set, v_set, p_min, p_max, q_min, q_max];
/// load: [p, q]; slack: [v_set, angle]; line: [r, x, b_shunt, tap, s_max].
inline constexpr std::array<int, kNodeTypes> kFeatureDims = {3, 6, 2, 2};
inline constexpr int kEdgeFeatureDim = 5;

struct Relation {
  std::string_view name;
  NodeType src;
  NodeType dst;
  /// Line attributes are appended to the source features of each message.
  bool edge_features = false;
};

inline constexpr int kRelations = 11;
/// Fixed relation set: bus-bus lines (both directions), attachment edges in
/// both directions, and one self-loop relation per node type.
const std::array<Relation, kRelations>& relations();

struct EdgeList {
  std::vector<int> src;
  std::vector<int> dst;
  /// E x kEdgeFeatureDim for relations with edge features, else empty.
  Tensor attr;
  [[nodiscard]] std::size_t size() const { return src.size(); }
};

/// Typed-node view of one or more grid cases. Bus rows follow
/// `GridCase::buses` order; gen nodes are the generators not at the slack
/// bus; the slack generator is represented by the single slack node.
struct HeteroGraph {
  std::array<Tensor, kNodeTypes> x;
  std::array<EdgeList, kRelations> edges;
  /// Owning sample of each bus / slack row (all zero for a single case).
  std::vector<int> bus_graph;
  std::vector<int> slack_graph;
  int num_graphs = 1;

  [[nodiscard]] Eigen::Index count(NodeType t) const { return x[static_cast<int>(t)].rows(); }
};

HeteroGraph build_graph(const grid::GridCase& grid);
/// Disjoint union; node indices are offset per member graph.
HeteroGraph batch_graphs(std::span<const HeteroGraph> graphs);

struct ModelConfig {
  int hidden = 64;
  int layers = 2;
  double leaky_slope = 0.2;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

/// All learnable tensors. Per layer and relation: W_src (hidden x in_src,
/// widened by the edge features where used), W_dst (hidden x in_dst) and the
/// attention vector a (2*hidden x 1). Then the bus and slack heads
/// (2 x hidden weights, 1 x 2 biases).
struct ModelParams {
  ModelConfig config;
  std::vector<Tensor> tensors;
  std::vector<std::string> names;

  [[nodiscard]] std::size_t w_src(int layer, int rel) const { return (layer * kRelations + rel) * 3; }
  [[nodiscard]] std::size_t w_dst(int layer, int rel) const { return w_src(layer, rel) + 1; }
  [[nodiscard]] std::size_t attn(int layer, int rel) const { return w_src(layer, rel) + 2; }
  [[nodiscard]] std::size_t bus_head_w() const { return static_cast<std::size_t>(config.layers) * kRelations * 3; }
  [[nodiscard]] std::size_t bus_head_b() const { return bus_head_w() + 1; }
  [[nodiscard]] std::size_t slack_head_w() const { return bus_head_w() + 2; }
  [[nodiscard]] std::size_t slack_head_b() const { return bus_head_w() + 3; }
  [[nodiscard]] std::size_t parameter_count() const;

  bool operator==(const ModelParams&) const = default;
};

/// Glorot-uniform weights and attention vectors, zero head biases.
ModelParams init_params(const ModelConfig& cfg);

/// Parameters placed on a tape, index-aligned with ModelParams::tensors.
struct BoundParams {
  const ModelParams* params = nullptr;
  std::vector<ad::Var> vars;
};
BoundParams bind(ad::Tape& tape, const ModelParams& params, bool trainable = true);

struct LayerTrace {
  /// Per-relation attention coefficients (E x 1); unset for empty relations.
  std::array<ad::Var, kRelations> alpha;
  /// Per-relation pre-ReLU contributions summed at the destination.
  std::array<ad::Var, kNodeTypes> pre_activation;
  /// Normalized hidden state per node type.
  std::array<ad::Var, kNodeTypes> hidden;
};

struct ForwardResult {
  ad::Var y_bus;    // n_bus x 2: v_mag, v_ang
  ad::Var y_slack;  // n_slack x 2: p, q
  std::vector<LayerTrace> layers;
};

ForwardResult forward(const BoundParams& bound, const HeteroGraph& graph, ad::Tape& tape);

/// Tape-free prediction.
struct Prediction {
  Eigen::MatrixX2d y_b;
  Eigen::MatrixX2d y_s;
};
Prediction predict(const ModelParams& params, const HeteroGraph& graph);

/// Attention coefficients of one relation at one layer, edge order.
Eigen::VectorXd attention(const ModelParams& params, const HeteroGraph& graph, int layer, int relation);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary checkpoint, little-endian:
///   8 bytes  magic "HGNNCKP1"
///   u32      config JSON length, then that many bytes of JSON
///   u32      tensor count
///   per tensor: u32 name length, name bytes, u32 rows, u32 cols,
///               rows*cols f64 in row-major order
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace hilgnn::gnn
