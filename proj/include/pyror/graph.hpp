#pragma once

#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "pyror/archspec.hpp"

namespace pyror {

struct ConvSpec {
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  bool operator==(const ConvSpec&) const = default;
};

struct BatchNormSpec {
  int channels = 0;
  bool operator==(const BatchNormSpec&) const = default;
};

struct ReluSpec {
  bool operator==(const ReluSpec&) const = default;
};

struct AddSpec {
  bool operator==(const AddSpec&) const = default;
};

/// Subsampling average pool: stride equals kernel, no padding.
struct AvgPoolSpec {
  int kernel = 2;
  bool operator==(const AvgPoolSpec&) const = default;
};

struct GlobalAvgPoolSpec {
  bool operator==(const GlobalAvgPoolSpec&) const = default;
};

struct LinearSpec {
  int in_features = 0;
  int out_features = 0;
  bool operator==(const LinearSpec&) const = default;
};

/// Appends `extra` zero-valued channels (parameter-free width growth).
struct ZeroPadChannelsSpec {
  int extra = 0;
  bool operator==(const ZeroPadChannelsSpec&) const = default;
};

struct IdentitySpec {
  bool operator==(const IdentitySpec&) const = default;
};

/// Learned 1x1 convolution projection (type B shortcut).
struct ChannelProjectSpec {
  int out_channels = 0;
  int stride = 1;
  bool operator==(const ChannelProjectSpec&) const = default;
};

using LayerOp = std::variant<ConvSpec, BatchNormSpec, ReluSpec, AddSpec, AvgPoolSpec,
                             GlobalAvgPoolSpec, LinearSpec, ZeroPadChannelsSpec,
                             IdentitySpec, ChannelProjectSpec>;

/// Stable lowercase tag for an op, as used in the JSON format.
const char* op_name(const LayerOp& op);

/// A node with empty `inputs` reads the network input tensor.
/// Add nodes order their inputs [trunk, shortcut].
struct LayerNode {
  int id = 0;
  LayerOp op;
  std::vector<int> inputs;
  bool operator==(const LayerNode&) const = default;
};

enum class Level { Final, Middle, Root, Trunk };

std::string to_string(Level level);
Level level_from_string(const std::string& name);

/// Provenance of a node: which group/block it belongs to and at which
/// shortcut level. Stem and tail nodes are Trunk with group/block 0.
struct BlockRef {
  int group = 0;
  int block = 0;
  Level level = Level::Trunk;
  bool operator==(const BlockRef&) const = default;
};

/// Entry (first trunk node) and exit (the Add) of one final-level block.
struct BlockSpan {
  int entry = 0;
  int exit = 0;
  bool operator==(const BlockSpan&) const = default;
};

struct LayerGraph {
  ArchConfig config;
  std::vector<LayerNode> nodes;  // topological order; node ids are 0..n-1
  int input_id = 0;
  int output_id = 0;
  std::unordered_map<int, BlockRef> block_index;
  std::vector<BlockSpan> final_block_spans;  // network order, one per final block

  int final_block_count() const { return static_cast<int>(final_block_spans.size()); }
  const LayerNode& node(int id) const;
};

bool graph_equal(const LayerGraph& a, const LayerGraph& b);

/// Elaborates a validated config into the full layer graph:
/// stem conv+BN, three groups of final-level blocks with type A shortcuts,
/// one type B projection per group plus the root projection, and the
/// BN-ReLU-pool-linear tail. Deterministic: equal configs give equal graphs.
LayerGraph build_graph(const ArchConfig& config);

/// Trunk nodes of one residual block, wired from `input_id` with ids
/// starting at `first_id`. The last node is the trunk output; the caller
/// adds the shortcut path and the Add.
std::vector<LayerNode> block_subgraph(BlockVariant variant, int in_channels,
                                      int out_channels, int stride, int input_id,
                                      int first_id);

/// Structural checks: topological-order validity, single source/sink,
/// acyclicity, Add shape agreement, and the expected Add/projection counts.
/// Returns human-readable findings; empty on success.
std::vector<std::string> validate_graph(const LayerGraph& graph);

/// Deterministic JSON document: metadata, ordered node array, provenance.
/// export_json(import_json(s)) == s for any exported document.
std::string export_json(const LayerGraph& graph);
LayerGraph import_json(const std::string& text);

void save_graph_json(const LayerGraph& graph, const std::string& path);
LayerGraph load_graph_json(const std::string& path);

}  // namespace pyror
