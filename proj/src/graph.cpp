#include "pyror/graph.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "pyror/analyzer.hpp"
#include "pyror/errors.hpp"

namespace pyror {

const char* op_name(const LayerOp& op) {
  struct Namer {
    const char* operator()(const ConvSpec&) const { return "conv"; }
    const char* operator()(const BatchNormSpec&) const { return "batch_norm"; }
    const char* operator()(const ReluSpec&) const { return "relu"; }
    const char* operator()(const AddSpec&) const { return "add"; }
    const char* operator()(const AvgPoolSpec&) const { return "avg_pool"; }
    const char* operator()(const GlobalAvgPoolSpec&) const { return "global_avg_pool"; }
    const char* operator()(const LinearSpec&) const { return "linear"; }
    const char* operator()(const ZeroPadChannelsSpec&) const { return "zero_pad_channels"; }
    const char* operator()(const IdentitySpec&) const { return "identity"; }
    const char* operator()(const ChannelProjectSpec&) const { return "channel_project"; }
  };
  return std::visit(Namer{}, op);
}

std::string to_string(Level level) {
  switch (level) {
    case Level::Final:
      return "final";
    case Level::Middle:
      return "middle";
    case Level::Root:
      return "root";
    case Level::Trunk:
      return "trunk";
  }
  throw std::logic_error("unreachable level");
}

Level level_from_string(const std::string& name) {
  if (name == "final") return Level::Final;
  if (name == "middle") return Level::Middle;
  if (name == "root") return Level::Root;
  if (name == "trunk") return Level::Trunk;
  throw IoError("unknown level tag '" + name + "'");
}

const LayerNode& LayerGraph::node(int id) const {
  if (id >= 0 && id < static_cast<int>(nodes.size()) && nodes[id].id == id) return nodes[id];
  for (const LayerNode& n : nodes) {
    if (n.id == id) return n;
  }
  throw std::out_of_range("no node with id " + std::to_string(id));
}

bool graph_equal(const LayerGraph& a, const LayerGraph& b) {
  return a.nodes == b.nodes && a.input_id == b.input_id && a.output_id == b.output_id &&
         a.final_block_spans == b.final_block_spans && a.block_index == b.block_index;
}

std::vector<LayerNode> block_subgraph(BlockVariant variant, int in_channels,
                                      int out_channels, int stride, int input_id,
                                      int first_id) {
  if (in_channels < 1 || out_channels < 1)
    throw ConfigError("block channel counts must be positive");
  if (stride != 1 && stride != 2) throw ConfigError("block stride must be 1 or 2");

  std::vector<LayerNode> nodes;
  int id = first_id;
  int prev = input_id;
  auto push = [&](LayerOp op) {
    nodes.push_back(LayerNode{id, std::move(op), {prev}});
    prev = id++;
  };

  switch (variant) {
    case BlockVariant::PreAct:
      push(BatchNormSpec{in_channels});
      push(ReluSpec{});
      push(ConvSpec{out_channels, 3, stride, 1});
      push(BatchNormSpec{out_channels});
      push(ReluSpec{});
      push(ConvSpec{out_channels, 3, 1, 1});
      break;
    case BlockVariant::PyramidBN:
      push(BatchNormSpec{in_channels});
      push(ConvSpec{out_channels, 3, stride, 1});
      push(BatchNormSpec{out_channels});
      push(ReluSpec{});
      push(ConvSpec{out_channels, 3, 1, 1});
      push(BatchNormSpec{out_channels});
      break;
  }
  return nodes;
}

LayerGraph build_graph(const ArchConfig& config) {
  validate(config);
  const BlockCounts counts = derive_block_counts(config.depth);
  const int n = counts.per_group;
  const ChannelSchedule schedule = pyramidal_widths(config.alpha, counts.total);
  const int stem = schedule.stem_width;

  LayerGraph graph;
  graph.config = config;
  int next_id = 0;

  auto add_node = [&](LayerOp op, std::vector<int> inputs, BlockRef ref) {
    const int id = next_id++;
    graph.nodes.push_back(LayerNode{id, std::move(op), std::move(inputs)});
    graph.block_index.emplace(id, ref);
    return id;
  };
  const BlockRef trunk_ref{};

  // Stem: 3x3 conv to the stem width, then BN so both block variants see
  // normalized input.
  const int stem_conv = add_node(ConvSpec{stem, 3, 1, 1}, {}, trunk_ref);
  const int stem_bn = add_node(BatchNormSpec{stem}, {stem_conv}, trunk_ref);
  graph.input_id = stem_conv;

  int stream = stem_bn;
  int stream_channels = stem;

  for (int g = 1; g <= 3; ++g) {
    const int group_input = stream;

    for (int k = 1; k <= n; ++k) {
      const int block_ordinal = (g - 1) * n + k;  // 1-based network order
      const int out_channels = schedule.widths[block_ordinal - 1];
      const int stride = (g > 1 && k == 1) ? 2 : 1;
      const BlockRef ref{g, k, Level::Final};

      const int entry = next_id;
      std::vector<LayerNode> trunk =
          block_subgraph(config.block_variant, stream_channels, out_channels, stride,
                         stream, entry);
      for (LayerNode& node : trunk) {
        graph.block_index.emplace(node.id, ref);
        graph.nodes.push_back(std::move(node));
      }
      next_id = entry + static_cast<int>(trunk.size());
      const int trunk_out = next_id - 1;

      // Type A shortcut: parameter-free. Average pooling handles the
      // spatial drop, zero padding handles the width growth.
      int shortcut = stream;
      if (stride == 2) shortcut = add_node(AvgPoolSpec{2}, {shortcut}, ref);
      if (out_channels > stream_channels)
        shortcut = add_node(ZeroPadChannelsSpec{out_channels - stream_channels},
                            {shortcut}, ref);
      if (shortcut == stream) shortcut = add_node(IdentitySpec{}, {shortcut}, ref);

      const int block_add = add_node(AddSpec{}, {trunk_out, shortcut}, ref);
      graph.final_block_spans.push_back(BlockSpan{entry, block_add});
      stream = block_add;
      stream_channels = out_channels;
    }

    // Middle-level type B shortcut across the whole group.
    const BlockRef mid_ref{g, 0, Level::Middle};
    const int proj_stride = g == 1 ? 1 : 2;
    const int proj =
        add_node(ChannelProjectSpec{stream_channels, proj_stride}, {group_input}, mid_ref);
    stream = add_node(AddSpec{}, {stream, proj}, mid_ref);
  }

  // Root-level type B shortcut from the post-stem activation to the tail.
  const BlockRef root_ref{0, 0, Level::Root};
  const int root_proj =
      add_node(ChannelProjectSpec{stream_channels, 4}, {stem_bn}, root_ref);
  stream = add_node(AddSpec{}, {stream, root_proj}, root_ref);

  const int tail_bn = add_node(BatchNormSpec{stream_channels}, {stream}, trunk_ref);
  const int tail_relu = add_node(ReluSpec{}, {tail_bn}, trunk_ref);
  const int pool = add_node(GlobalAvgPoolSpec{}, {tail_relu}, trunk_ref);
  graph.output_id =
      add_node(LinearSpec{stream_channels, config.num_classes}, {pool}, trunk_ref);

  return graph;
}

std::vector<std::string> validate_graph(const LayerGraph& graph) {
  std::vector<std::string> findings;
  auto report = [&findings](const std::string& msg) { findings.push_back(msg); };

  if (graph.nodes.empty()) {
    report("graph has no nodes");
    return findings;
  }

  // Topological-order validity: every input must refer to an id defined
  // strictly earlier in the node sequence. This also rules out cycles.
  std::unordered_set<int> seen;
  std::unordered_set<int> consumed;
  int sources = 0;
  for (const LayerNode& node : graph.nodes) {
    if (seen.count(node.id))
      report("duplicate node id " + std::to_string(node.id));
    if (node.inputs.empty()) ++sources;
    for (int input : node.inputs) {
      if (!seen.count(input))
        report("node " + std::to_string(node.id) + " consumes id " + std::to_string(input) +
               " which does not precede it");
      consumed.insert(input);
    }
    seen.insert(node.id);
  }
  if (sources != 1) report("expected a single source node, found " + std::to_string(sources));

  int sinks = 0;
  for (const LayerNode& node : graph.nodes)
    if (!consumed.count(node.id)) ++sinks;
  if (sinks != 1) report("expected a single sink node, found " + std::to_string(sinks));
  if (!seen.count(graph.output_id))
    report("output id " + std::to_string(graph.output_id) + " is not a node");

  // Shortcut Add counts per level.
  int final_adds = 0, middle_adds = 0, root_adds = 0, projections = 0;
  for (const LayerNode& node : graph.nodes) {
    const auto ref = graph.block_index.find(node.id);
    const Level level = ref == graph.block_index.end() ? Level::Trunk : ref->second.level;
    if (std::holds_alternative<AddSpec>(node.op)) {
      if (level == Level::Final) ++final_adds;
      if (level == Level::Middle) ++middle_adds;
      if (level == Level::Root) ++root_adds;
    }
    if (std::holds_alternative<ChannelProjectSpec>(node.op)) ++projections;
  }
  const int expected_final = graph.final_block_count();
  if (final_adds != expected_final)
    report("final-level Add count " + std::to_string(final_adds) + " != " +
           std::to_string(expected_final));
  if (middle_adds != 3)
    report("middle-level Add count " + std::to_string(middle_adds) + " != 3");
  if (root_adds != 1) report("root-level Add count " + std::to_string(root_adds) + " != 1");
  if (projections != 4)
    report("learned projection count " + std::to_string(projections) + " != 4");

  // Weighted-layer naming convention: trunk convs plus the classifier.
  int weighted = 0;
  for (const LayerNode& node : graph.nodes) {
    if (std::holds_alternative<ConvSpec>(node.op) ||
        std::holds_alternative<LinearSpec>(node.op))
      ++weighted;
  }
  if (weighted != graph.config.depth)
    report("weighted-layer count " + std::to_string(weighted) + " != configured depth " +
           std::to_string(graph.config.depth));

  // Shape agreement (covers Add operand mismatch) only once the structure
  // above is sound enough to walk.
  if (findings.empty()) {
    try {
      infer_shapes(graph);
    } catch (const ShapeError& err) {
      report(err.what());
    }
  }
  return findings;
}

}  // namespace pyror
