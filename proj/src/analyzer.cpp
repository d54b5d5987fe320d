#include "pyror/analyzer.hpp"

#include <sstream>

#include "pyror/errors.hpp"

namespace pyror {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << "(" << shape.channels << ", " << shape.height << ", " << shape.width << ")";
  return out.str();
}

namespace {

int conv_extent(int extent, int kernel, int stride, int padding) {
  return (extent + 2 * padding - kernel) / stride + 1;
}

[[noreturn]] void shape_fail(int node_id, const std::string& what) {
  throw ShapeError("node " + std::to_string(node_id) + ": " + what, node_id);
}

struct ShapeVisitor {
  int node_id;
  const std::vector<Shape>& in;

  Shape operator()(const ConvSpec& spec) const {
    const Shape& x = in[0];
    if (x.height + 2 * spec.padding < spec.kernel || x.width + 2 * spec.padding < spec.kernel)
      shape_fail(node_id, "conv kernel larger than padded input " + to_string(x));
    return Shape{spec.out_channels,
                 conv_extent(x.height, spec.kernel, spec.stride, spec.padding),
                 conv_extent(x.width, spec.kernel, spec.stride, spec.padding)};
  }
  Shape operator()(const BatchNormSpec& spec) const {
    if (in[0].channels != spec.channels)
      shape_fail(node_id, "batch_norm over " + std::to_string(spec.channels) +
                              " channels applied to " + to_string(in[0]));
    return in[0];
  }
  Shape operator()(const ReluSpec&) const { return in[0]; }
  Shape operator()(const AddSpec&) const {
    for (std::size_t i = 1; i < in.size(); ++i) {
      if (!(in[i] == in[0]))
        shape_fail(node_id, "add operands disagree: " + to_string(in[0]) + " vs " +
                                to_string(in[i]));
    }
    return in[0];
  }
  Shape operator()(const AvgPoolSpec& spec) const {
    const Shape& x = in[0];
    if (x.height < spec.kernel || x.width < spec.kernel)
      shape_fail(node_id, "avg_pool window larger than input " + to_string(x));
    return Shape{x.channels, conv_extent(x.height, spec.kernel, spec.kernel, 0),
                 conv_extent(x.width, spec.kernel, spec.kernel, 0)};
  }
  Shape operator()(const GlobalAvgPoolSpec&) const { return Shape{in[0].channels, 1, 1}; }
  Shape operator()(const LinearSpec& spec) const {
    const Shape& x = in[0];
    if (x.channels * x.height * x.width != spec.in_features)
      shape_fail(node_id, "linear expects " + std::to_string(spec.in_features) +
                              " features, input is " + to_string(x));
    return Shape{spec.out_features, 1, 1};
  }
  Shape operator()(const ZeroPadChannelsSpec& spec) const {
    return Shape{in[0].channels + spec.extra, in[0].height, in[0].width};
  }
  Shape operator()(const IdentitySpec&) const { return in[0]; }
  Shape operator()(const ChannelProjectSpec& spec) const {
    const Shape& x = in[0];
    return Shape{spec.out_channels, conv_extent(x.height, 1, spec.stride, 0),
                 conv_extent(x.width, 1, spec.stride, 0)};
  }
};

}  // namespace

ShapeMap infer_shapes(const LayerGraph& graph, Shape input) {
  ShapeMap shapes;
  shapes.reserve(graph.nodes.size());
  for (const LayerNode& node : graph.nodes) {
    std::vector<Shape> in;
    in.reserve(node.inputs.empty() ? 1 : node.inputs.size());
    if (node.inputs.empty()) {
      in.push_back(input);
    } else {
      for (int input_id : node.inputs) {
        const auto it = shapes.find(input_id);
        if (it == shapes.end())
          shape_fail(node.id, "consumes id " + std::to_string(input_id) +
                                  " with no inferred shape");
        in.push_back(it->second);
      }
    }
    if (in.empty()) shape_fail(node.id, "has no inputs to infer from");
    shapes.emplace(node.id, std::visit(ShapeVisitor{node.id, in}, node.op));
  }
  return shapes;
}

ShapeMap infer_shapes(const LayerGraph& graph) {
  const auto& s = graph.config.input_shape;
  return infer_shapes(graph, Shape{s[0], s[1], s[2]});
}

namespace {

// Learned parameters per node. Convs are bias-free (BN always follows).
struct ParamCounter {
  int in_channels;
  std::int64_t operator()(const ConvSpec& s) const {
    return static_cast<std::int64_t>(s.out_channels) * in_channels * s.kernel * s.kernel;
  }
  std::int64_t operator()(const BatchNormSpec& s) const { return 2ll * s.channels; }
  std::int64_t operator()(const LinearSpec& s) const {
    return static_cast<std::int64_t>(s.in_features) * s.out_features + s.out_features;
  }
  std::int64_t operator()(const ChannelProjectSpec& s) const {
    return static_cast<std::int64_t>(s.out_channels) * in_channels;
  }
  template <typename Other>
  std::int64_t operator()(const Other&) const {
    return 0;
  }
};

std::int64_t node_params(const LayerNode& node, const Shape& input_shape) {
  return std::visit(ParamCounter{input_shape.channels}, node.op);
}

bool is_shortcut_kind(const LayerOp& op) {
  return std::holds_alternative<IdentitySpec>(op) || std::holds_alternative<AvgPoolSpec>(op) ||
         std::holds_alternative<ZeroPadChannelsSpec>(op);
}

}  // namespace

ParamsByLevel count_params(const LayerGraph& graph) {
  const ShapeMap shapes = infer_shapes(graph);
  const auto& cfg = graph.config.input_shape;
  const Shape network_input{cfg[0], cfg[1], cfg[2]};

  ParamsByLevel by_level;
  for (const LayerNode& node : graph.nodes) {
    const Shape in_shape =
        node.inputs.empty() ? network_input : shapes.at(node.inputs.front());
    const std::int64_t params = node_params(node, in_shape);
    const auto ref = graph.block_index.find(node.id);
    const Level level = ref == graph.block_index.end() ? Level::Trunk : ref->second.level;
    switch (level) {
      case Level::Final:
        if (is_shortcut_kind(node.op))
          by_level.final_shortcut += params;
        else
          by_level.trunk += params;
        break;
      case Level::Middle:
        by_level.middle_shortcut += params;
        break;
      case Level::Root:
        by_level.root_shortcut += params;
        break;
      case Level::Trunk:
        if (std::holds_alternative<LinearSpec>(node.op))
          by_level.classifier += params;
        else
          by_level.trunk += params;
        break;
    }
  }
  return by_level;
}

namespace {

struct MacCounter {
  const Shape& in;
  const Shape& out;
  std::uint64_t operator()(const ConvSpec& s) const {
    return static_cast<std::uint64_t>(s.out_channels) * in.channels * s.kernel * s.kernel *
           out.height * out.width;
  }
  std::uint64_t operator()(const LinearSpec& s) const {
    return static_cast<std::uint64_t>(s.in_features) * s.out_features;
  }
  std::uint64_t operator()(const ChannelProjectSpec& s) const {
    return static_cast<std::uint64_t>(s.out_channels) * in.channels * out.height * out.width;
  }
  template <typename Other>
  std::uint64_t operator()(const Other&) const {
    return 0;
  }
};

std::uint64_t node_macs(const LayerNode& node, const Shape& input_shape,
                        const Shape& output_shape) {
  return std::visit(MacCounter{input_shape, output_shape}, node.op);
}

}  // namespace

std::uint64_t count_flops(const LayerGraph& graph, Shape input) {
  const ShapeMap shapes = infer_shapes(graph, input);
  std::uint64_t total = 0;
  for (const LayerNode& node : graph.nodes) {
    const Shape in_shape = node.inputs.empty() ? input : shapes.at(node.inputs.front());
    total += node_macs(node, in_shape, shapes.at(node.id));
  }
  return total;
}

std::uint64_t count_flops(const LayerGraph& graph) {
  const auto& s = graph.config.input_shape;
  return count_flops(graph, Shape{s[0], s[1], s[2]});
}

double expected_compute(const LayerGraph& graph, const SurvivalSchedule& schedule) {
  if (schedule.size() != graph.final_block_count())
    throw ConfigError("schedule length " + std::to_string(schedule.size()) +
                      " != final block count " + std::to_string(graph.final_block_count()));

  const auto& cfg = graph.config.input_shape;
  const Shape input{cfg[0], cfg[1], cfg[2]};
  const ShapeMap shapes = infer_shapes(graph, input);

  // Spans are contiguous id ranges in network order; map a node id to its
  // 0-based block ordinal, or -1 for non-droppable nodes.
  auto block_of = [&graph](int id) {
    for (std::size_t i = 0; i < graph.final_block_spans.size(); ++i) {
      const BlockSpan& span = graph.final_block_spans[i];
      if (id >= span.entry && id <= span.exit) return static_cast<int>(i);
    }
    return -1;
  };

  double expected = 0.0;
  std::uint64_t total = 0;
  for (const LayerNode& node : graph.nodes) {
    const Shape in_shape = node.inputs.empty() ? input : shapes.at(node.inputs.front());
    const std::uint64_t macs = node_macs(node, in_shape, shapes.at(node.id));
    total += macs;
    const int block = is_shortcut_kind(node.op) ? -1 : block_of(node.id);
    if (block >= 0) {
      expected += schedule.probs[block] * static_cast<double>(macs);
    } else {
      expected += static_cast<double>(macs);
    }
  }
  if (total == 0) return 1.0;
  return expected / static_cast<double>(total);
}

AnalysisReport analyze(const LayerGraph& graph, const SurvivalSchedule* schedule) {
  AnalysisReport report;
  report.params_by_level = count_params(graph);
  report.total_params = report.params_by_level.total();
  report.flops_forward = count_flops(graph);
  const double fraction = schedule ? expected_compute(graph, *schedule) : 1.0;
  report.expected_flops_sd = fraction * static_cast<double>(report.flops_forward);
  return report;
}

}  // namespace pyror
