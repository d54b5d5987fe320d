#pragma once

#include <cstdint>
#include <unordered_map>

#include "pyror/graph.hpp"
#include "pyror/stochdepth.hpp"

namespace pyror {

struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& shape);

/// Per-node output shape for a given network input shape.
using ShapeMap = std::unordered_map<int, Shape>;

/// Propagates shapes in topological order. Conv/pool spatial sizes follow
/// floor((H + 2*pad - kernel) / stride) + 1. Throws ShapeError (with node
/// id) on Add operand disagreement or otherwise inconsistent wiring.
ShapeMap infer_shapes(const LayerGraph& graph, Shape input);
ShapeMap infer_shapes(const LayerGraph& graph);  // input from graph.config

struct ParamsByLevel {
  std::int64_t trunk = 0;
  std::int64_t final_shortcut = 0;
  std::int64_t middle_shortcut = 0;
  std::int64_t root_shortcut = 0;
  std::int64_t classifier = 0;

  std::int64_t total() const {
    return trunk + final_shortcut + middle_shortcut + root_shortcut + classifier;
  }
};

/// Exact learned-parameter count. Convs carry no bias (every conv is
/// followed by a BatchNorm); BatchNorm counts scale+shift; Linear counts
/// weight+bias; pools, Add, Identity and ZeroPadChannels are free.
ParamsByLevel count_params(const LayerGraph& graph);

/// Forward multiply-accumulate count for batch size 1. Conv and the 1x1
/// projections count out*in*k^2 per output position, Linear counts in*out;
/// elementwise ops and pooling count zero.
std::uint64_t count_flops(const LayerGraph& graph, Shape input);
std::uint64_t count_flops(const LayerGraph& graph);

/// Expected fraction of forward MACs under a survival schedule:
/// (sum_l p_l * macs(block l) + macs(everything else)) / total macs.
/// Schedule length must equal the graph's final-level block count.
double expected_compute(const LayerGraph& graph, const SurvivalSchedule& schedule);

struct AnalysisReport {
  std::int64_t total_params = 0;
  ParamsByLevel params_by_level;
  std::uint64_t flops_forward = 0;
  double expected_flops_sd = 0.0;  // == flops_forward when no schedule given
};

AnalysisReport analyze(const LayerGraph& graph, const SurvivalSchedule* schedule = nullptr);

}  // namespace pyror
