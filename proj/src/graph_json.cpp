#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pyror/errors.hpp"
#include "pyror/graph.hpp"

namespace pyror {

namespace {

using json = nlohmann::ordered_json;

struct ParamsEmitter {
  json operator()(const ConvSpec& s) const {
    return {{"out_channels", s.out_channels},
            {"kernel", s.kernel},
            {"stride", s.stride},
            {"padding", s.padding}};
  }
  json operator()(const BatchNormSpec& s) const { return {{"channels", s.channels}}; }
  json operator()(const AvgPoolSpec& s) const { return {{"kernel", s.kernel}}; }
  json operator()(const LinearSpec& s) const {
    return {{"in_features", s.in_features}, {"out_features", s.out_features}};
  }
  json operator()(const ZeroPadChannelsSpec& s) const { return {{"extra", s.extra}}; }
  json operator()(const ChannelProjectSpec& s) const {
    return {{"out_channels", s.out_channels}, {"stride", s.stride}};
  }
  template <typename Other>
  json operator()(const Other&) const {
    return json::object();
  }
};

json params_json(const LayerOp& op) { return std::visit(ParamsEmitter{}, op); }

int require_int(const json& params, const char* key, int node_id) {
  if (!params.contains(key) || !params[key].is_number_integer())
    throw IoError("graph json: node " + std::to_string(node_id) + " missing integer param '" +
                  key + "'");
  return params[key].get<int>();
}

LayerOp op_from_json(const std::string& kind, const json& params, int node_id) {
  if (kind == "conv")
    return ConvSpec{require_int(params, "out_channels", node_id),
                    require_int(params, "kernel", node_id),
                    require_int(params, "stride", node_id),
                    require_int(params, "padding", node_id)};
  if (kind == "batch_norm") return BatchNormSpec{require_int(params, "channels", node_id)};
  if (kind == "relu") return ReluSpec{};
  if (kind == "add") return AddSpec{};
  if (kind == "avg_pool") return AvgPoolSpec{require_int(params, "kernel", node_id)};
  if (kind == "global_avg_pool") return GlobalAvgPoolSpec{};
  if (kind == "linear")
    return LinearSpec{require_int(params, "in_features", node_id),
                      require_int(params, "out_features", node_id)};
  if (kind == "zero_pad_channels")
    return ZeroPadChannelsSpec{require_int(params, "extra", node_id)};
  if (kind == "identity") return IdentitySpec{};
  if (kind == "channel_project")
    return ChannelProjectSpec{require_int(params, "out_channels", node_id),
                              require_int(params, "stride", node_id)};
  throw IoError("graph json: unknown node kind '" + kind + "'");
}

}  // namespace

std::string export_json(const LayerGraph& graph) {
  json doc;
  doc["format"] = "pyror_graph";
  doc["version"] = 1;
  doc["metadata"] = {{"depth", graph.config.depth},
                     {"alpha", graph.config.alpha},
                     {"variant", to_string(graph.config.block_variant)},
                     {"p_terminal", graph.config.p_terminal},
                     {"num_classes", graph.config.num_classes},
                     {"input_shape", graph.config.input_shape}};

  json nodes = json::array();
  for (const LayerNode& node : graph.nodes) {
    nodes.push_back({{"id", node.id},
                     {"kind", op_name(node.op)},
                     {"params", params_json(node.op)},
                     {"inputs", node.inputs}});
  }
  doc["nodes"] = std::move(nodes);

  json block_index = json::array();
  for (const LayerNode& node : graph.nodes) {
    const auto ref = graph.block_index.find(node.id);
    if (ref == graph.block_index.end()) continue;
    block_index.push_back(json::array(
        {node.id, ref->second.group, ref->second.block, to_string(ref->second.level)}));
  }
  json spans = json::array();
  for (const BlockSpan& span : graph.final_block_spans)
    spans.push_back(json::array({span.entry, span.exit}));

  doc["provenance"] = {{"input", graph.input_id},
                       {"output", graph.output_id},
                       {"block_index", std::move(block_index)},
                       {"final_block_spans", std::move(spans)}};
  return doc.dump(2) + "\n";
}

LayerGraph import_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& err) {
    throw IoError(std::string("graph json: ") + err.what());
  }
  if (doc.value("format", "") != "pyror_graph")
    throw IoError("graph json: missing or wrong format tag");
  if (doc.value("version", 0) != 1) throw IoError("graph json: unsupported version");

  LayerGraph graph;
  const json& meta = doc.at("metadata");
  graph.config.depth = meta.at("depth").get<int>();
  graph.config.alpha = meta.at("alpha").get<int>();
  graph.config.block_variant = block_variant_from_string(meta.at("variant").get<std::string>());
  graph.config.p_terminal = meta.at("p_terminal").get<double>();
  graph.config.num_classes = meta.at("num_classes").get<int>();
  const auto shape = meta.at("input_shape");
  if (!shape.is_array() || shape.size() != 3)
    throw IoError("graph json: input_shape must have 3 entries");
  for (int i = 0; i < 3; ++i) graph.config.input_shape[i] = shape[i].get<int>();

  for (const json& item : doc.at("nodes")) {
    LayerNode node;
    node.id = item.at("id").get<int>();
    node.op = op_from_json(item.at("kind").get<std::string>(), item.value("params", json::object()),
                           node.id);
    node.inputs = item.at("inputs").get<std::vector<int>>();
    graph.nodes.push_back(std::move(node));
  }

  const json& prov = doc.at("provenance");
  graph.input_id = prov.at("input").get<int>();
  graph.output_id = prov.at("output").get<int>();
  for (const json& entry : prov.at("block_index")) {
    if (!entry.is_array() || entry.size() != 4)
      throw IoError("graph json: malformed block_index entry");
    BlockRef ref;
    ref.group = entry[1].get<int>();
    ref.block = entry[2].get<int>();
    ref.level = level_from_string(entry[3].get<std::string>());
    graph.block_index.emplace(entry[0].get<int>(), ref);
  }
  for (const json& entry : prov.at("final_block_spans")) {
    if (!entry.is_array() || entry.size() != 2)
      throw IoError("graph json: malformed final_block_spans entry");
    graph.final_block_spans.push_back(BlockSpan{entry[0].get<int>(), entry[1].get<int>()});
  }
  return graph;
}

void save_graph_json(const LayerGraph& graph, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open for writing: " + path);
  file << export_json(graph);
  if (!file) throw IoError("write failed: " + path);
}

LayerGraph load_graph_json(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open: " + path);
  std::ostringstream contents;
  contents << file.rdbuf();
  return import_json(contents.str());
}

}  // namespace pyror
