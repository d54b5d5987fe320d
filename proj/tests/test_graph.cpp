#include <doctest.h>

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "pyror/archspec.hpp"
#include "pyror/errors.hpp"
#include "pyror/graph.hpp"

#include "test_util.hpp"

using namespace pyror;

namespace {

ArchConfig small_config(int depth, int alpha, BlockVariant variant) {
  ArchConfig cfg;
  cfg.depth = depth;
  cfg.alpha = alpha;
  cfg.block_variant = variant;
  return cfg;
}

int count_ops(const LayerGraph& g, bool (*pred)(const LayerOp&)) {
  int count = 0;
  for (const LayerNode& node : g.nodes)
    if (pred(node.op)) ++count;
  return count;
}

int count_adds_at(const LayerGraph& g, Level level) {
  int count = 0;
  for (const LayerNode& node : g.nodes) {
    if (!std::holds_alternative<AddSpec>(node.op)) continue;
    const auto it = g.block_index.find(node.id);
    if (it != g.block_index.end() && it->second.level == level) ++count;
  }
  return count;
}

bool contains(const std::vector<std::string>& findings, const std::string& needle) {
  for (const std::string& f : findings)
    if (f.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_SUITE("graph") {

TEST_CASE("depth-110 graph has the full three-level shortcut structure") {
  const LayerGraph g = build_graph(small_config(110, 48, BlockVariant::PyramidBN));

  CHECK(g.final_block_count() == 54);
  CHECK(count_adds_at(g, Level::Final) == 54);
  CHECK(count_adds_at(g, Level::Middle) == 3);
  CHECK(count_adds_at(g, Level::Root) == 1);
  CHECK(count_ops(g, [](const LayerOp& op) {
          return std::holds_alternative<ChannelProjectSpec>(op);
        }) == 4);

  // Weighted-layer naming convention: trunk convs plus the classifier.
  CHECK(count_ops(g, [](const LayerOp& op) {
          return std::holds_alternative<ConvSpec>(op) ||
                 std::holds_alternative<LinearSpec>(op);
        }) == 110);

  // Classifier consumes the final width.
  const LayerNode& out = g.node(g.output_id);
  REQUIRE(std::holds_alternative<LinearSpec>(out.op));
  CHECK(std::get<LinearSpec>(out.op).in_features == 64);
  CHECK(std::get<LinearSpec>(out.op).out_features == 10);
}

TEST_CASE("node ids are dense and match their position") {
  const LayerGraph g = build_graph(small_config(56, 84, BlockVariant::PreAct));
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    CHECK(g.nodes[i].id == static_cast<int>(i));
  CHECK(g.node(0).id == 0);
  CHECK_THROWS_AS(g.node(static_cast<int>(g.nodes.size())), std::out_of_range);
  CHECK_THROWS_AS(g.node(-1), std::out_of_range);
}

TEST_CASE("depth-8 alpha-3 blocks widen one channel at a time") {
  const LayerGraph g = build_graph(small_config(8, 3, BlockVariant::PyramidBN));
  REQUIRE(g.final_block_count() == 3);

  std::vector<int> widths;
  for (const BlockSpan& span : g.final_block_spans) {
    // Second trunk conv carries the block's output width in both variants.
    int convs = 0;
    int width = -1;
    for (int id = span.entry; id < span.exit; ++id) {
      if (const auto* conv = std::get_if<ConvSpec>(&g.node(id).op)) {
        ++convs;
        width = conv->out_channels;
      }
    }
    CHECK(convs == 2);
    widths.push_back(width);
  }
  CHECK(widths == std::vector<int>{17, 18, 19});
  CHECK(std::get<LinearSpec>(g.node(g.output_id).op).in_features == 19);
}

TEST_CASE("strides appear on the first conv of groups two and three") {
  const LayerGraph g = build_graph(small_config(14, 48, BlockVariant::PyramidBN));
  REQUIRE(g.final_block_count() == 6);
  std::vector<int> first_conv_strides;
  for (const BlockSpan& span : g.final_block_spans) {
    for (int id = span.entry; id < span.exit; ++id) {
      if (const auto* conv = std::get_if<ConvSpec>(&g.node(id).op)) {
        first_conv_strides.push_back(conv->stride);
        break;
      }
    }
  }
  CHECK(first_conv_strides == std::vector<int>{1, 1, 2, 1, 2, 1});
}

TEST_CASE("every final Add lists trunk first, shortcut second") {
  for (BlockVariant variant : {BlockVariant::PreAct, BlockVariant::PyramidBN}) {
    const LayerGraph g = build_graph(small_config(20, 30, variant));
    for (const BlockSpan& span : g.final_block_spans) {
      const LayerNode& add = g.node(span.exit);
      REQUIRE(std::holds_alternative<AddSpec>(add.op));
      REQUIRE(add.inputs.size() == 2);

      const LayerNode& trunk = g.node(add.inputs[0]);
      const bool trunk_kind = std::holds_alternative<ConvSpec>(trunk.op) ||
                              std::holds_alternative<BatchNormSpec>(trunk.op);
      CHECK(trunk_kind);
      if (variant == BlockVariant::PreAct) CHECK(std::holds_alternative<ConvSpec>(trunk.op));
      if (variant == BlockVariant::PyramidBN)
        CHECK(std::holds_alternative<BatchNormSpec>(trunk.op));

      const LayerNode& shortcut = g.node(add.inputs[1]);
      const bool type_a = std::holds_alternative<IdentitySpec>(shortcut.op) ||
                          std::holds_alternative<AvgPoolSpec>(shortcut.op) ||
                          std::holds_alternative<ZeroPadChannelsSpec>(shortcut.op);
      CHECK(type_a);
    }
  }
}

TEST_CASE("alpha-0 shortcuts degenerate to identity and pooling") {
  const LayerGraph g = build_graph(small_config(8, 0, BlockVariant::PreAct));
  REQUIRE(g.final_block_count() == 3);
  const LayerNode& s1 = g.node(g.node(g.final_block_spans[0].exit).inputs[1]);
  const LayerNode& s2 = g.node(g.node(g.final_block_spans[1].exit).inputs[1]);
  const LayerNode& s3 = g.node(g.node(g.final_block_spans[2].exit).inputs[1]);
  CHECK(std::holds_alternative<IdentitySpec>(s1.op));
  CHECK(std::holds_alternative<AvgPoolSpec>(s2.op));
  CHECK(std::holds_alternative<AvgPoolSpec>(s3.op));
}

TEST_CASE("block subgraph emits the documented layer orders") {
  const std::vector<LayerNode> pre = block_subgraph(BlockVariant::PreAct, 16, 16, 1, 7, 10);
  REQUIRE(pre.size() == 6);
  const std::vector<LayerOp> pre_expect = {
      BatchNormSpec{16}, ReluSpec{},        ConvSpec{16, 3, 1, 1},
      BatchNormSpec{16}, ReluSpec{},        ConvSpec{16, 3, 1, 1}};
  for (std::size_t i = 0; i < pre.size(); ++i) {
    CHECK(pre[i].op == pre_expect[i]);
    CHECK(pre[i].id == 10 + static_cast<int>(i));
    CHECK(pre[i].inputs == std::vector<int>{i == 0 ? 7 : 10 + static_cast<int>(i) - 1});
  }

  const std::vector<LayerNode> pyr = block_subgraph(BlockVariant::PyramidBN, 16, 21, 2, 0, 1);
  REQUIRE(pyr.size() == 6);
  const std::vector<LayerOp> pyr_expect = {
      BatchNormSpec{16}, ConvSpec{21, 3, 2, 1}, BatchNormSpec{21},
      ReluSpec{},        ConvSpec{21, 3, 1, 1}, BatchNormSpec{21}};
  for (std::size_t i = 0; i < pyr.size(); ++i) CHECK(pyr[i].op == pyr_expect[i]);

  CHECK_THROWS_AS(block_subgraph(BlockVariant::PreAct, 0, 16, 1, 0, 1), ConfigError);
  CHECK_THROWS_AS(block_subgraph(BlockVariant::PreAct, 16, 16, 3, 0, 1), ConfigError);
}

TEST_CASE("first block of a depth-8 alpha-0 pre-act graph is the hand fragment") {
  const LayerGraph g = build_graph(small_config(8, 0, BlockVariant::PreAct));
  const BlockSpan span = g.final_block_spans[0];
  // Hand-built: BN-ReLU-Conv-BN-ReLU-Conv reading the stem output, then an
  // identity shortcut from the same source and the residual Add.
  const int src = g.node(span.entry).inputs.at(0);
  const std::vector<LayerNode> fragment =
      block_subgraph(BlockVariant::PreAct, 16, 16, 1, src, span.entry);
  for (std::size_t i = 0; i < fragment.size(); ++i)
    CHECK(g.node(span.entry + static_cast<int>(i)) == fragment[i]);

  const LayerNode& add = g.node(span.exit);
  const LayerNode& shortcut = g.node(add.inputs.at(1));
  CHECK(shortcut.op == LayerOp{IdentitySpec{}});
  CHECK(shortcut.inputs == std::vector<int>{src});
  CHECK(add.inputs.at(0) == fragment.back().id);
}

TEST_CASE("middle projections read the group input, root reads the stem") {
  const LayerGraph g = build_graph(small_config(8, 3, BlockVariant::PyramidBN));
  std::vector<const LayerNode*> projections;
  for (const LayerNode& node : g.nodes)
    if (std::holds_alternative<ChannelProjectSpec>(node.op)) projections.push_back(&node);
  REQUIRE(projections.size() == 4);

  const auto& p1 = std::get<ChannelProjectSpec>(projections[0]->op);
  const auto& p2 = std::get<ChannelProjectSpec>(projections[1]->op);
  const auto& p3 = std::get<ChannelProjectSpec>(projections[2]->op);
  const auto& root = std::get<ChannelProjectSpec>(projections[3]->op);
  CHECK(p1.stride == 1);
  CHECK(p2.stride == 2);
  CHECK(p3.stride == 2);
  CHECK(root.stride == 4);
  CHECK(p1.out_channels == 17);
  CHECK(p2.out_channels == 18);
  CHECK(p3.out_channels == 19);
  CHECK(root.out_channels == 19);

  CHECK(g.block_index.at(projections[0]->id).level == Level::Middle);
  CHECK(g.block_index.at(projections[3]->id).level == Level::Root);
  // Root projection taps the stem BN output (node after the stem conv).
  CHECK(projections[3]->inputs == std::vector<int>{1});
}

TEST_CASE("graph construction is deterministic") {
  const ArchConfig cfg = small_config(32, 27, BlockVariant::PyramidBN);
  CHECK(graph_equal(build_graph(cfg), build_graph(cfg)));
}

TEST_CASE("validator passes every built graph") {
  for (int depth : {8, 14, 110}) {
    for (BlockVariant variant : {BlockVariant::PreAct, BlockVariant::PyramidBN}) {
      const LayerGraph g = build_graph(small_config(depth, 48, variant));
      CHECK(validate_graph(g).empty());
    }
  }
}

TEST_CASE("validator reports a missing final Add") {
  LayerGraph g = build_graph(small_config(110, 48, BlockVariant::PyramidBN));
  // Demote one residual Add to a pass-through, keeping the wiring legal.
  LayerNode& add = g.nodes[g.final_block_spans[10].exit];
  add.op = IdentitySpec{};
  add.inputs.resize(1);
  const auto findings = validate_graph(g);
  CHECK(contains(findings, "final-level Add count 53 != 54"));
}

TEST_CASE("validator names the node with mismatched Add operands") {
  LayerGraph g = build_graph(small_config(8, 3, BlockVariant::PreAct));
  const BlockSpan span = g.final_block_spans[0];
  // Widen the last trunk conv so the Add sees 20 vs 17 channels.
  std::get<ConvSpec>(g.nodes[span.exit - 2].op).out_channels = 20;
  const auto findings = validate_graph(g);
  REQUIRE(!findings.empty());
  CHECK(contains(findings, "node " + std::to_string(span.exit)));
}

TEST_CASE("validator rejects forward references and extra sinks") {
  LayerGraph g = build_graph(small_config(8, 3, BlockVariant::PyramidBN));
  LayerGraph forward_ref = g;
  forward_ref.nodes[5].inputs = {static_cast<int>(g.nodes.size()) - 1};
  CHECK(contains(validate_graph(forward_ref), "does not precede"));

  LayerGraph two_sinks = g;
  two_sinks.nodes.push_back(LayerNode{static_cast<int>(g.nodes.size()), IdentitySpec{}, {1}});
  CHECK(contains(validate_graph(two_sinks), "single sink"));

  LayerGraph two_sources = g;
  two_sources.nodes[1].inputs.clear();  // stem BN no longer reads the conv
  CHECK(contains(validate_graph(two_sources), "single source"));
}

TEST_CASE("json export is stable and round-trips exactly") {
  for (BlockVariant variant : {BlockVariant::PreAct, BlockVariant::PyramidBN}) {
    const LayerGraph g = build_graph(small_config(14, 30, variant));
    const std::string text = export_json(g);
    const LayerGraph back = import_json(text);
    CHECK(graph_equal(g, back));
    CHECK(back.config.depth == g.config.depth);
    CHECK(back.config.alpha == g.config.alpha);
    CHECK(back.config.block_variant == g.config.block_variant);
    CHECK(export_json(back) == text);
  }
}

TEST_CASE("json file round-trip") {
  const LayerGraph g = build_graph(small_config(8, 5, BlockVariant::PyramidBN));
  const std::string path = testutil::temp_path("graph.json");
  save_graph_json(g, path);
  const LayerGraph back = load_graph_json(path);
  CHECK(graph_equal(g, back));
  std::filesystem::remove(path);
}

TEST_CASE("json import rejects malformed documents") {
  CHECK_THROWS_AS(import_json("{"), IoError);
  CHECK_THROWS_AS(import_json("{}"), IoError);
  CHECK_THROWS_AS(import_json(R"({"format": "other", "version": 1})"), IoError);
  CHECK_THROWS_AS(import_json(R"({"format": "pyror_graph", "version": 9})"), IoError);
  CHECK_THROWS_AS(load_graph_json("/nonexistent/graph.json"), IoError);
}

}  // TEST_SUITE
