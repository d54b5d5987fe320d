#include <doctest.h>

#include <cstdint>
#include <variant>
#include <vector>

#include "pyror/analyzer.hpp"
#include "pyror/errors.hpp"
#include "pyror/graph.hpp"
#include "pyror/stochdepth.hpp"

#include "test_util.hpp"

using namespace pyror;

namespace {

ArchConfig small_config(int depth, int alpha,
                        BlockVariant variant = BlockVariant::PyramidBN) {
  ArchConfig cfg;
  cfg.depth = depth;
  cfg.alpha = alpha;
  cfg.block_variant = variant;
  return cfg;
}

}  // namespace

TEST_SUITE("analyzer") {

TEST_CASE("shapes walk 32 -> 16 -> 8 with linearly growing channels") {
  const LayerGraph g = build_graph(small_config(110, 48));
  const ShapeMap shapes = infer_shapes(g);

  CHECK(shapes.at(0) == Shape{16, 32, 32});  // stem conv

  const std::vector<Shape> group_ends = {
      Shape{32, 32, 32},  // block 18: width 16 + floor(18*48/54)
      Shape{48, 16, 16},  // block 36
      Shape{64, 8, 8},    // block 54
  };
  CHECK(shapes.at(g.final_block_spans[17].exit) == group_ends[0]);
  CHECK(shapes.at(g.final_block_spans[35].exit) == group_ends[1]);
  CHECK(shapes.at(g.final_block_spans[53].exit) == group_ends[2]);

  const LayerNode& linear = g.node(g.output_id);
  const int pool = linear.inputs.at(0);
  CHECK(shapes.at(g.node(pool).inputs.at(0)) == Shape{64, 8, 8});  // pre-pool
  CHECK(shapes.at(pool) == Shape{64, 1, 1});
  CHECK(shapes.at(g.output_id) == Shape{10, 1, 1});
}

TEST_CASE("odd input sizes break the type A shortcut at group two") {
  const LayerGraph g = build_graph(small_config(8, 0, BlockVariant::PreAct));
  CHECK_NOTHROW(infer_shapes(g, Shape{3, 32, 32}));
  try {
    infer_shapes(g, Shape{3, 31, 31});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    // Trunk conv rounds 31 up through padding (16), avg-pool rounds it
    // down (15); the block-2 residual Add is where they meet.
    CHECK(e.node_id() == g.final_block_spans[1].exit);
    CHECK(std::string(e.what()).find(std::to_string(e.node_id())) != std::string::npos);
  }
}

TEST_CASE("a single 16->16 pre-act block owns 4672 parameters") {
  std::vector<LayerNode> nodes;
  nodes.push_back(LayerNode{0, IdentitySpec{}, {}});
  for (LayerNode& n : block_subgraph(BlockVariant::PreAct, 16, 16, 1, 0, 1))
    nodes.push_back(std::move(n));
  nodes.push_back(LayerNode{7, IdentitySpec{}, {0}});
  nodes.push_back(LayerNode{8, AddSpec{}, {6, 7}});
  const LayerGraph g = testutil::make_hand_graph(std::move(nodes), {16, 8, 8});

  // 2 * (16*16*9) conv weights + 2 * (2*16) batch-norm scale/shift.
  CHECK(count_params(g).total() == 4672);
}

TEST_CASE("depth-8 alpha-3 parameter count, level by level") {
  const LayerGraph g = build_graph(small_config(8, 3));
  const ParamsByLevel p = count_params(g);
  // Hand tally: stem 432+32 plus tail BN 38, blocks 5149/5776/6439,
  // projections 272+306+342 middle and 304 root, linear 200.
  CHECK(p.trunk == 17866);
  CHECK(p.final_shortcut == 0);
  CHECK(p.middle_shortcut == 920);
  CHECK(p.root_shortcut == 304);
  CHECK(p.classifier == 200);
  CHECK(p.total() == 19290);
}

TEST_CASE("type A shortcuts never carry parameters") {
  for (int alpha : {0, 48, 270}) {
    const LayerGraph g = build_graph(small_config(26, alpha));
    CHECK(count_params(g).final_shortcut == 0);
  }
}

TEST_CASE("table-scale parameter budgets") {
  CHECK(count_params(build_graph(small_config(110, 48))).total() == 1745874);
  const std::int64_t p48 = 1745874;
  CHECK(p48 > 1600000);
  CHECK(p48 < 1800000);
  const std::int64_t p270 = count_params(build_graph(small_config(146, 270))).total();
  CHECK(p270 > 36500000);
  CHECK(p270 < 39500000);
}

TEST_CASE("parameters grow with alpha and depth") {
  const auto total = [](int depth, int alpha) {
    return count_params(build_graph(small_config(depth, alpha))).total();
  };
  CHECK(total(110, 48) < total(110, 84));
  CHECK(total(110, 84) < total(110, 270));
  CHECK(total(110, 270) < total(146, 270));
}

TEST_CASE("stem conv costs 442368 MACs on a 32x32 input") {
  const LayerGraph g =
      testutil::make_hand_graph({LayerNode{0, ConvSpec{16, 3, 1, 1}, {}}}, {3, 32, 32});
  CHECK(count_flops(g) == 442368);  // 16 * 3 * 9 * 32 * 32
  // Stride-1, pad-1 convs scale exactly with the pixel count.
  CHECK(count_flops(g, Shape{3, 64, 64}) == 4 * 442368ull);
}

TEST_CASE("depth-8 alpha-3 forward MACs, node by node") {
  const LayerGraph g = build_graph(small_config(8, 3));
  // Hand tally over the 7 convs, 4 projections and the classifier.
  CHECK(count_flops(g) == 7867390);
}

TEST_CASE("elementwise and pooling nodes cost nothing") {
  const LayerGraph g = testutil::make_hand_graph(
      {LayerNode{0, IdentitySpec{}, {}}, LayerNode{1, ReluSpec{}, {0}},
       LayerNode{2, AvgPoolSpec{2}, {1}}, LayerNode{3, GlobalAvgPoolSpec{}, {2}}},
      {8, 8, 8});
  CHECK(count_flops(g) == 0);
  CHECK(count_params(g).total() == 0);
}

TEST_CASE("expected compute on a uniform two-block graph") {
  // Source conv plus two identical single-conv blocks; every conv is
  // 4->4 3x3 on 8x8, i.e. 9216 MACs.
  std::vector<LayerNode> nodes = {
      LayerNode{0, ConvSpec{4, 3, 1, 1}, {}},
      LayerNode{1, ConvSpec{4, 3, 1, 1}, {0}},
      LayerNode{2, IdentitySpec{}, {0}},
      LayerNode{3, AddSpec{}, {1, 2}},
      LayerNode{4, ConvSpec{4, 3, 1, 1}, {3}},
      LayerNode{5, IdentitySpec{}, {3}},
      LayerNode{6, AddSpec{}, {4, 5}},
  };
  LayerGraph g = testutil::make_hand_graph(std::move(nodes), {4, 8, 8});
  g.final_block_spans = {BlockSpan{1, 3}, BlockSpan{4, 6}};

  SurvivalSchedule s;
  s.probs = {1.0, 1.0};
  CHECK(expected_compute(g, s) == 1.0);
  s.probs = {0.5, 0.25};
  CHECK(expected_compute(g, s) == doctest::Approx((1.0 + 0.5 + 0.25) / 3.0).epsilon(1e-15));

  s.probs = {0.5};
  CHECK_THROWS_AS(expected_compute(g, s), ConfigError);
}

TEST_CASE("with no fixed cost the compute fraction is the schedule mean") {
  // Both "blocks" read the network input directly; nothing outside the
  // spans costs any MACs.
  std::vector<LayerNode> nodes = {
      LayerNode{0, ConvSpec{4, 3, 1, 1}, {}},
      LayerNode{1, IdentitySpec{}, {}},
      LayerNode{2, AddSpec{}, {0, 1}},
      LayerNode{3, ConvSpec{4, 3, 1, 1}, {2}},
      LayerNode{4, IdentitySpec{}, {2}},
      LayerNode{5, AddSpec{}, {3, 4}},
  };
  LayerGraph g = testutil::make_hand_graph(std::move(nodes), {4, 8, 8});
  g.final_block_spans = {BlockSpan{0, 2}, BlockSpan{3, 5}};

  const SurvivalSchedule s = linear_decay(2, 0.5);  // probs 0.75, 0.5
  CHECK(expected_compute(g, s) == doctest::Approx(expected_active(s)).epsilon(1e-15));
  CHECK(expected_compute(g, s) == doctest::Approx(0.625).epsilon(1e-15));
}

TEST_CASE("expected compute on the real graph, against hand-tallied costs") {
  const LayerGraph g = build_graph(small_config(8, 3));
  SurvivalSchedule s;
  s.probs = {0.0, 0.0, 0.0};
  // Block costs 5170176 / 1451520 / 404928 MACs; 840766 MACs are fixed.
  CHECK(expected_compute(g, s) == doctest::Approx(840766.0 / 7867390.0).epsilon(1e-12));
  s.probs = {1.0, 0.0, 0.0};
  CHECK(expected_compute(g, s) ==
        doctest::Approx((840766.0 + 5170176.0) / 7867390.0).epsilon(1e-12));
}

TEST_CASE("default-schedule compute fraction sits a little above 3/4") {
  const LayerGraph g = build_graph(small_config(110, 48));
  const SurvivalSchedule s = linear_decay(54, 0.5);
  const double fraction = expected_compute(g, s);
  CHECK(fraction > 0.74);
  CHECK(fraction < 0.90);
}

TEST_CASE("analyze bundles params and flops consistently") {
  const LayerGraph g = build_graph(small_config(8, 3));
  const AnalysisReport plain = analyze(g);
  CHECK(plain.total_params == 19290);
  CHECK(plain.flops_forward == 7867390);
  CHECK(plain.expected_flops_sd == doctest::Approx(7867390.0));
  CHECK(plain.params_by_level.total() == plain.total_params);

  const SurvivalSchedule s = linear_decay(3, 0.5);
  const AnalysisReport sd = analyze(g, &s);
  CHECK(sd.expected_flops_sd ==
        doctest::Approx(expected_compute(g, s) * 7867390.0).epsilon(1e-12));
  CHECK(sd.expected_flops_sd < sd.flops_forward);
}

TEST_CASE("shape inference agrees between config and explicit input") {
  const LayerGraph g = build_graph(small_config(8, 3));
  const ShapeMap a = infer_shapes(g);
  const ShapeMap b = infer_shapes(g, Shape{3, 32, 32});
  REQUIRE(a.size() == b.size());
  for (const auto& [id, shape] : a) CHECK(b.at(id) == shape);
}

}  // TEST_SUITE
