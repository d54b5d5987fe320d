#include <doctest.h>

#include <string>

#include "pyror/archspec.hpp"
#include "pyror/errors.hpp"

using namespace pyror;

TEST_SUITE("archspec") {

TEST_CASE("block counts follow depth = 6n + 2") {
  CHECK(derive_block_counts(8).per_group == 1);
  CHECK(derive_block_counts(8).total == 3);
  CHECK(derive_block_counts(110).per_group == 18);
  CHECK(derive_block_counts(110).total == 54);
  CHECK(derive_block_counts(146).per_group == 24);
  CHECK(derive_block_counts(146).total == 72);

  for (int n = 1; n <= 40; ++n) {
    const BlockCounts counts = derive_block_counts(6 * n + 2);
    CHECK(counts.per_group == n);
    CHECK(counts.total == 3 * n);
  }
}

TEST_CASE("invalid depths name the nearest valid ones") {
  CHECK_THROWS_AS(derive_block_counts(9), ConfigError);
  try {
    derive_block_counts(9);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("depth must be 6n+2") != std::string::npos);
    CHECK(msg.find("8") != std::string::npos);
    CHECK(msg.find("14") != std::string::npos);
  }
  CHECK_THROWS_AS(derive_block_counts(0), ConfigError);
  CHECK_THROWS_AS(derive_block_counts(-4), ConfigError);
  CHECK_THROWS_AS(derive_block_counts(2), ConfigError);  // n must be >= 1
  CHECK_THROWS_AS(derive_block_counts(111), ConfigError);
}

TEST_CASE("pyramidal widths: alpha=270, N=54") {
  const ChannelSchedule s = pyramidal_widths(270, 54);
  REQUIRE(static_cast<int>(s.widths.size()) == 54);
  CHECK(s.widths.front() == 21);   // 16 + floor(270/54) = 16 + 5
  CHECK(s.widths[1] == 26);
  CHECK(s.widths.back() == 286);   // 16 + 270
  for (std::size_t k = 1; k < s.widths.size(); ++k)
    CHECK(s.widths[k] - s.widths[k - 1] == 5);  // 270/54 is integral
}

TEST_CASE("pyramidal widths: fractional growth floors exactly") {
  const ChannelSchedule s = pyramidal_widths(48, 54);
  CHECK(s.widths.front() == 16);  // floor(16 + 48/54)
  CHECK(s.widths.back() == 64);   // endpoint hits stem + alpha exactly
  // floor of the exact accumulated value, never of a rounded predecessor
  for (int k = 1; k <= 54; ++k)
    CHECK(s.widths[k - 1] == 16 + (k * 48) / 54);
}

TEST_CASE("pyramidal widths: alpha=0 keeps the stem width") {
  const ChannelSchedule s = pyramidal_widths(0, 9);
  for (int w : s.widths) CHECK(w == 16);
}

TEST_CASE("pyramidal widths: endpoint and monotone step over a grid") {
  for (int alpha : {0, 1, 7, 48, 84, 150, 270, 511, 512}) {
    for (int total : {3, 5, 54, 72, 111, 216}) {
      const ChannelSchedule s = pyramidal_widths(alpha, total);
      REQUIRE(static_cast<int>(s.widths.size()) == total);
      CHECK(s.widths.back() == 16 + alpha);
      const int base_step = alpha / total;
      for (int k = 1; k < total; ++k) {
        const int diff = s.widths[k] - s.widths[k - 1];
        CHECK(diff >= base_step);
        CHECK(diff <= base_step + 1);
      }
    }
  }
}

TEST_CASE("pyramidal widths: custom stem and bad inputs") {
  const ChannelSchedule s = pyramidal_widths(10, 5, 8);
  CHECK(s.stem_width == 8);
  CHECK(s.widths.back() == 18);
  CHECK_THROWS_AS(pyramidal_widths(-1, 5), ConfigError);
  CHECK_THROWS_AS(pyramidal_widths(10, 0), ConfigError);
  CHECK_THROWS_AS(pyramidal_widths(10, 5, 0), ConfigError);
}

TEST_CASE("classic widths double at group boundaries") {
  const ChannelSchedule s = classic_widths(3, 18, 16);
  REQUIRE(static_cast<int>(s.widths.size()) == 54);
  for (int k = 0; k < 18; ++k) CHECK(s.widths[k] == 16);
  for (int k = 18; k < 36; ++k) CHECK(s.widths[k] == 32);
  for (int k = 36; k < 54; ++k) CHECK(s.widths[k] == 64);

  const ChannelSchedule two = classic_widths(1, 2, 16);
  CHECK(two.widths == std::vector<int>{16, 16});
  const ChannelSchedule eight = classic_widths(3, 1, 8);
  CHECK(eight.widths == std::vector<int>{8, 16, 32});
}

TEST_CASE("classic and pyramidal schedules meet at the endpoint") {
  // alpha chosen so both end at 64; classic is never more than twice the
  // pyramidal width anywhere, and strictly wider inside the last group.
  for (int n = 1; n <= 66; ++n) {
    const int total = 3 * n;
    const ChannelSchedule classic = classic_widths(3, n, 16);
    const ChannelSchedule pyramid = pyramidal_widths(48, total, 16);
    CHECK(classic.widths.back() == pyramid.widths.back());
    for (int k = 0; k < total; ++k) CHECK(classic.widths[k] <= 2 * pyramid.widths[k]);
    for (int k = 2 * n; k < total - 1; ++k) CHECK(classic.widths[k] > pyramid.widths[k]);
  }
}

TEST_CASE("config validation accepts the defaults") {
  ArchConfig cfg;
  CHECK_NOTHROW(validate(cfg));
}

TEST_CASE("config validation rejects out-of-range fields") {
  ArchConfig cfg;
  cfg.depth = 10;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = ArchConfig{};
  cfg.alpha = -1;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = ArchConfig{};
  cfg.groups = 4;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = ArchConfig{};
  cfg.shortcut_levels = 2;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = ArchConfig{};
  cfg.p_terminal = 0.0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg.p_terminal = 1.5;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = ArchConfig{};
  cfg.p_terminal = 1.0;  // SD disabled is a valid setting
  CHECK_NOTHROW(validate(cfg));
  cfg = ArchConfig{};
  cfg.num_classes = 0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = ArchConfig{};
  cfg.input_shape = {3, 0, 32};
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("block variant names round-trip") {
  CHECK(to_string(BlockVariant::PreAct) == "pre-act");
  CHECK(to_string(BlockVariant::PyramidBN) == "pyramid-bn");
  CHECK(block_variant_from_string("pre-act") == BlockVariant::PreAct);
  CHECK(block_variant_from_string("pyramid-bn") == BlockVariant::PyramidBN);
  CHECK_THROWS_AS(block_variant_from_string("resnext"), ConfigError);
}

TEST_CASE("config text parses keys, comments and blank lines") {
  const std::string text =
      "# a comment\n"
      "depth = 56\n"
      "\n"
      "alpha=84\n"
      "block_variant = pre-act\n"
      "p_terminal = 0.8\n"
      "num_classes = 100\n";
  const ArchConfig cfg = parse_config_text(text);
  CHECK(cfg.depth == 56);
  CHECK(cfg.alpha == 84);
  CHECK(cfg.block_variant == BlockVariant::PreAct);
  CHECK(cfg.p_terminal == doctest::Approx(0.8));
  CHECK(cfg.num_classes == 100);
}

TEST_CASE("config text overlays the base config") {
  ArchConfig base;
  base.alpha = 84;
  base.num_classes = 100;
  const ArchConfig cfg = parse_config_text("depth = 56\n", base);
  CHECK(cfg.depth == 56);
  CHECK(cfg.alpha == 84);
  CHECK(cfg.num_classes == 100);
}

TEST_CASE("config text rejects unknown keys with the line number") {
  try {
    parse_config_text("depth = 56\nwidth = 9\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("width") != std::string::npos);
    CHECK(msg.find("line 2") != std::string::npos);
  }
}

TEST_CASE("config text rejects malformed lines and values") {
  CHECK_THROWS_AS(parse_config_text("depth 56\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("depth = fifty\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("depth = 56x\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("p_terminal = high\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("block_variant = dense\n"), ConfigError);
}

TEST_CASE("missing config file raises ConfigError") {
  CHECK_THROWS_AS(load_config_file("/nonexistent/pyror.cfg"), ConfigError);
}

}  // TEST_SUITE
