#pragma once

#include <array>
#include <string>
#include <vector>

namespace pyror {

/// Residual block trunk layout.
/// PreAct:    BN-ReLU-Conv-BN-ReLU-Conv
/// PyramidBN: BN-Conv-BN-ReLU-Conv-BN
enum class BlockVariant { PreAct, PyramidBN };

std::string to_string(BlockVariant variant);
BlockVariant block_variant_from_string(const std::string& name);

/// User-facing architecture description. depth counts weighted layers
/// (trunk convs + classifier); alpha is the total channel growth across
/// all residual blocks, so the final feature width is stem + alpha.
struct ArchConfig {
  int depth = 110;
  int alpha = 48;
  int groups = 3;
  BlockVariant block_variant = BlockVariant::PyramidBN;
  int shortcut_levels = 3;
  double p_terminal = 0.5;
  int num_classes = 10;
  std::array<int, 3> input_shape = {3, 32, 32};  // channels, height, width
};

/// Throws ConfigError on any invariant violation (depth form, alpha sign,
/// p_terminal range, fixed group/level counts).
void validate(const ArchConfig& config);

struct BlockCounts {
  int per_group = 0;  // n
  int total = 0;      // 3n
};

/// depth = 6n + 2: one stem conv, 2 convs per block, one classifier.
/// Rejects other depths, naming the nearest valid ones.
BlockCounts derive_block_counts(int depth);

/// Per-block output widths, block 1 .. block N in network order.
struct ChannelSchedule {
  int stem_width = 16;
  std::vector<int> widths;
  int total_blocks = 0;
};

/// Linearly widening schedule: width of block k is
/// floor(stem + k * alpha / total_blocks), evaluated in exact integer
/// arithmetic. The final width is exactly stem + alpha.
ChannelSchedule pyramidal_widths(int alpha, int total_blocks, int stem_width = 16);

/// Doubling-at-group-boundary baseline: group g has constant width
/// stem * 2^(g-1) for all of its blocks.
ChannelSchedule classic_widths(int groups, int blocks_per_group, int stem_width = 16);

/// Flat key=value config text. Accepted keys: depth, alpha, block_variant,
/// p_terminal, num_classes. Unknown keys are rejected. Blank lines and
/// lines starting with '#' are ignored. Values overlay `base`.
ArchConfig parse_config_text(const std::string& text, const ArchConfig& base = {});
ArchConfig load_config_file(const std::string& path, const ArchConfig& base = {});

}  // namespace pyror
