#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace pyror {

/// Per-block survival probabilities p_1..p_L, non-increasing, each in (0,1].
struct SurvivalSchedule {
  std::vector<double> probs;
  double p_terminal = 1.0;

  int size() const { return static_cast<int>(probs.size()); }
};

/// p_l = 1 - (l/L) * (1 - p_terminal) for l = 1..L.
SurvivalSchedule linear_decay(int block_count, double p_terminal);

/// 1 = block kept, 0 = block dropped.
using BlockMask = std::vector<std::uint8_t>;

/// Independent Bernoulli(p_l) draw per block. Fully determined by the rng
/// state; the uniform variate is derived from raw 64-bit output so the
/// mapping does not depend on library distribution internals.
BlockMask sample_mask(const SurvivalSchedule& schedule, std::mt19937_64& rng);

/// Mean survival probability: the expected fraction of active blocks.
double expected_active(const SurvivalSchedule& schedule);

}  // namespace pyror
