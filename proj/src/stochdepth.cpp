#include "pyror/stochdepth.hpp"

#include "pyror/errors.hpp"
#include "pyror/rng.hpp"

namespace pyror {

SurvivalSchedule linear_decay(int block_count, double p_terminal) {
  if (block_count < 1) throw ConfigError("block_count must be positive");
  if (!(p_terminal > 0.0 && p_terminal <= 1.0))
    throw ConfigError("p_terminal must lie in (0, 1]");

  SurvivalSchedule schedule;
  schedule.p_terminal = p_terminal;
  schedule.probs.reserve(block_count);
  for (int l = 1; l <= block_count; ++l) {
    schedule.probs.push_back(1.0 - (static_cast<double>(l) / block_count) * (1.0 - p_terminal));
  }
  return schedule;
}

BlockMask sample_mask(const SurvivalSchedule& schedule, std::mt19937_64& rng) {
  BlockMask mask(schedule.probs.size());
  for (std::size_t l = 0; l < schedule.probs.size(); ++l) {
    mask[l] = next_uniform(rng) < schedule.probs[l] ? 1 : 0;
  }
  return mask;
}

double expected_active(const SurvivalSchedule& schedule) {
  if (schedule.probs.empty()) throw ConfigError("schedule is empty");
  double sum = 0.0;
  for (double p : schedule.probs) sum += p;
  return sum / static_cast<double>(schedule.probs.size());
}

}  // namespace pyror
