#include "pyror/archspec.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pyror/errors.hpp"

namespace pyror {

std::string to_string(BlockVariant variant) {
  switch (variant) {
    case BlockVariant::PreAct:
      return "pre-act";
    case BlockVariant::PyramidBN:
      return "pyramid-bn";
  }
  throw std::logic_error("unreachable block variant");
}

BlockVariant block_variant_from_string(const std::string& name) {
  if (name == "pre-act") return BlockVariant::PreAct;
  if (name == "pyramid-bn") return BlockVariant::PyramidBN;
  throw ConfigError("unknown block variant '" + name + "' (expected pre-act or pyramid-bn)");
}

BlockCounts derive_block_counts(int depth) {
  if (depth < 8 || (depth - 2) % 6 != 0) {
    const int lower = depth <= 8 ? 8 : depth - ((depth - 2) % 6 + 6) % 6;
    const int upper = lower < 8 ? 8 : lower + 6;
    std::ostringstream msg;
    msg << "depth must be 6n+2 with n >= 1; got " << depth << " (nearest valid depths: ";
    if (lower >= 8 && lower != depth) {
      msg << lower << " and " << upper;
    } else {
      msg << upper;
    }
    msg << ")";
    throw ConfigError(msg.str());
  }
  const int per_group = (depth - 2) / 6;
  return BlockCounts{per_group, 3 * per_group};
}

void validate(const ArchConfig& config) {
  derive_block_counts(config.depth);
  if (config.alpha < 0) throw ConfigError("alpha must be non-negative");
  if (config.groups != 3) throw ConfigError("groups must be 3");
  if (config.shortcut_levels != 3) throw ConfigError("shortcut_levels must be 3");
  if (!(config.p_terminal > 0.0 && config.p_terminal <= 1.0))
    throw ConfigError("p_terminal must lie in (0, 1]");
  if (config.num_classes < 1) throw ConfigError("num_classes must be positive");
  for (int d : config.input_shape)
    if (d < 1) throw ConfigError("input_shape dimensions must be positive");
}

ChannelSchedule pyramidal_widths(int alpha, int total_blocks, int stem_width) {
  if (alpha < 0) throw ConfigError("alpha must be non-negative");
  if (total_blocks < 1) throw ConfigError("total_blocks must be positive");
  if (stem_width < 1) throw ConfigError("stem_width must be positive");

  ChannelSchedule schedule;
  schedule.stem_width = stem_width;
  schedule.total_blocks = total_blocks;
  schedule.widths.reserve(total_blocks);
  // floor(stem + k * alpha / N) via integer arithmetic; flooring the exact
  // accumulated value rather than the previous floored width keeps the
  // endpoint at stem + alpha even when alpha < N.
  for (int k = 1; k <= total_blocks; ++k) {
    const long long grown = static_cast<long long>(k) * alpha / total_blocks;
    schedule.widths.push_back(stem_width + static_cast<int>(grown));
  }
  return schedule;
}

ChannelSchedule classic_widths(int groups, int blocks_per_group, int stem_width) {
  if (groups < 1) throw ConfigError("groups must be positive");
  if (blocks_per_group < 1) throw ConfigError("blocks_per_group must be positive");
  if (stem_width < 1) throw ConfigError("stem_width must be positive");

  ChannelSchedule schedule;
  schedule.stem_width = stem_width;
  schedule.total_blocks = groups * blocks_per_group;
  schedule.widths.reserve(schedule.total_blocks);
  int width = stem_width;
  for (int g = 0; g < groups; ++g) {
    for (int k = 0; k < blocks_per_group; ++k) schedule.widths.push_back(width);
    width *= 2;
  }
  return schedule;
}

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const int parsed = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs an integer, got '" + value + "'");
  }
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double parsed = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs a number, got '" + value + "'");
  }
}

}  // namespace

ArchConfig parse_config_text(const std::string& text, const ArchConfig& base) {
  ArchConfig config = base;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + " is not key = value: '" +
                        stripped + "'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key == "depth") {
      config.depth = parse_int(key, value);
    } else if (key == "alpha") {
      config.alpha = parse_int(key, value);
    } else if (key == "block_variant") {
      config.block_variant = block_variant_from_string(value);
    } else if (key == "p_terminal") {
      config.p_terminal = parse_real(key, value);
    } else if (key == "num_classes") {
      config.num_classes = parse_int(key, value);
    } else {
      throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(line_no));
    }
  }
  return config;
}

ArchConfig load_config_file(const std::string& path, const ArchConfig& base) {
  std::ifstream file(path);
  if (!file) throw ConfigError("cannot open config file: " + path);
  std::ostringstream contents;
  contents << file.rdbuf();
  return parse_config_text(contents.str(), base);
}

}  // namespace pyror
