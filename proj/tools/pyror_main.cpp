#include <array>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pyror/analyzer.hpp"
#include "pyror/archspec.hpp"
#include "pyror/errors.hpp"
#include "pyror/graph.hpp"
#include "pyror/nnkernel.hpp"
#include "pyror/rng.hpp"
#include "pyror/stochdepth.hpp"
#include "pyror/trainer.hpp"

using namespace pyror;
using nlohmann::ordered_json;

namespace {

struct ArchFlags {
  std::string config_path;
  int depth = 0;
  int alpha = 0;
  std::string variant;
  double p_terminal = 0.0;
  int num_classes = 0;
  CLI::Option* depth_opt = nullptr;
  CLI::Option* alpha_opt = nullptr;
  CLI::Option* variant_opt = nullptr;
  CLI::Option* p_terminal_opt = nullptr;
  CLI::Option* num_classes_opt = nullptr;
};

void add_arch_flags(CLI::App* cmd, ArchFlags& f) {
  cmd->add_option("--config", f.config_path, "architecture config file (key = value lines)");
  f.depth_opt = cmd->add_option("--depth", f.depth, "weighted-layer count, 6n+2 (default 110)");
  f.alpha_opt = cmd->add_option("--alpha", f.alpha, "total channel widening (default 48)");
  f.variant_opt =
      cmd->add_option("--variant,--block-variant", f.variant, "pre-act | pyramid-bn");
  f.p_terminal_opt = cmd->add_option("--p-terminal", f.p_terminal,
                                     "survival probability of the last block (default 0.5)");
  f.num_classes_opt =
      cmd->add_option("--num-classes", f.num_classes, "classifier outputs (default 10)");
}

ArchConfig resolve_arch(const ArchFlags& f) {
  ArchConfig cfg;
  if (!f.config_path.empty()) cfg = load_config_file(f.config_path, cfg);
  if (f.depth_opt->count() > 0) cfg.depth = f.depth;
  if (f.alpha_opt->count() > 0) cfg.alpha = f.alpha;
  if (f.variant_opt->count() > 0) cfg.block_variant = block_variant_from_string(f.variant);
  if (f.p_terminal_opt->count() > 0) cfg.p_terminal = f.p_terminal;
  if (f.num_classes_opt->count() > 0) cfg.num_classes = f.num_classes;
  validate(cfg);
  return cfg;
}

LayerGraph build_checked(const ArchConfig& cfg) {
  LayerGraph graph = build_graph(cfg);
  const std::vector<std::string> findings = validate_graph(graph);
  if (!findings.empty()) {
    for (const std::string& finding : findings) std::cerr << "graph invalid: " << finding << '\n';
    throw ConfigError("built graph failed validation (" + std::to_string(findings.size()) +
                      " findings)");
  }
  return graph;
}

ordered_json config_json(const ArchConfig& cfg) {
  return {{"depth", cfg.depth},
          {"alpha", cfg.alpha},
          {"block_variant", to_string(cfg.block_variant)},
          {"p_terminal", cfg.p_terminal},
          {"num_classes", cfg.num_classes},
          {"input_shape", cfg.input_shape}};
}

// ---------------------------------------------------------------------------
// describe

ordered_json describe_json(const ArchConfig& cfg, const LayerGraph& graph) {
  const BlockCounts counts = derive_block_counts(cfg.depth);
  const ChannelSchedule schedule = pyramidal_widths(cfg.alpha, counts.total);
  const SurvivalSchedule sd = linear_decay(counts.total, cfg.p_terminal);
  const AnalysisReport report = analyze(graph, &sd);

  ordered_json per_group = ordered_json::array();
  for (int g = 0; g < 3; ++g) {
    ordered_json widths = ordered_json::array();
    for (int k = 0; k < counts.per_group; ++k)
      widths.push_back(schedule.widths[g * counts.per_group + k]);
    per_group.push_back(widths);
  }

  return {{"config", config_json(cfg)},
          {"blocks", {{"per_group", counts.per_group}, {"total", counts.total}}},
          {"stem_width", schedule.stem_width},
          {"final_width", schedule.widths.back()},
          {"per_group_widths", per_group},
          {"params",
           {{"total", report.total_params},
            {"by_level",
             {{"trunk", report.params_by_level.trunk},
              {"final_shortcut", report.params_by_level.final_shortcut},
              {"middle_shortcut", report.params_by_level.middle_shortcut},
              {"root_shortcut", report.params_by_level.root_shortcut},
              {"classifier", report.params_by_level.classifier}}}}},
          {"flops_forward", report.flops_forward},
          {"expected_flops_sd", report.expected_flops_sd},
          {"expected_compute_fraction",
           report.flops_forward > 0
               ? report.expected_flops_sd / static_cast<double>(report.flops_forward)
               : 1.0},
          {"sd_schedule", {{"p_terminal", sd.p_terminal}, {"probs", sd.probs}}}};
}

int cmd_describe(const ArchFlags& flags, bool as_json, const std::string& out_path) {
  const ArchConfig cfg = resolve_arch(flags);
  const LayerGraph graph = build_checked(cfg);
  const ordered_json doc = describe_json(cfg, graph);

  if (!out_path.empty()) {
    std::ofstream file(out_path);
    if (!file) throw IoError("cannot open for writing: " + out_path);
    file << doc.dump(2) << '\n';
  }
  if (as_json) {
    std::cout << doc.dump(2) << '\n';
    return 0;
  }

  const BlockCounts counts = derive_block_counts(cfg.depth);
  const ShapeMap shapes = infer_shapes(graph);
  std::array<Shape, 3> group_out{};
  for (const BlockSpan& span : graph.final_block_spans) {
    const BlockRef& ref = graph.block_index.at(span.exit);
    group_out[ref.group - 1] = shapes.at(span.exit);
  }

  std::printf("Pyramidal RoR  depth=%d  alpha=%d  variant=%s  classes=%d\n", cfg.depth,
              cfg.alpha, to_string(cfg.block_variant).c_str(), cfg.num_classes);
  std::printf("blocks: %d per group, %d total   stem width %d -> final width %d\n\n",
              counts.per_group, counts.total, doc["stem_width"].get<int>(),
              doc["final_width"].get<int>());
  std::printf("%-6s %-7s %-12s %s\n", "group", "blocks", "widths", "output");
  for (int g = 0; g < 3; ++g) {
    const auto& widths = doc["per_group_widths"][g];
    std::printf("%-6d %-7d %-3d..%-6d %dx%d\n", g + 1, counts.per_group,
                widths.front().get<int>(), widths.back().get<int>(), group_out[g].height,
                group_out[g].width);
  }
  const auto& by_level = doc["params"]["by_level"];
  std::printf("\nparameters total: %lld\n",
              static_cast<long long>(doc["params"]["total"].get<std::int64_t>()));
  std::printf("  trunk:              %lld\n",
              static_cast<long long>(by_level["trunk"].get<std::int64_t>()));
  std::printf("  final shortcuts:    %lld\n",
              static_cast<long long>(by_level["final_shortcut"].get<std::int64_t>()));
  std::printf("  middle projections: %lld\n",
              static_cast<long long>(by_level["middle_shortcut"].get<std::int64_t>()));
  std::printf("  root projection:    %lld\n",
              static_cast<long long>(by_level["root_shortcut"].get<std::int64_t>()));
  std::printf("  classifier:         %lld\n",
              static_cast<long long>(by_level["classifier"].get<std::int64_t>()));
  std::printf("flops forward (MACs, batch 1): %llu\n",
              static_cast<unsigned long long>(doc["flops_forward"].get<std::uint64_t>()));
  std::printf("stochastic depth: p_terminal=%g, expected compute fraction %.4f\n",
              cfg.p_terminal, doc["expected_compute_fraction"].get<double>());
  return 0;
}

// ---------------------------------------------------------------------------
// validate / export

int cmd_validate(const ArchFlags& flags, const std::string& graph_path) {
  LayerGraph graph;
  if (!graph_path.empty()) {
    graph = load_graph_json(graph_path);
  } else {
    graph = build_graph(resolve_arch(flags));
  }
  const std::vector<std::string> findings = validate_graph(graph);
  if (findings.empty()) {
    std::cout << "ok\n";
    return 0;
  }
  for (const std::string& finding : findings) std::cout << finding << '\n';
  return 1;
}

int cmd_export(const ArchFlags& flags, const std::string& out_path) {
  const LayerGraph graph = build_checked(resolve_arch(flags));
  const std::string text = export_json(graph);
  if (out_path.empty()) {
    std::cout << text;
  } else {
    save_graph_json(graph, out_path);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sample-sd

int cmd_sample_sd(int blocks, double p_terminal, std::uint64_t seed, int draws) {
  const SurvivalSchedule schedule = linear_decay(blocks, p_terminal);
  auto rng = seeded_rng(seed, 0);
  ordered_json masks = ordered_json::array();
  for (int d = 0; d < draws; ++d) {
    const BlockMask mask = sample_mask(schedule, rng);
    ordered_json row = ordered_json::array();
    for (std::uint8_t bit : mask) row.push_back(static_cast<int>(bit));
    masks.push_back(row);
  }
  const ordered_json doc = {{"blocks", blocks},
                            {"p_terminal", p_terminal},
                            {"seed", seed},
                            {"probs", schedule.probs},
                            {"masks", masks}};
  std::cout << doc.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const ArchFlags& flags, double tolerance, std::uint64_t seed, bool with_sd) {
  const ArchConfig cfg = resolve_arch(flags);
  const LayerGraph graph = build_checked(cfg);
  const std::int64_t params = count_params(graph).total();
  if (params > 50000)
    std::cerr << "warning: " << params
              << " parameters; finite differences need two forward passes per sample\n";

  BlockMask mask;
  const BlockMask* mask_ptr = nullptr;
  if (with_sd) {
    const SurvivalSchedule schedule = linear_decay(graph.final_block_count(), cfg.p_terminal);
    auto rng = seeded_rng(seed, 3);
    mask = sample_mask(schedule, rng);
    mask_ptr = &mask;
  }

  const GradCheckReport report = gradcheck(graph, tolerance, seed, mask_ptr);
  std::printf("gradcheck: depth=%d alpha=%d variant=%s sd=%s\n", cfg.depth, cfg.alpha,
              to_string(cfg.block_variant).c_str(), with_sd ? "on" : "off");
  std::printf("checked %zu parameters; worst: node %d %s[%zu]\n", report.checked,
              report.worst_node, report.worst_tensor.c_str(), report.worst_index);
  std::printf("max rel err %.3e %s %.0e: %s\n", report.max_rel_error,
              report.pass ? "<" : ">=", report.tolerance, report.pass ? "PASS" : "FAIL");
  return report.pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train / eval helpers

LrSchedule parse_lr_schedule(const std::string& text) {
  if (text == "cifar") return cifar_lr_schedule();
  if (text == "svhn") return svhn_lr_schedule();
  LrSchedule schedule;
  std::stringstream stream(text);
  std::string entry;
  while (std::getline(stream, entry, ',')) {
    const std::size_t colon = entry.find(':');
    if (colon == std::string::npos)
      throw ConfigError("lr schedule entries are START:LR, got '" + entry + "'");
    try {
      std::size_t used = 0;
      const int start = std::stoi(entry.substr(0, colon), &used);
      if (used != colon) throw ConfigError("bad epoch in '" + entry + "'");
      const std::string lr_text = entry.substr(colon + 1);
      const double lr = std::stod(lr_text, &used);
      if (used != lr_text.size()) throw ConfigError("bad rate in '" + entry + "'");
      schedule.push_back({start, lr});
    } catch (const std::invalid_argument&) {
      throw ConfigError("cannot parse lr schedule entry '" + entry + "'");
    } catch (const std::out_of_range&) {
      throw ConfigError("lr schedule entry out of range: '" + entry + "'");
    }
  }
  return schedule;
}

// Flat key=value file mirroring the TrainConfig fields; same comment and
// unknown-key rules as the architecture config format.
TrainConfig parse_train_config_file(const std::string& path, TrainConfig base) {
  std::ifstream file(path);
  if (!file) throw IoError("cannot open: " + path);

  auto trim = [](std::string s) {
    const auto begin = s.find_first_not_of(" \t\r");
    const auto end = s.find_last_not_of(" \t\r");
    return begin == std::string::npos ? std::string() : s.substr(begin, end - begin + 1);
  };
  auto parse_bool = [](const std::string& v, int line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("line " + std::to_string(line) + ": expected true/false, got '" + v + "'");
  };

  std::string raw;
  int line_no = 0;
  while (std::getline(file, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "epochs") {
        base.epochs = std::stoi(value);
      } else if (key == "batch_size") {
        base.batch_size = std::stoi(value);
      } else if (key == "lr_schedule") {
        base.lr_schedule = parse_lr_schedule(value);
      } else if (key == "momentum") {
        base.momentum = std::stod(value);
      } else if (key == "weight_decay") {
        base.weight_decay = std::stod(value);
      } else if (key == "augment") {
        base.augment = parse_bool(value, line_no);
      } else if (key == "normalize") {
        if (value == "per_channel_meanstd") {
          base.normalize = NormalizeMode::PerChannelMeanStd;
        } else if (value == "none") {
          base.normalize = NormalizeMode::None;
        } else {
          throw ConfigError("line " + std::to_string(line_no) +
                            ": normalize must be per_channel_meanstd or none");
        }
      } else if (key == "seed") {
        base.seed = std::stoull(value);
      } else if (key == "shuffle") {
        base.shuffle = parse_bool(value, line_no);
      } else if (key == "eval_every") {
        base.eval_every = std::stoi(value);
      } else if (key == "checkpoint_every") {
        base.checkpoint_every = std::stoi(value);
      } else if (key == "checkpoint_path") {
        base.checkpoint_path = value;
      } else {
        throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("line " + std::to_string(line_no) + ": cannot parse value '" + value +
                        "'");
    } catch (const std::out_of_range&) {
      throw ConfigError("line " + std::to_string(line_no) + ": value out of range");
    }
  }
  return base;
}

ordered_json epoch_json(const EpochRecord& rec) {
  return {{"epoch", rec.epoch},          {"train_loss", rec.train_loss},
          {"train_acc", rec.train_acc},  {"test_acc", rec.test_acc},
          {"lr", rec.lr},                {"active_fraction", rec.active_fraction}};
}

struct DataFlags {
  std::vector<int> synthetic;  // classes, per_class
  std::uint64_t synthetic_seed = 7;
  std::string data_path;
};

Dataset resolve_dataset(const DataFlags& f, Split split, int num_classes) {
  if (!f.synthetic.empty() && !f.data_path.empty())
    throw ConfigError("pass either --synthetic or --data, not both");
  if (!f.synthetic.empty()) {
    if (f.synthetic[0] != num_classes)
      throw ConfigError("synthetic class count " + std::to_string(f.synthetic[0]) +
                        " != num_classes " + std::to_string(num_classes) +
                        " (set --num-classes to match)");
    Dataset data = make_synthetic(f.synthetic[0], f.synthetic[1], f.synthetic_seed);
    data.split = split;
    return data;
  }
  if (f.data_path.empty()) throw ConfigError("no dataset: pass --synthetic C P or --data PATH");
  return load_cifar_binary(f.data_path, split, num_classes);
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  ArchFlags arch;
  DataFlags data;
  std::string test_path;
  std::string train_config_path;
  std::string log_path;
  int epochs = 0;
  int batch_size = 0;
  std::string lr_schedule;
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool no_augment = false;
  bool no_normalize = false;
  bool no_shuffle = false;
  bool no_sd = false;
  std::uint64_t seed = 0;
  int eval_every = 0;
  int checkpoint_every = 0;
  std::string checkpoint_out;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* momentum_opt = nullptr;
  CLI::Option* wd_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* eval_every_opt = nullptr;
  CLI::Option* ckpt_every_opt = nullptr;
  CLI::Option* ckpt_out_opt = nullptr;
};

int cmd_train(TrainFlags& f) {
  ArchConfig cfg;
  {
    // Synthetic data may set the class count when it was not pinned by the
    // user; an explicit --num-classes or config file must agree instead.
    if (!f.data.synthetic.empty() && f.arch.num_classes_opt->count() == 0 &&
        f.arch.config_path.empty()) {
      cfg = resolve_arch(f.arch);
      cfg.num_classes = f.data.synthetic[0];
      validate(cfg);
    } else {
      cfg = resolve_arch(f.arch);
    }
  }
  const LayerGraph graph = build_checked(cfg);

  TrainConfig tc;
  if (!f.train_config_path.empty()) tc = parse_train_config_file(f.train_config_path, tc);
  if (f.epochs_opt->count() > 0) tc.epochs = f.epochs;
  if (f.batch_opt->count() > 0) tc.batch_size = f.batch_size;
  if (f.lr_opt->count() > 0) tc.lr_schedule = parse_lr_schedule(f.lr_schedule);
  if (f.momentum_opt->count() > 0) tc.momentum = f.momentum;
  if (f.wd_opt->count() > 0) tc.weight_decay = f.weight_decay;
  if (f.seed_opt->count() > 0) tc.seed = f.seed;
  if (f.eval_every_opt->count() > 0) tc.eval_every = f.eval_every;
  if (f.ckpt_every_opt->count() > 0) tc.checkpoint_every = f.checkpoint_every;
  if (f.ckpt_out_opt->count() > 0) tc.checkpoint_path = f.checkpoint_out;
  if (f.no_augment) tc.augment = false;
  if (f.no_normalize) tc.normalize = NormalizeMode::None;
  if (f.no_shuffle) tc.shuffle = false;

  const Dataset train_data = resolve_dataset(f.data, Split::Train, cfg.num_classes);
  Dataset test_data;
  const Dataset* test_ptr = nullptr;
  if (!f.test_path.empty()) {
    test_data = load_cifar_binary(f.test_path, Split::Test, cfg.num_classes);
    test_ptr = &test_data;
  }

  SurvivalSchedule sd;
  const SurvivalSchedule* sd_ptr = nullptr;
  if (!f.no_sd) {
    sd = linear_decay(graph.final_block_count(), cfg.p_terminal);
    sd_ptr = &sd;
  }

  const EpochCallback stream_epochs = [](const EpochRecord& rec) {
    std::cout << epoch_json(rec).dump() << std::endl;
    return true;
  };
  const TrainResult result = train(graph, tc, train_data, test_ptr, sd_ptr, stream_epochs);

  if (!f.log_path.empty()) {
    std::ofstream log(f.log_path);
    if (!log) throw IoError("cannot open for writing: " + f.log_path);
    result.log.write_ndjson(log);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const std::string& checkpoint_path, DataFlags& data, int batch_size, bool no_sd,
             bool no_normalize) {
  const ArchConfig cfg = read_checkpoint_config(checkpoint_path);
  validate(cfg);
  const LayerGraph graph = build_checked(cfg);
  ParamStore params = load_checkpoint<float>(checkpoint_path, graph);

  Dataset dataset = resolve_dataset(data, Split::Test, cfg.num_classes);
  if (!no_normalize) normalize(dataset, compute_channel_stats(dataset));

  SurvivalSchedule sd;
  const SurvivalSchedule* sd_ptr = nullptr;
  if (!no_sd) {
    sd = linear_decay(graph.final_block_count(), cfg.p_terminal);
    sd_ptr = &sd;
  }
  const EvalMetrics metrics = evaluate(graph, params, dataset, sd_ptr, batch_size);
  const ordered_json doc = {{"count", dataset.count()},
                            {"top1_error", metrics.top1_error},
                            {"mean_loss", metrics.mean_loss}};
  std::cout << doc.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pyramidal ror: compile configs to layer graphs, analyze, train"};
  app.require_subcommand(1);

  ArchFlags describe_arch;
  bool describe_json_flag = false;
  std::string describe_out;
  CLI::App* describe = app.add_subcommand("describe", "analysis report for a configuration");
  add_arch_flags(describe, describe_arch);
  describe->add_flag("--json", describe_json_flag, "print the JSON report instead of the table");
  describe->add_option("--out", describe_out, "also write the JSON report to a file");

  ArchFlags validate_arch;
  std::string validate_graph_path;
  CLI::App* validate_cmd = app.add_subcommand("validate", "structural checks on a graph");
  add_arch_flags(validate_cmd, validate_arch);
  validate_cmd->add_option("--graph", validate_graph_path,
                           "validate an exported graph JSON file instead of building one");

  ArchFlags export_arch;
  std::string export_out;
  CLI::App* export_cmd = app.add_subcommand("export", "emit the layer graph as JSON");
  add_arch_flags(export_cmd, export_arch);
  export_cmd->add_option("-o,--output", export_out, "output path (stdout when omitted)");

  int sd_blocks = 0;
  double sd_p_terminal = 0.5;
  std::uint64_t sd_seed = 1;
  int sd_draws = 1;
  CLI::App* sample_sd = app.add_subcommand("sample-sd", "sample stochastic-depth block masks");
  sample_sd->add_option("--blocks", sd_blocks, "number of final-level blocks")->required();
  sample_sd->add_option("--p-terminal", sd_p_terminal, "terminal survival probability");
  sample_sd->add_option("--seed", sd_seed, "rng seed");
  sample_sd->add_option("--draws", sd_draws, "number of masks to draw");

  ArchFlags gradcheck_arch;
  double gc_tolerance = 1e-4;
  std::uint64_t gc_seed = 1;
  bool gc_sd = false;
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference check of the backward pass");
  add_arch_flags(gradcheck_cmd, gradcheck_arch);
  gradcheck_cmd->add_option("--tolerance", gc_tolerance, "max relative error to accept");
  gradcheck_cmd->add_option("--seed", gc_seed, "rng seed");
  gradcheck_cmd->add_flag("--sd", gc_sd, "check with a sampled stochastic-depth mask");

  TrainFlags tf;
  CLI::App* train_cmd = app.add_subcommand("train", "train a configuration at desk scale");
  add_arch_flags(train_cmd, tf.arch);
  train_cmd->add_option("--synthetic", tf.data.synthetic, "CLASSES PER_CLASS synthetic dataset")
      ->expected(2);
  train_cmd->add_option("--synthetic-seed", tf.data.synthetic_seed, "synthetic dataset seed");
  train_cmd->add_option("--data", tf.data.data_path, "CIFAR-binary training file");
  train_cmd->add_option("--test", tf.test_path, "CIFAR-binary test file");
  train_cmd->add_option("--train-config", tf.train_config_path,
                        "train config file (key = value lines)");
  tf.epochs_opt = train_cmd->add_option("--epochs", tf.epochs, "epochs (default 500)");
  tf.batch_opt = train_cmd->add_option("--batch-size", tf.batch_size, "mini-batch (default 128)");
  tf.lr_opt = train_cmd->add_option("--lr-schedule", tf.lr_schedule,
                                    "'cifar', 'svhn', or START:LR[,START:LR...]");
  tf.momentum_opt = train_cmd->add_option("--momentum", tf.momentum, "SGD momentum (default 0.9)");
  tf.wd_opt =
      train_cmd->add_option("--weight-decay", tf.weight_decay, "weight decay (default 1e-4)");
  tf.seed_opt = train_cmd->add_option("--seed", tf.seed, "training seed (default 1)");
  tf.eval_every_opt = train_cmd->add_option("--eval-every", tf.eval_every,
                                            "epochs between test evaluations (0 = never)");
  tf.ckpt_every_opt = train_cmd->add_option("--checkpoint-every", tf.checkpoint_every,
                                            "epochs between checkpoints (0 = final only)");
  tf.ckpt_out_opt =
      train_cmd->add_option("--checkpoint-out", tf.checkpoint_out, "checkpoint output path");
  train_cmd->add_option("--log", tf.log_path, "write the run log (NDJSON) to this path");
  train_cmd->add_flag("--no-augment", tf.no_augment, "disable flip + pad-crop augmentation");
  train_cmd->add_flag("--no-normalize", tf.no_normalize, "disable per-channel normalization");
  train_cmd->add_flag("--no-shuffle", tf.no_shuffle, "keep dataset order each epoch");
  train_cmd->add_flag("--no-sd", tf.no_sd, "disable stochastic depth");

  std::string eval_checkpoint;
  DataFlags eval_data;
  int eval_batch = 256;
  bool eval_no_sd = false;
  bool eval_no_normalize = false;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--synthetic", eval_data.synthetic, "CLASSES PER_CLASS synthetic dataset")
      ->expected(2);
  eval_cmd->add_option("--synthetic-seed", eval_data.synthetic_seed, "synthetic dataset seed");
  eval_cmd->add_option("--data", eval_data.data_path, "CIFAR-binary file");
  eval_cmd->add_option("--batch-size", eval_batch, "evaluation batch size");
  eval_cmd->add_flag("--no-sd", eval_no_sd, "skip survival-probability branch scaling");
  eval_cmd->add_flag("--no-normalize", eval_no_normalize,
                     "disable per-channel normalization (stats come from the given split)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (describe->parsed()) return cmd_describe(describe_arch, describe_json_flag, describe_out);
    if (validate_cmd->parsed()) return cmd_validate(validate_arch, validate_graph_path);
    if (export_cmd->parsed()) return cmd_export(export_arch, export_out);
    if (sample_sd->parsed()) return cmd_sample_sd(sd_blocks, sd_p_terminal, sd_seed, sd_draws);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck_arch, gc_tolerance, gc_seed, gc_sd);
    if (train_cmd->parsed()) return cmd_train(tf);
    if (eval_cmd->parsed())
      return cmd_eval(eval_checkpoint, eval_data, eval_batch, eval_no_sd, eval_no_normalize);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
