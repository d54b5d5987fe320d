#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pyror/graph.hpp"
#include "pyror/nnkernel.hpp"
#include "pyror/stochdepth.hpp"
#include "pyror/tensor.hpp"

namespace pyror {

struct LrStep {
  int start_epoch = 0;
  double lr = 0.1;
};

/// Step schedule: entries sorted by strictly increasing start_epoch,
/// first entry at epoch 0.
using LrSchedule = std::vector<LrStep>;

inline LrSchedule cifar_lr_schedule() { return {{0, 0.1}, {250, 0.01}, {375, 0.001}}; }
inline LrSchedule svhn_lr_schedule() { return {{0, 0.1}, {30, 0.01}, {35, 0.001}}; }

double lr_at(const LrSchedule& schedule, int epoch);

enum class NormalizeMode { PerChannelMeanStd, None };

struct TrainConfig {
  int epochs = 500;
  int batch_size = 128;
  LrSchedule lr_schedule = cifar_lr_schedule();
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool augment = true;
  NormalizeMode normalize = NormalizeMode::PerChannelMeanStd;
  std::uint64_t seed = 1;
  bool shuffle = true;
  int eval_every = 1;        // epochs between test-set evaluations; 0 = never
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  std::string checkpoint_path;
};

enum class Split { Train, Test };

/// Images are (count, 3, 32, 32) floats in [0,1] before normalization.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  Split split = Split::Train;

  int count() const { return images.n; }
};

/// CIFAR binary layout: 3073-byte records, 1 label byte + 3 channel planes
/// of 1024 row-major bytes. Pixels are scaled to [0,1]; record order kept.
Dataset load_cifar_binary(const std::string& path, Split split, int num_classes = 10);

/// Class-conditional Gaussian blobs with per-class channel means and a
/// class-positioned bright spot; linearly separable after pooling.
/// Labels are class-major, exactly per_class each.
Dataset make_synthetic(int classes, int per_class, std::uint64_t seed);

/// Per image: horizontal flip with probability 1/2, then zero-pad 4 on
/// each side and take a uniformly random 32x32 crop.
void augment_batch(Tensor& images, std::mt19937_64& rng);

// Deterministic pieces of augment_batch, exposed for direct testing.
void flip_horizontal(Tensor& images, int index);
void pad_crop(Tensor& images, int index, int offset_y, int offset_x, int pad = 4);

struct ChannelStats {
  std::array<double, 3> mean = {0, 0, 0};
  std::array<double, 3> stddev = {1, 1, 1};
};

/// Stats are meant to come from the training split only.
ChannelStats compute_channel_stats(const Dataset& dataset);

/// (x - mean_c) / std_c per channel. Throws ConfigError on zero std.
void normalize(Dataset& dataset, const ChannelStats& stats);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = -1.0;  // -1 when not evaluated that epoch
  double lr = 0.0;
  double active_fraction = 1.0;  // mean kept-block fraction over the epoch
};

struct RunLog {
  std::vector<EpochRecord> epochs;

  /// Newline-delimited JSON, one record per epoch.
  void write_ndjson(std::ostream& out) const;
};

struct TrainResult {
  RunLog log;
  ParamStore params;
  ChannelStats stats;  // the normalization applied (identity when disabled)
};

/// Called after each epoch; return false to stop early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// SGD with momentum and weight decay:
///   v <- momentum * v - lr * (grad + weight_decay * theta); theta <- theta + v.
/// Per epoch: seeded shuffle, optional augmentation, train-mode forward with
/// a freshly sampled block mask when `sd` is given, softmax cross-entropy,
/// backward, update. Aborts with NumericalError naming the step if the loss
/// goes non-finite. Fully deterministic for a fixed (config, datasets).
TrainResult train(const LayerGraph& graph, const TrainConfig& config,
                  const Dataset& train_data, const Dataset* test_data = nullptr,
                  const SurvivalSchedule* sd = nullptr,
                  const EpochCallback& on_epoch = {});

struct EvalMetrics {
  double top1_error = 0.0;
  double mean_loss = 0.0;
};

/// Eval-mode forward over the dataset. When `sd` is given, trunk outputs
/// are scaled by their survival probabilities.
EvalMetrics evaluate(const LayerGraph& graph, ParamStore& params, const Dataset& dataset,
                     const SurvivalSchedule* sd = nullptr, int batch_size = 256);

}  // namespace pyror
