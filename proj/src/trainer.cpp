#include "pyror/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <ostream>

#include <json.hpp>

#include "pyror/errors.hpp"
#include "pyror/rng.hpp"

namespace pyror {

namespace {

constexpr int kImageEdge = 32;
constexpr int kImageChannels = 3;
constexpr std::size_t kCifarRecordBytes = 1 + 3 * 1024;

// Named rng streams hanging off the training seed, so enabling one knob
// never perturbs the draws of another.
enum RngStream : std::uint64_t {
  kShuffleStream = 1,
  kAugmentStream = 2,
  kSdStream = 3,
  kSyntheticStream = 4,
};

void validate_schedule(const LrSchedule& schedule) {
  if (schedule.empty()) throw ConfigError("lr schedule is empty");
  if (schedule.front().start_epoch != 0)
    throw ConfigError("lr schedule must start at epoch 0");
  for (std::size_t i = 1; i < schedule.size(); ++i) {
    if (schedule[i].start_epoch <= schedule[i - 1].start_epoch)
      throw ConfigError("lr schedule start epochs must be strictly increasing");
  }
  for (const LrStep& step : schedule) {
    if (step.lr < 0) throw ConfigError("lr schedule rates must be non-negative");
  }
}

// Fisher-Yates with our own draw so shuffles are identical across platforms.
void shuffle_indices(std::vector<int>& indices, std::mt19937_64& rng) {
  for (std::size_t i = indices.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(indices[i - 1], indices[j]);
  }
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

double lr_at(const LrSchedule& schedule, int epoch) {
  validate_schedule(schedule);
  if (epoch < 0) throw ConfigError("epoch must be non-negative");
  double lr = schedule.front().lr;
  for (const LrStep& step : schedule) {
    if (step.start_epoch <= epoch) lr = step.lr;
  }
  return lr;
}

Dataset load_cifar_binary(const std::string& path, Split split, int num_classes) {
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  std::ifstream file(path, std::ios::binary | std::ios::ate);
  if (!file) throw IoError("cannot open: " + path);
  const std::streamoff size = file.tellg();
  file.seekg(0);
  if (size % static_cast<std::streamoff>(kCifarRecordBytes) != 0) {
    const std::streamoff whole = size - size % static_cast<std::streamoff>(kCifarRecordBytes);
    throw IoError(path + ": size " + std::to_string(size) + " is not a multiple of " +
                  std::to_string(kCifarRecordBytes) + "-byte records (record truncated at byte " +
                  std::to_string(whole) + ")");
  }
  const int count = static_cast<int>(size / static_cast<std::streamoff>(kCifarRecordBytes));

  Dataset dataset;
  dataset.split = split;
  dataset.images = Tensor(count, kImageChannels, kImageEdge, kImageEdge);
  dataset.labels.resize(count);
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (int i = 0; i < count; ++i) {
    file.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record.size()));
    if (!file) throw IoError(path + ": truncated record " + std::to_string(i));
    const int label = record[0];
    if (label >= num_classes)
      throw IoError(path + ": record " + std::to_string(i) + " has label " +
                    std::to_string(label) + " >= num_classes " + std::to_string(num_classes));
    dataset.labels[i] = label;
    float* dst = &dataset.images.at(i, 0, 0, 0);
    for (std::size_t p = 0; p < 3 * 1024; ++p)
      dst[p] = static_cast<float>(record[1 + p]) / 255.0f;
  }
  return dataset;
}

Dataset make_synthetic(int classes, int per_class, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (per_class < 1) throw ConfigError("synthetic dataset needs at least 1 sample per class");

  Dataset dataset;
  dataset.split = Split::Train;
  dataset.images = Tensor(classes * per_class, kImageChannels, kImageEdge, kImageEdge);
  dataset.labels.resize(static_cast<std::size_t>(classes) * per_class);

  auto rng = seeded_rng(seed, kSyntheticStream);
  for (int cls = 0; cls < classes; ++cls) {
    // Distinct base color per class plus a bright spot whose position walks
    // around a circle with the class index.
    const double angle = 2.0 * std::numbers::pi * cls / classes;
    double base[kImageChannels];
    for (int ch = 0; ch < kImageChannels; ++ch)
      base[ch] = 0.5 + 0.3 * std::sin(angle + ch * 2.0 * std::numbers::pi / 3.0);
    const int cy = 16 + static_cast<int>(std::lround(9.0 * std::sin(angle)));
    const int cx = 16 + static_cast<int>(std::lround(9.0 * std::cos(angle)));

    for (int s = 0; s < per_class; ++s) {
      const int i = cls * per_class + s;
      dataset.labels[i] = cls;
      for (int ch = 0; ch < kImageChannels; ++ch)
        for (int y = 0; y < kImageEdge; ++y)
          for (int x = 0; x < kImageEdge; ++x) {
            double v = base[ch] + 0.08 * next_normal(rng);
            if (std::abs(y - cy) <= 2 && std::abs(x - cx) <= 2) v += 0.4;
            dataset.images.at(i, ch, y, x) = static_cast<float>(clamp01(v));
          }
    }
  }
  return dataset;
}

void flip_horizontal(Tensor& images, int index) {
  for (int ch = 0; ch < images.c; ++ch)
    for (int y = 0; y < images.h; ++y) {
      float* row = &images.at(index, ch, y, 0);
      std::reverse(row, row + images.w);
    }
}

void pad_crop(Tensor& images, int index, int offset_y, int offset_x, int pad) {
  if (pad < 0 || offset_y < 0 || offset_y > 2 * pad || offset_x < 0 || offset_x > 2 * pad)
    throw ConfigError("crop offsets must lie in [0, 2*pad]");
  const int h = images.h, w = images.w;
  std::vector<float> original(static_cast<std::size_t>(h) * w);
  for (int ch = 0; ch < images.c; ++ch) {
    std::memcpy(original.data(), &images.at(index, ch, 0, 0), original.size() * sizeof(float));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = y + offset_y - pad;
        const int sx = x + offset_x - pad;
        images.at(index, ch, y, x) = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                         ? original[static_cast<std::size_t>(sy) * w + sx]
                                         : 0.0f;
      }
  }
}

void augment_batch(Tensor& images, std::mt19937_64& rng) {
  constexpr int pad = 4;
  for (int i = 0; i < images.n; ++i) {
    const bool flip = next_uniform(rng) < 0.5;
    const int offset_y = static_cast<int>(rng() % (2 * pad + 1));
    const int offset_x = static_cast<int>(rng() % (2 * pad + 1));
    if (flip) flip_horizontal(images, i);
    pad_crop(images, i, offset_y, offset_x, pad);
  }
}

ChannelStats compute_channel_stats(const Dataset& dataset) {
  if (dataset.count() == 0) throw ConfigError("cannot compute stats of an empty dataset");
  ChannelStats stats;
  const std::size_t plane = static_cast<std::size_t>(dataset.images.h) * dataset.images.w;
  const double denom = static_cast<double>(dataset.count()) * plane;
  for (int ch = 0; ch < kImageChannels; ++ch) {
    double sum = 0.0;
    for (int i = 0; i < dataset.count(); ++i) {
      const float* src = &dataset.images.at(i, ch, 0, 0);
      for (std::size_t p = 0; p < plane; ++p) sum += src[p];
    }
    const double mean = sum / denom;
    double sq = 0.0;
    for (int i = 0; i < dataset.count(); ++i) {
      const float* src = &dataset.images.at(i, ch, 0, 0);
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = src[p] - mean;
        sq += d * d;
      }
    }
    stats.mean[ch] = mean;
    stats.stddev[ch] = std::sqrt(sq / denom);
  }
  return stats;
}

void normalize(Dataset& dataset, const ChannelStats& stats) {
  const std::size_t plane = static_cast<std::size_t>(dataset.images.h) * dataset.images.w;
  for (int ch = 0; ch < kImageChannels; ++ch) {
    if (!(stats.stddev[ch] > 0))
      throw ConfigError("channel " + std::to_string(ch) + " has zero standard deviation");
    const float mean = static_cast<float>(stats.mean[ch]);
    const float inv = static_cast<float>(1.0 / stats.stddev[ch]);
    for (int i = 0; i < dataset.count(); ++i) {
      float* dst = &dataset.images.at(i, ch, 0, 0);
      for (std::size_t p = 0; p < plane; ++p) dst[p] = (dst[p] - mean) * inv;
    }
  }
}

void RunLog::write_ndjson(std::ostream& out) const {
  for (const EpochRecord& rec : epochs) {
    nlohmann::ordered_json line = {
        {"epoch", rec.epoch},
        {"train_loss", rec.train_loss},
        {"train_acc", rec.train_acc},
        {"test_acc", rec.test_acc},
        {"lr", rec.lr},
        {"active_fraction", rec.active_fraction},
    };
    out << line.dump() << '\n';
  }
}

TrainResult train(const LayerGraph& graph, const TrainConfig& config,
                  const Dataset& train_data, const Dataset* test_data,
                  const SurvivalSchedule* sd, const EpochCallback& on_epoch) {
  if (config.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (config.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (config.momentum < 0 || config.momentum >= 1)
    throw ConfigError("momentum must lie in [0, 1)");
  if (config.weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  validate_schedule(config.lr_schedule);
  if (train_data.count() < 1) throw ConfigError("training set is empty");
  if (sd && sd->size() != graph.final_block_count())
    throw ConfigError("survival schedule length " + std::to_string(sd->size()) +
                      " != final block count " + std::to_string(graph.final_block_count()));

  // Normalize local copies; the caller's datasets stay untouched.
  TrainResult result;
  Dataset train_local = train_data;
  std::optional<Dataset> test_local;
  if (test_data) test_local = *test_data;
  if (config.normalize == NormalizeMode::PerChannelMeanStd) {
    result.stats = compute_channel_stats(train_data);
    normalize(train_local, result.stats);
    if (test_local) normalize(*test_local, result.stats);
  }

  ParamStore& params = result.params;
  params = init_params<float>(graph, config.seed);

  std::map<int, std::map<std::string, Tensor>> velocity;
  for (const auto& [id, entry] : params.nodes)
    for (const auto& [name, grad] : entry.grads)
      velocity[id].emplace(name, Tensor(grad.n, grad.c, grad.h, grad.w));

  auto shuffle_rng = seeded_rng(config.seed, kShuffleStream);
  auto augment_rng = seeded_rng(config.seed, kAugmentStream);
  auto sd_rng = seeded_rng(config.seed, kSdStream);

  const int n = train_local.count();
  std::vector<int> indices(n);
  for (int i = 0; i < n; ++i) indices[i] = i;

  const std::size_t image_floats =
      static_cast<std::size_t>(kImageChannels) * train_local.images.h * train_local.images.w;
  long long step_index = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config.lr_schedule, epoch);
    if (config.shuffle) shuffle_indices(indices, shuffle_rng);

    double loss_sum = 0.0;
    long long correct = 0;
    double active_sum = 0.0;
    int steps = 0;

    for (int start = 0; start < n; start += config.batch_size) {
      const int bs = std::min(config.batch_size, n - start);
      Tensor batch(bs, kImageChannels, train_local.images.h, train_local.images.w);
      std::vector<int> labels(bs);
      for (int k = 0; k < bs; ++k) {
        const int src = indices[start + k];
        std::memcpy(&batch.at(k, 0, 0, 0), &train_local.images.at(src, 0, 0, 0),
                    image_floats * sizeof(float));
        labels[k] = train_local.labels[src];
      }
      if (config.augment) augment_batch(batch, augment_rng);

      BlockMask mask;
      ForwardOptions options;
      options.mode = Mode::Train;
      if (sd) {
        mask = sample_mask(*sd, sd_rng);
        options.sd_mask = &mask;
        double kept = 0.0;
        for (std::uint8_t bit : mask) kept += bit;
        active_sum += kept / mask.size();
      } else {
        active_sum += 1.0;
      }
      ++steps;

      ForwardResult cache = forward(graph, params, batch, options);
      SoftmaxCeResult<float> ce = softmax_cross_entropy(cache.logits, labels);
      if (!std::isfinite(ce.loss))
        throw NumericalError("non-finite loss at step " + std::to_string(step_index) +
                             " (epoch " + std::to_string(epoch) + ")");
      loss_sum += ce.loss * bs;
      for (int k = 0; k < bs; ++k)
        if (ce.predictions[k] == labels[k]) ++correct;

      backward(graph, params, cache, ce.grad_logits);

      // v <- momentum * v - lr * (grad + weight_decay * theta); theta <- theta + v
      const float mu = static_cast<float>(config.momentum);
      const float rate = static_cast<float>(lr);
      const float wd = static_cast<float>(config.weight_decay);
      for (auto& [id, entry] : params.nodes) {
        for (auto& [name, grad] : entry.grads) {
          Tensor& theta = entry.tensors.at(name);
          Tensor& vel = velocity.at(id).at(name);
          for (std::size_t p = 0; p < theta.data.size(); ++p) {
            vel.data[p] = mu * vel.data[p] - rate * (grad.data[p] + wd * theta.data[p]);
            theta.data[p] += vel.data[p];
          }
        }
      }
      ++step_index;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / n;
    rec.train_acc = static_cast<double>(correct) / n;
    rec.lr = lr;
    rec.active_fraction = steps > 0 ? active_sum / steps : 1.0;
    if (test_local && config.eval_every > 0 &&
        ((epoch + 1) % config.eval_every == 0 || epoch == config.epochs - 1)) {
      const EvalMetrics metrics = evaluate(graph, params, *test_local, sd);
      rec.test_acc = 1.0 - metrics.top1_error;
    }
    result.log.epochs.push_back(rec);

    if (!config.checkpoint_path.empty() && config.checkpoint_every > 0 &&
        (epoch + 1) % config.checkpoint_every == 0) {
      save_checkpoint(config.checkpoint_path, graph, params);
    }
    if (on_epoch && !on_epoch(rec)) break;
  }

  if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, graph, params);
  return result;
}

EvalMetrics evaluate(const LayerGraph& graph, ParamStore& params, const Dataset& dataset,
                     const SurvivalSchedule* sd, int batch_size) {
  if (dataset.count() < 1) throw ConfigError("evaluation set is empty");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (sd && sd->size() != graph.final_block_count())
    throw ConfigError("survival schedule length " + std::to_string(sd->size()) +
                      " != final block count " + std::to_string(graph.final_block_count()));

  ForwardOptions options;
  options.mode = Mode::Eval;
  options.sd_probs = sd;

  const int n = dataset.count();
  const std::size_t image_floats =
      static_cast<std::size_t>(dataset.images.c) * dataset.images.h * dataset.images.w;
  double loss_sum = 0.0;
  long long wrong = 0;
  for (int start = 0; start < n; start += batch_size) {
    const int bs = std::min(batch_size, n - start);
    Tensor batch(bs, dataset.images.c, dataset.images.h, dataset.images.w);
    std::vector<int> labels(bs);
    for (int k = 0; k < bs; ++k) {
      std::memcpy(&batch.at(k, 0, 0, 0), &dataset.images.at(start + k, 0, 0, 0),
                  image_floats * sizeof(float));
      labels[k] = dataset.labels[start + k];
    }
    ForwardResult cache = forward(graph, params, batch, options);
    SoftmaxCeResult<float> ce = softmax_cross_entropy(cache.logits, labels);
    loss_sum += ce.loss * bs;
    for (int k = 0; k < bs; ++k)
      if (ce.predictions[k] != labels[k]) ++wrong;
  }
  EvalMetrics metrics;
  metrics.top1_error = static_cast<double>(wrong) / n;
  metrics.mean_loss = loss_sum / n;
  return metrics;
}

}  // namespace pyror
