#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "pyror/graph.hpp"
#include "pyror/stochdepth.hpp"
#include "pyror/tensor.hpp"

namespace pyror {

/// Named parameter tensors per node id, with matching gradient slots for
/// the learned ones. Tensor names:
///   conv / channel_project: "weight" (out x in x k x k)
///   batch_norm: "gamma", "beta" (learned), "running_mean", "running_var" (state)
///   linear: "weight" (out x in x 1 x 1), "bias" (1 x out x 1 x 1)
template <typename T>
struct ParamStoreT {
  struct Entry {
    std::map<std::string, TensorT<T>> tensors;
    std::map<std::string, TensorT<T>> grads;  // keys are a subset of tensors'
    bool operator==(const Entry&) const = default;
  };
  std::map<int, Entry> nodes;  // ordered by node id

  void zero_grads();
  std::size_t learned_count() const;  // total learned scalar parameters
  bool operator==(const ParamStoreT&) const = default;
};

using ParamStore = ParamStoreT<float>;
using ParamStoreD = ParamStoreT<double>;

/// He fan-in init for conv/projection/linear weights (variance 2/fan_in),
/// BN gamma 1 / beta 0 / running stats (0,1), linear bias 0. Each node
/// draws from its own seed stream, so results depend only on (graph, seed).
template <typename T>
ParamStoreT<T> init_params(const LayerGraph& graph, std::uint64_t seed);

enum class Mode { Train, Eval };

template <typename T>
struct BnBatchStats {
  std::vector<T> mean;     // per channel
  std::vector<T> inv_std;  // 1/sqrt(var + eps)
};

/// Activation cache produced by forward() and consumed by backward().
template <typename T>
struct ForwardResultT {
  TensorT<T> logits;
  TensorT<T> input;
  std::unordered_map<int, TensorT<T>> outputs;  // active nodes only
  std::unordered_map<int, BnBatchStats<T>> bn_stats;
  std::vector<int> active;  // evaluated node ids, topological order
  BlockMask mask;           // empty when no stochastic-depth mask was used
  Mode mode = Mode::Eval;
};

using ForwardResult = ForwardResultT<float>;

struct ForwardOptions {
  Mode mode = Mode::Eval;
  /// Train only: dropped blocks contribute their shortcut path alone and
  /// are never evaluated. Length must equal the final-block count.
  const BlockMask* sd_mask = nullptr;
  /// Eval only: each block's trunk output is scaled by its survival
  /// probability before the residual Add.
  const SurvivalSchedule* sd_probs = nullptr;
  /// Scan every node output for non-finite values.
  bool debug_checks = false;
};

/// Topological-order evaluation. Train-mode BatchNorm normalizes with batch
/// statistics and updates running stats in `params` (the only mutation);
/// eval mode reads running stats and leaves `params` untouched.
template <typename T>
ForwardResultT<T> forward(const LayerGraph& graph, ParamStoreT<T>& params,
                          const TensorT<T>& input, const ForwardOptions& options);

/// Reverse-mode gradients for every active node. Overwrites the gradient
/// slots in `params` (dropped blocks therefore read exactly zero) and
/// returns the gradient with respect to the network input.
template <typename T>
TensorT<T> backward(const LayerGraph& graph, ParamStoreT<T>& params,
                    const ForwardResultT<T>& cache, const TensorT<T>& grad_logits);

template <typename T>
struct SoftmaxCeResult {
  double loss = 0.0;                 // mean over the batch
  TensorT<T> grad_logits;            // d loss / d logits
  std::vector<int> predictions;      // argmax per sample
};

/// Mean softmax cross-entropy over the batch; logits are (n, classes, 1, 1).
template <typename T>
SoftmaxCeResult<T> softmax_cross_entropy(const TensorT<T>& logits,
                                         const std::vector<int>& labels);

struct GradCheckReport {
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::size_t checked = 0;
  int worst_node = -1;
  std::string worst_tensor;
  std::size_t worst_index = 0;
};

/// Central-difference check of backward() against the forward loss in
/// 64-bit arithmetic: perturbs a seeded subsample of at least
/// `min_samples` learned parameters and compares
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Steps start
/// at 1e-4 and shrink when the secant straddles a ReLU kink; when both
/// sides sit under the finite-difference noise floor (1e-7) the
/// coordinate counts as agreeing, since some parameters (trailing-BN
/// shifts) have exactly-zero gradients that differences cannot resolve.
GradCheckReport gradcheck(const LayerGraph& graph, double tolerance,
                          std::uint64_t seed, const BlockMask* sd_mask = nullptr,
                          std::size_t min_samples = 200);

/// Checkpoint container (little-endian throughout):
///   magic "PYRORCKPT", u32 version,
///   config echo: i32 depth, i32 alpha, u8 variant, f64 p_terminal,
///                i32 num_classes, i32 input channels/height/width,
///   u8 dtype (0 = f32, 1 = f64), u32 node count, then per node id
///   (ascending): i32 id, u16 tensor count, then per tensor name
///   (ascending): u16 name length, name bytes, 4 x i32 dims, raw values.
template <typename T>
void save_checkpoint(const std::string& path, const LayerGraph& graph,
                     const ParamStoreT<T>& params);

/// Parses the config echo without reading parameter data.
ArchConfig read_checkpoint_config(const std::string& path);

/// Loads parameters; the stored config echo must match `graph.config`.
template <typename T>
ParamStoreT<T> load_checkpoint(const std::string& path, const LayerGraph& graph);

}  // namespace pyror
