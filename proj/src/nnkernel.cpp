#include "pyror/nnkernel.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <type_traits>

#include "pyror/analyzer.hpp"
#include "pyror/errors.hpp"
#include "pyror/rng.hpp"

namespace pyror {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;  // running <- 0.9*running + 0.1*batch

bool is_learned(const std::string& name) {
  return name == "weight" || name == "bias" || name == "gamma" || name == "beta";
}

int out_extent(int extent, int kernel, int stride, int padding) {
  return (extent + 2 * padding - kernel) / stride + 1;
}

// Row-major matrix products used by the convolution and linear kernels.
// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[static_cast<std::size_t>(i) * n + j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::size_t>(p) * m;
    const T* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void im2col(const TensorT<T>& x, int sample, int kernel, int stride, int padding,
            int oh, int ow, std::vector<T>& col) {
  const int c = x.c, h = x.h, w = x.w;
  col.assign(static_cast<std::size_t>(c) * kernel * kernel * oh * ow, T(0));
  std::size_t row = 0;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx, ++row) {
        T* dst = col.data() + row * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= h) continue;
          const T* src = &x.at(sample, ci, iy, 0);
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - padding;
            if (ix >= 0 && ix < w) dst[oy * ow + ox] = src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, int sample, int kernel, int stride, int padding,
                int oh, int ow, TensorT<T>& dx) {
  const int c = dx.c, h = dx.h, w = dx.w;
  std::size_t row = 0;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx, ++row) {
        const T* src = col.data() + row * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= h) continue;
          T* dst = &dx.at(sample, ci, iy, 0);
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - padding;
            if (ix >= 0 && ix < w) dst[ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

template <typename T>
TensorT<T> conv_forward(const TensorT<T>& x, const TensorT<T>& weight, int stride,
                        int padding) {
  const int kernel = weight.h;
  const int oh = out_extent(x.h, kernel, stride, padding);
  const int ow = out_extent(x.w, kernel, stride, padding);
  TensorT<T> y(x.n, weight.n, oh, ow);
  std::vector<T> col;
  const int rows = weight.c * kernel * kernel;
  for (int i = 0; i < x.n; ++i) {
    im2col(x, i, kernel, stride, padding, oh, ow, col);
    gemm_nn(weight.n, oh * ow, rows, weight.data.data(), col.data(), &y.at(i, 0, 0, 0));
  }
  return y;
}

template <typename T>
void conv_backward(const TensorT<T>& x, const TensorT<T>& weight, int stride, int padding,
                   const TensorT<T>& dy, TensorT<T>& dx, TensorT<T>& dweight) {
  const int kernel = weight.h;
  const int oh = dy.h, ow = dy.w;
  const int rows = weight.c * kernel * kernel;
  std::vector<T> col;
  std::vector<T> dcol(static_cast<std::size_t>(rows) * oh * ow);
  for (int i = 0; i < x.n; ++i) {
    im2col(x, i, kernel, stride, padding, oh, ow, col);
    gemm_nt(weight.n, rows, oh * ow, &dy.at(i, 0, 0, 0), col.data(), dweight.data.data());
    std::fill(dcol.begin(), dcol.end(), T(0));
    gemm_tn(rows, oh * ow, weight.n, weight.data.data(), &dy.at(i, 0, 0, 0), dcol.data());
    col2im_add(dcol, i, kernel, stride, padding, oh, ow, dx);
  }
}

template <typename T>
TensorT<T> avg_pool_forward(const TensorT<T>& x, int kernel) {
  const int oh = out_extent(x.h, kernel, kernel, 0);
  const int ow = out_extent(x.w, kernel, kernel, 0);
  TensorT<T> y(x.n, x.c, oh, ow);
  const T scale = T(1) / static_cast<T>(kernel * kernel);
  for (int i = 0; i < x.n; ++i)
    for (int j = 0; j < x.c; ++j)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx)
              acc += x.at(i, j, oy * kernel + ky, ox * kernel + kx);
          y.at(i, j, oy, ox) = acc * scale;
        }
  return y;
}

template <typename T>
void avg_pool_backward(const TensorT<T>& dy, int kernel, TensorT<T>& dx) {
  const T scale = T(1) / static_cast<T>(kernel * kernel);
  for (int i = 0; i < dy.n; ++i)
    for (int j = 0; j < dy.c; ++j)
      for (int oy = 0; oy < dy.h; ++oy)
        for (int ox = 0; ox < dy.w; ++ox) {
          const T g = dy.at(i, j, oy, ox) * scale;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx)
              dx.at(i, j, oy * kernel + ky, ox * kernel + kx) += g;
        }
}

}  // namespace

template <typename T>
void ParamStoreT<T>::zero_grads() {
  for (auto& [id, entry] : nodes)
    for (auto& [name, grad] : entry.grads) grad.fill(T(0));
}

template <typename T>
std::size_t ParamStoreT<T>::learned_count() const {
  std::size_t count = 0;
  for (const auto& [id, entry] : nodes)
    for (const auto& [name, grad] : entry.grads) count += grad.size();
  return count;
}

template <typename T>
ParamStoreT<T> init_params(const LayerGraph& graph, std::uint64_t seed) {
  const ShapeMap shapes = infer_shapes(graph);
  const auto& cfg = graph.config.input_shape;
  const Shape network_input{cfg[0], cfg[1], cfg[2]};

  ParamStoreT<T> store;
  for (const LayerNode& node : graph.nodes) {
    const Shape in_shape =
        node.inputs.empty() ? network_input : shapes.at(node.inputs.front());
    auto rng = seeded_rng(seed, static_cast<std::uint64_t>(node.id));

    auto he_fill = [&rng](TensorT<T>& t, int fan_in) {
      const double stddev = std::sqrt(2.0 / fan_in);
      for (T& v : t.data) v = static_cast<T>(next_normal(rng) * stddev);
    };

    typename ParamStoreT<T>::Entry entry;
    if (const auto* conv = std::get_if<ConvSpec>(&node.op)) {
      TensorT<T> w(conv->out_channels, in_shape.channels, conv->kernel, conv->kernel);
      he_fill(w, in_shape.channels * conv->kernel * conv->kernel);
      entry.grads["weight"] = TensorT<T>(w.n, w.c, w.h, w.w);
      entry.tensors["weight"] = std::move(w);
    } else if (const auto* proj = std::get_if<ChannelProjectSpec>(&node.op)) {
      TensorT<T> w(proj->out_channels, in_shape.channels, 1, 1);
      he_fill(w, in_shape.channels);
      entry.grads["weight"] = TensorT<T>(w.n, w.c, w.h, w.w);
      entry.tensors["weight"] = std::move(w);
    } else if (const auto* bn = std::get_if<BatchNormSpec>(&node.op)) {
      TensorT<T> gamma(1, bn->channels, 1, 1), beta(1, bn->channels, 1, 1);
      TensorT<T> mean(1, bn->channels, 1, 1), var(1, bn->channels, 1, 1);
      gamma.fill(T(1));
      var.fill(T(1));
      entry.grads["gamma"] = TensorT<T>(1, bn->channels, 1, 1);
      entry.grads["beta"] = TensorT<T>(1, bn->channels, 1, 1);
      entry.tensors["gamma"] = std::move(gamma);
      entry.tensors["beta"] = std::move(beta);
      entry.tensors["running_mean"] = std::move(mean);
      entry.tensors["running_var"] = std::move(var);
    } else if (const auto* linear = std::get_if<LinearSpec>(&node.op)) {
      TensorT<T> w(linear->out_features, linear->in_features, 1, 1);
      he_fill(w, linear->in_features);
      TensorT<T> b(1, linear->out_features, 1, 1);
      entry.grads["weight"] = TensorT<T>(w.n, w.c, w.h, w.w);
      entry.grads["bias"] = TensorT<T>(1, linear->out_features, 1, 1);
      entry.tensors["weight"] = std::move(w);
      entry.tensors["bias"] = std::move(b);
    } else {
      continue;
    }
    store.nodes.emplace(node.id, std::move(entry));
  }
  return store;
}

namespace {

template <typename T>
struct Executor {
  const LayerGraph& graph;
  ParamStoreT<T>& params;
  const ForwardOptions& options;
  std::unordered_map<int, int> droppable;  // final Add id -> block ordinal

  Executor(const LayerGraph& g, ParamStoreT<T>& p, const ForwardOptions& o)
      : graph(g), params(p), options(o) {
    for (std::size_t i = 0; i < g.final_block_spans.size(); ++i)
      droppable.emplace(g.final_block_spans[i].exit, static_cast<int>(i));
  }

  bool block_dropped(int add_id) const {
    if (!options.sd_mask) return false;
    const auto it = droppable.find(add_id);
    return it != droppable.end() && !(*options.sd_mask)[it->second];
  }

  // Nodes whose values the output actually depends on, honoring dropped
  // blocks: a dropped block's Add reads only its shortcut operand.
  std::vector<int> active_set() const {
    std::vector<int> stack{graph.output_id};
    std::unordered_map<int, char> visited;
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      if (visited.count(id)) continue;
      visited.emplace(id, 1);
      const LayerNode& node = graph.node(id);
      if (std::holds_alternative<AddSpec>(node.op) && block_dropped(id)) {
        stack.push_back(node.inputs.at(1));
      } else {
        for (int input : node.inputs) stack.push_back(input);
      }
    }
    std::vector<int> order;
    order.reserve(visited.size());
    for (const LayerNode& node : graph.nodes)
      if (visited.count(node.id)) order.push_back(node.id);
    return order;
  }

  TensorT<T>& param(int id, const char* name) {
    const auto it = params.nodes.find(id);
    if (it == params.nodes.end() || !it->second.tensors.count(name))
      throw ConfigError("node " + std::to_string(id) + " has no parameter '" + name + "'");
    return it->second.tensors.at(name);
  }

  TensorT<T> bn_forward(int id, const BatchNormSpec& spec, const TensorT<T>& x,
                        ForwardResultT<T>& result) {
    if (x.c != spec.channels)
      throw ShapeError("node " + std::to_string(id) + ": batch_norm channels " +
                           std::to_string(spec.channels) + " vs input " + std::to_string(x.c),
                       id);
    const TensorT<T>& gamma = param(id, "gamma");
    const TensorT<T>& beta = param(id, "beta");
    TensorT<T> y(x.n, x.c, x.h, x.w);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    const std::size_t per_channel = static_cast<std::size_t>(x.n) * plane;

    if (options.mode == Mode::Train) {
      BnBatchStats<T> stats;
      stats.mean.resize(x.c);
      stats.inv_std.resize(x.c);
      TensorT<T>& running_mean = param(id, "running_mean");
      TensorT<T>& running_var = param(id, "running_var");
      for (int j = 0; j < x.c; ++j) {
        double sum = 0.0;
        for (int i = 0; i < x.n; ++i) {
          const T* src = &x.at(i, j, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) sum += src[p];
        }
        const double mean = sum / static_cast<double>(per_channel);
        double sq = 0.0;
        for (int i = 0; i < x.n; ++i) {
          const T* src = &x.at(i, j, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) {
            const double d = src[p] - mean;
            sq += d * d;
          }
        }
        const double var = sq / static_cast<double>(per_channel);
        const double inv_std = 1.0 / std::sqrt(var + kBnEps);
        stats.mean[j] = static_cast<T>(mean);
        stats.inv_std[j] = static_cast<T>(inv_std);
        running_mean.data[j] = static_cast<T>(kBnMomentum * running_mean.data[j] +
                                              (1.0 - kBnMomentum) * mean);
        running_var.data[j] =
            static_cast<T>(kBnMomentum * running_var.data[j] + (1.0 - kBnMomentum) * var);
        const T g = gamma.data[j], b = beta.data[j], m = stats.mean[j], s = stats.inv_std[j];
        for (int i = 0; i < x.n; ++i) {
          const T* src = &x.at(i, j, 0, 0);
          T* dst = &y.at(i, j, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) dst[p] = g * (src[p] - m) * s + b;
        }
      }
      result.bn_stats.emplace(id, std::move(stats));
    } else {
      const TensorT<T>& running_mean = param(id, "running_mean");
      const TensorT<T>& running_var = param(id, "running_var");
      for (int j = 0; j < x.c; ++j) {
        const T m = running_mean.data[j];
        const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data[j]) +
                                                   kBnEps));
        const T g = gamma.data[j], b = beta.data[j];
        for (int i = 0; i < x.n; ++i) {
          const T* src = &x.at(i, j, 0, 0);
          T* dst = &y.at(i, j, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) dst[p] = g * (src[p] - m) * s + b;
        }
      }
    }
    return y;
  }

  TensorT<T> eval_node(const LayerNode& node, const std::vector<const TensorT<T>*>& in,
                       ForwardResultT<T>& result) {
    if (const auto* conv = std::get_if<ConvSpec>(&node.op)) {
      const TensorT<T>& w = param(node.id, "weight");
      if (in[0]->c != w.c)
        throw ShapeError("node " + std::to_string(node.id) + ": conv expects " +
                             std::to_string(w.c) + " channels, got " + std::to_string(in[0]->c),
                         node.id);
      return conv_forward(*in[0], w, conv->stride, conv->padding);
    }
    if (const auto* proj = std::get_if<ChannelProjectSpec>(&node.op)) {
      return conv_forward(*in[0], param(node.id, "weight"), proj->stride, 0);
    }
    if (const auto* bn = std::get_if<BatchNormSpec>(&node.op)) {
      return bn_forward(node.id, *bn, *in[0], result);
    }
    if (std::holds_alternative<ReluSpec>(node.op)) {
      TensorT<T> y = *in[0];
      for (T& v : y.data) v = v > T(0) ? v : T(0);
      return y;
    }
    if (std::holds_alternative<AddSpec>(node.op)) {
      if (block_dropped(node.id)) return *in[1];  // shortcut only
      for (std::size_t i = 1; i < in.size(); ++i) {
        if (!in[i]->same_dims(*in[0]))
          throw ShapeError("node " + std::to_string(node.id) + ": add operand dims disagree",
                           node.id);
      }
      TensorT<T> y = *in[0];
      T trunk_scale = T(1);
      if (options.sd_probs) {
        const auto it = droppable.find(node.id);
        if (it != droppable.end())
          trunk_scale = static_cast<T>(options.sd_probs->probs[it->second]);
      }
      if (trunk_scale != T(1))
        for (T& v : y.data) v *= trunk_scale;
      for (std::size_t i = 1; i < in.size(); ++i) {
        const TensorT<T>& other = *in[i];
        for (std::size_t p = 0; p < y.data.size(); ++p) y.data[p] += other.data[p];
      }
      return y;
    }
    if (const auto* pool = std::get_if<AvgPoolSpec>(&node.op)) {
      return avg_pool_forward(*in[0], pool->kernel);
    }
    if (std::holds_alternative<GlobalAvgPoolSpec>(node.op)) {
      const TensorT<T>& x = *in[0];
      TensorT<T> y(x.n, x.c, 1, 1);
      const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
      for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j) {
          T acc = T(0);
          const T* src = &x.at(i, j, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) acc += src[p];
          y.at(i, j, 0, 0) = acc / static_cast<T>(plane);
        }
      return y;
    }
    if (const auto* linear = std::get_if<LinearSpec>(&node.op)) {
      const TensorT<T>& x = *in[0];
      const int features = x.c * x.h * x.w;
      if (features != linear->in_features)
        throw ShapeError("node " + std::to_string(node.id) + ": linear expects " +
                             std::to_string(linear->in_features) + " features, got " +
                             std::to_string(features),
                         node.id);
      const TensorT<T>& w = param(node.id, "weight");
      const TensorT<T>& b = param(node.id, "bias");
      TensorT<T> y(x.n, linear->out_features, 1, 1);
      for (int i = 0; i < x.n; ++i) {
        const T* row = &x.at(i, 0, 0, 0);
        for (int o = 0; o < linear->out_features; ++o) {
          const T* wrow = &w.at(o, 0, 0, 0);
          T acc = b.data[o];
          for (int f = 0; f < features; ++f) acc += wrow[f] * row[f];
          y.at(i, o, 0, 0) = acc;
        }
      }
      return y;
    }
    if (const auto* pad = std::get_if<ZeroPadChannelsSpec>(&node.op)) {
      const TensorT<T>& x = *in[0];
      TensorT<T> y(x.n, x.c + pad->extra, x.h, x.w);
      const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
      for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j)
          std::memcpy(&y.at(i, j, 0, 0), &x.at(i, j, 0, 0), plane * sizeof(T));
      return y;
    }
    if (std::holds_alternative<IdentitySpec>(node.op)) {
      return *in[0];
    }
    throw std::logic_error("unhandled node kind in forward");
  }
};

}  // namespace

template <typename T>
ForwardResultT<T> forward(const LayerGraph& graph, ParamStoreT<T>& params,
                          const TensorT<T>& input, const ForwardOptions& options) {
  if (options.sd_mask) {
    if (options.mode != Mode::Train)
      throw ConfigError("stochastic-depth masks apply to train mode only");
    if (static_cast<int>(options.sd_mask->size()) != graph.final_block_count())
      throw ConfigError("mask length " + std::to_string(options.sd_mask->size()) +
                        " != final block count " + std::to_string(graph.final_block_count()));
  }
  if (options.sd_probs) {
    if (options.mode != Mode::Eval)
      throw ConfigError("survival-probability scaling applies to eval mode only");
    if (options.sd_probs->size() != graph.final_block_count())
      throw ConfigError("schedule length " + std::to_string(options.sd_probs->size()) +
                        " != final block count " + std::to_string(graph.final_block_count()));
  }

  Executor<T> exec(graph, params, options);
  ForwardResultT<T> result;
  result.mode = options.mode;
  result.input = input;
  if (options.sd_mask) result.mask = *options.sd_mask;
  result.active = exec.active_set();

  for (int id : result.active) {
    const LayerNode& node = graph.node(id);
    std::vector<const TensorT<T>*> in;
    if (node.inputs.empty()) {
      in.push_back(&result.input);
    } else if (std::holds_alternative<AddSpec>(node.op) && exec.block_dropped(id)) {
      in.push_back(nullptr);  // trunk operand intentionally absent
      in.push_back(&result.outputs.at(node.inputs.at(1)));
    } else {
      for (int input_id : node.inputs) in.push_back(&result.outputs.at(input_id));
    }
    TensorT<T> out = exec.eval_node(node, in, result);
    if (options.debug_checks && !all_finite(out))
      throw NumericalError("non-finite values in node " + std::to_string(id) + " (" +
                           op_name(node.op) + ")");
    result.outputs.emplace(id, std::move(out));
  }
  result.logits = result.outputs.at(graph.output_id);
  return result;
}

template <typename T>
TensorT<T> backward(const LayerGraph& graph, ParamStoreT<T>& params,
                    const ForwardResultT<T>& cache, const TensorT<T>& grad_logits) {
  if (cache.mode != Mode::Train)
    throw ConfigError("backward requires a train-mode forward cache");
  if (!grad_logits.same_dims(cache.outputs.at(graph.output_id)))
    throw ShapeError("grad_logits dims do not match the cached logits", graph.output_id);

  params.zero_grads();

  std::unordered_map<int, int> droppable;
  for (std::size_t i = 0; i < graph.final_block_spans.size(); ++i)
    droppable.emplace(graph.final_block_spans[i].exit, static_cast<int>(i));
  auto dropped = [&](int add_id) {
    if (cache.mask.empty()) return false;
    const auto it = droppable.find(add_id);
    return it != droppable.end() && !cache.mask[it->second];
  };

  std::unordered_map<int, TensorT<T>> grads;
  auto accumulate = [&grads](int id, TensorT<T>&& g) {
    const auto it = grads.find(id);
    if (it == grads.end()) {
      grads.emplace(id, std::move(g));
    } else {
      for (std::size_t p = 0; p < g.data.size(); ++p) it->second.data[p] += g.data[p];
    }
  };
  auto accumulate_ref = [&grads](int id, const TensorT<T>& g) {
    const auto it = grads.find(id);
    if (it == grads.end()) {
      grads.emplace(id, g);
    } else {
      for (std::size_t p = 0; p < g.data.size(); ++p) it->second.data[p] += g.data[p];
    }
  };

  grads.emplace(graph.output_id, grad_logits);
  TensorT<T> input_grad(cache.input.n, cache.input.c, cache.input.h, cache.input.w);

  for (auto it = cache.active.rbegin(); it != cache.active.rend(); ++it) {
    const int id = *it;
    const LayerNode& node = graph.node(id);
    const auto grad_it = grads.find(id);
    if (grad_it == grads.end()) continue;  // value unused downstream
    TensorT<T> dy = std::move(grad_it->second);
    grads.erase(grad_it);

    auto input_tensor = [&](int slot) -> const TensorT<T>& {
      return node.inputs.empty() ? cache.input : cache.outputs.at(node.inputs.at(slot));
    };
    auto push_input_grad = [&](int slot, TensorT<T>&& g) {
      if (node.inputs.empty()) {
        for (std::size_t p = 0; p < g.data.size(); ++p) input_grad.data[p] += g.data[p];
      } else {
        accumulate(node.inputs.at(slot), std::move(g));
      }
    };

    if (const auto* conv = std::get_if<ConvSpec>(&node.op)) {
      const TensorT<T>& x = input_tensor(0);
      const TensorT<T>& w = params.nodes.at(id).tensors.at("weight");
      TensorT<T> dx(x.n, x.c, x.h, x.w);
      conv_backward(x, w, conv->stride, conv->padding, dy, dx,
                    params.nodes.at(id).grads.at("weight"));
      push_input_grad(0, std::move(dx));
    } else if (const auto* proj = std::get_if<ChannelProjectSpec>(&node.op)) {
      const TensorT<T>& x = input_tensor(0);
      const TensorT<T>& w = params.nodes.at(id).tensors.at("weight");
      TensorT<T> dx(x.n, x.c, x.h, x.w);
      conv_backward(x, w, proj->stride, 0, dy, dx, params.nodes.at(id).grads.at("weight"));
      push_input_grad(0, std::move(dx));
    } else if (std::holds_alternative<BatchNormSpec>(node.op)) {
      const TensorT<T>& x = input_tensor(0);
      const BnBatchStats<T>& stats = cache.bn_stats.at(id);
      auto& entry = params.nodes.at(id);
      const TensorT<T>& gamma = entry.tensors.at("gamma");
      TensorT<T>& dgamma = entry.grads.at("gamma");
      TensorT<T>& dbeta = entry.grads.at("beta");
      TensorT<T> dx(x.n, x.c, x.h, x.w);
      const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
      const double count = static_cast<double>(x.n) * plane;
      for (int j = 0; j < x.c; ++j) {
        const T m = stats.mean[j], s = stats.inv_std[j], g = gamma.data[j];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int i = 0; i < x.n; ++i) {
          const T* xs = &x.at(i, j, 0, 0);
          const T* ds = &dy.at(i, j, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) {
            const double xhat = (xs[p] - m) * s;
            sum_dy += ds[p];
            sum_dy_xhat += ds[p] * xhat;
          }
        }
        dgamma.data[j] += static_cast<T>(sum_dy_xhat);
        dbeta.data[j] += static_cast<T>(sum_dy);
        // dx = gamma*s/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
        const double k = static_cast<double>(g) * s / count;
        for (int i = 0; i < x.n; ++i) {
          const T* xs = &x.at(i, j, 0, 0);
          const T* ds = &dy.at(i, j, 0, 0);
          T* dd = &dx.at(i, j, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) {
            const double xhat = (xs[p] - m) * s;
            dd[p] = static_cast<T>(k * (count * ds[p] - sum_dy - xhat * sum_dy_xhat));
          }
        }
      }
      push_input_grad(0, std::move(dx));
    } else if (std::holds_alternative<ReluSpec>(node.op)) {
      const TensorT<T>& x = input_tensor(0);
      TensorT<T> dx(x.n, x.c, x.h, x.w);
      for (std::size_t p = 0; p < x.data.size(); ++p)
        dx.data[p] = x.data[p] > T(0) ? dy.data[p] : T(0);
      push_input_grad(0, std::move(dx));
    } else if (std::holds_alternative<AddSpec>(node.op)) {
      if (dropped(id)) {
        accumulate(node.inputs.at(1), std::move(dy));
      } else {
        for (std::size_t slot = 0; slot + 1 < node.inputs.size(); ++slot)
          accumulate_ref(node.inputs[slot], dy);
        accumulate(node.inputs.back(), std::move(dy));
      }
    } else if (const auto* pool = std::get_if<AvgPoolSpec>(&node.op)) {
      const TensorT<T>& x = input_tensor(0);
      TensorT<T> dx(x.n, x.c, x.h, x.w);
      avg_pool_backward(dy, pool->kernel, dx);
      push_input_grad(0, std::move(dx));
    } else if (std::holds_alternative<GlobalAvgPoolSpec>(node.op)) {
      const TensorT<T>& x = input_tensor(0);
      TensorT<T> dx(x.n, x.c, x.h, x.w);
      const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
      const T scale = T(1) / static_cast<T>(plane);
      for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j) {
          const T g = dy.at(i, j, 0, 0) * scale;
          T* dst = &dx.at(i, j, 0, 0);
          for (std::size_t p = 0; p < plane; ++p) dst[p] = g;
        }
      push_input_grad(0, std::move(dx));
    } else if (const auto* linear = std::get_if<LinearSpec>(&node.op)) {
      const TensorT<T>& x = input_tensor(0);
      auto& entry = params.nodes.at(id);
      const TensorT<T>& w = entry.tensors.at("weight");
      TensorT<T>& dw = entry.grads.at("weight");
      TensorT<T>& db = entry.grads.at("bias");
      const int features = linear->in_features;
      TensorT<T> dx(x.n, x.c, x.h, x.w);
      for (int i = 0; i < x.n; ++i) {
        const T* row = &x.at(i, 0, 0, 0);
        T* drow = &dx.at(i, 0, 0, 0);
        for (int o = 0; o < linear->out_features; ++o) {
          const T g = dy.at(i, o, 0, 0);
          db.data[o] += g;
          const T* wrow = &w.at(o, 0, 0, 0);
          T* dwrow = &dw.at(o, 0, 0, 0);
          for (int f = 0; f < features; ++f) {
            dwrow[f] += g * row[f];
            drow[f] += g * wrow[f];
          }
        }
      }
      push_input_grad(0, std::move(dx));
    } else if (const auto* pad = std::get_if<ZeroPadChannelsSpec>(&node.op)) {
      const TensorT<T>& x = input_tensor(0);
      TensorT<T> dx(x.n, x.c, x.h, x.w);
      const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
      for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j)
          std::memcpy(&dx.at(i, j, 0, 0), &dy.at(i, j, 0, 0), plane * sizeof(T));
      (void)pad;
      push_input_grad(0, std::move(dx));
    } else if (std::holds_alternative<IdentitySpec>(node.op)) {
      push_input_grad(0, std::move(dy));
    } else {
      throw std::logic_error("unhandled node kind in backward");
    }
  }
  return input_grad;
}

template <typename T>
SoftmaxCeResult<T> softmax_cross_entropy(const TensorT<T>& logits,
                                         const std::vector<int>& labels) {
  if (static_cast<std::size_t>(logits.n) != labels.size())
    throw ConfigError("labels count != batch size");
  const int classes = logits.c;
  SoftmaxCeResult<T> result;
  result.grad_logits = TensorT<T>(logits.n, classes, 1, 1);
  result.predictions.resize(logits.n);

  double loss = 0.0;
  for (int i = 0; i < logits.n; ++i) {
    const int label = labels[i];
    if (label < 0 || label >= classes) throw ConfigError("label out of range");
    const T* row = &logits.at(i, 0, 0, 0);
    T max_logit = row[0];
    int argmax = 0;
    for (int j = 1; j < classes; ++j)
      if (row[j] > max_logit) {
        max_logit = row[j];
        argmax = j;
      }
    result.predictions[i] = argmax;
    double denom = 0.0;
    for (int j = 0; j < classes; ++j) denom += std::exp(static_cast<double>(row[j] - max_logit));
    const double log_denom = std::log(denom);
    loss -= static_cast<double>(row[label] - max_logit) - log_denom;
    for (int j = 0; j < classes; ++j) {
      const double p = std::exp(static_cast<double>(row[j] - max_logit)) / denom;
      result.grad_logits.at(i, j, 0, 0) =
          static_cast<T>((p - (j == label ? 1.0 : 0.0)) / logits.n);
    }
  }
  result.loss = loss / logits.n;
  return result;
}

GradCheckReport gradcheck(const LayerGraph& graph, double tolerance, std::uint64_t seed,
                          const BlockMask* sd_mask, std::size_t min_samples) {
  ParamStoreD params = init_params<double>(graph, seed);

  const auto& shape = graph.config.input_shape;
  TensorD input(2, shape[0], shape[1], shape[2]);
  auto rng = seeded_rng(seed, 0x1A2Bull);
  for (double& v : input.data) v = 0.5 * next_normal(rng);
  std::vector<int> labels(input.n);
  for (int& l : labels) l = static_cast<int>(rng() % graph.config.num_classes);

  ForwardOptions options;
  options.mode = Mode::Train;
  options.sd_mask = sd_mask;

  auto loss_at = [&](ParamStoreD& p) {
    ForwardResultT<double> cache = forward(graph, p, input, options);
    return softmax_cross_entropy(cache.logits, labels).loss;
  };

  ForwardResultT<double> cache = forward(graph, params, input, options);
  const auto ce = softmax_cross_entropy(cache.logits, labels);
  backward(graph, params, cache, ce.grad_logits);

  // Seeded subsample spread across every learned tensor.
  struct Coordinate {
    int node;
    std::string name;
    std::size_t index;
  };
  std::vector<Coordinate> coords;
  const std::size_t total = params.learned_count();
  auto pick_rng = seeded_rng(seed, 0xC00Dull);
  for (const auto& [id, entry] : params.nodes) {
    for (const auto& [name, grad] : entry.grads) {
      const std::size_t want = std::max<std::size_t>(
          1, (min_samples * grad.size() + total - 1) / total);
      for (std::size_t s = 0; s < std::min(want, grad.size()); ++s)
        coords.push_back({id, name, pick_rng() % grad.size()});
    }
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  report.checked = coords.size();

  // ReLU kinks sit exactly at the batch-norm output mean, so a fixed step
  // occasionally straddles one; refine with smaller steps before believing a
  // discrepancy. A wrong analytic gradient disagrees at every step size.
  constexpr std::array<double, 3> kSteps = {1e-4, 1e-5, 1e-6};
  for (const Coordinate& coord : coords) {
    const double analytic = params.nodes.at(coord.node).grads.at(coord.name).data[coord.index];
    ParamStoreD probe = params;
    double& value = probe.nodes.at(coord.node).tensors.at(coord.name).data[coord.index];
    const double original = value;
    double rel = std::numeric_limits<double>::infinity();
    for (const double step : kSteps) {
      value = original + step;
      const double loss_plus = loss_at(probe);
      value = original - step;
      const double loss_minus = loss_at(probe);
      const double numeric = (loss_plus - loss_minus) / (2.0 * step);
      // Below ~1e-7 the quotient is rounding noise in the loss, not a
      // derivative: treat an analytic zero against noise as agreement.
      // (Trailing-BN betas really do have exactly-zero gradients here:
      // every path to the loss re-enters a batch norm, which absorbs
      // constant per-channel shifts.)
      if (std::abs(analytic) < 1e-7 && std::abs(numeric) < 1e-7) {
        rel = 0.0;
      } else {
        rel = std::min(rel, std::abs(analytic - numeric) /
                                std::max({std::abs(analytic), std::abs(numeric), 1e-8}));
      }
      if (rel < tolerance * 1e-2) break;
    }
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_node = coord.node;
      report.worst_tensor = coord.name;
      report.worst_index = coord.index;
    }
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[9] = {'P', 'Y', 'R', 'O', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ostream& out, const void* data, std::size_t size) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

template <typename Int>
void write_le(std::ostream& out, Int value) {
  unsigned char bytes[sizeof(Int)];
  using U = std::make_unsigned_t<Int>;
  U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(Int); ++i) bytes[i] = static_cast<unsigned char>(u >> (8 * i));
  write_bytes(out, bytes, sizeof(Int));
}

void write_f64(std::ostream& out, double value) {
  write_le(out, std::bit_cast<std::uint64_t>(value));
}

template <typename Int>
Int read_le(std::istream& in) {
  unsigned char bytes[sizeof(Int)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(Int));
  if (!in) throw IoError("checkpoint truncated");
  using U = std::make_unsigned_t<Int>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(Int); ++i) u |= static_cast<U>(bytes[i]) << (8 * i);
  return static_cast<Int>(u);
}

double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

template <typename T>
void write_values(std::ostream& out, const std::vector<T>& values) {
  if constexpr (sizeof(T) == 4) {
    for (T v : values) write_le(out, std::bit_cast<std::uint32_t>(v));
  } else {
    for (T v : values) write_le(out, std::bit_cast<std::uint64_t>(v));
  }
}

template <typename T>
void read_values(std::istream& in, std::vector<T>& values) {
  if constexpr (sizeof(T) == 4) {
    for (T& v : values) v = std::bit_cast<T>(read_le<std::uint32_t>(in));
  } else {
    for (T& v : values) v = std::bit_cast<T>(read_le<std::uint64_t>(in));
  }
}

void write_config_echo(std::ostream& out, const ArchConfig& config) {
  write_le<std::int32_t>(out, config.depth);
  write_le<std::int32_t>(out, config.alpha);
  write_le<std::uint8_t>(out, config.block_variant == BlockVariant::PreAct ? 0 : 1);
  write_f64(out, config.p_terminal);
  write_le<std::int32_t>(out, config.num_classes);
  for (int d : config.input_shape) write_le<std::int32_t>(out, d);
}

ArchConfig read_config_echo(std::istream& in) {
  ArchConfig config;
  config.depth = read_le<std::int32_t>(in);
  config.alpha = read_le<std::int32_t>(in);
  config.block_variant =
      read_le<std::uint8_t>(in) == 0 ? BlockVariant::PreAct : BlockVariant::PyramidBN;
  config.p_terminal = read_f64(in);
  config.num_classes = read_le<std::int32_t>(in);
  for (int i = 0; i < 3; ++i) config.input_shape[i] = read_le<std::int32_t>(in);
  return config;
}

void check_header(std::istream& in, const std::string& path) {
  char magic[9];
  in.read(magic, 9);
  if (!in || std::memcmp(magic, kMagic, 9) != 0)
    throw IoError("not a checkpoint file: " + path);
  const std::uint32_t version = read_le<std::uint32_t>(in);
  if (version != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const LayerGraph& graph,
                     const ParamStoreT<T>& params) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open for writing: " + path);

  write_bytes(file, kMagic, 9);
  write_le(file, kVersion);
  write_config_echo(file, graph.config);
  write_le<std::uint8_t>(file, sizeof(T) == 4 ? 0 : 1);
  write_le<std::uint32_t>(file, static_cast<std::uint32_t>(params.nodes.size()));
  for (const auto& [id, entry] : params.nodes) {
    write_le<std::int32_t>(file, id);
    write_le<std::uint16_t>(file, static_cast<std::uint16_t>(entry.tensors.size()));
    for (const auto& [name, tensor] : entry.tensors) {
      write_le<std::uint16_t>(file, static_cast<std::uint16_t>(name.size()));
      write_bytes(file, name.data(), name.size());
      write_le<std::int32_t>(file, tensor.n);
      write_le<std::int32_t>(file, tensor.c);
      write_le<std::int32_t>(file, tensor.h);
      write_le<std::int32_t>(file, tensor.w);
      write_values(file, tensor.data);
    }
  }
  if (!file) throw IoError("write failed: " + path);
}

ArchConfig read_checkpoint_config(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open: " + path);
  check_header(file, path);
  return read_config_echo(file);
}

template <typename T>
ParamStoreT<T> load_checkpoint(const std::string& path, const LayerGraph& graph) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open: " + path);
  check_header(file, path);
  const ArchConfig echo = read_config_echo(file);
  const ArchConfig& expect = graph.config;
  if (echo.depth != expect.depth || echo.alpha != expect.alpha ||
      echo.block_variant != expect.block_variant || echo.p_terminal != expect.p_terminal ||
      echo.num_classes != expect.num_classes || echo.input_shape != expect.input_shape)
    throw IoError("checkpoint config echo does not match the graph: " + path);

  const std::uint8_t dtype = read_le<std::uint8_t>(file);
  if (dtype != (sizeof(T) == 4 ? 0 : 1))
    throw IoError("checkpoint element type does not match the requested precision");

  ParamStoreT<T> store;
  const std::uint32_t node_count = read_le<std::uint32_t>(file);
  for (std::uint32_t ni = 0; ni < node_count; ++ni) {
    const int id = read_le<std::int32_t>(file);
    const std::uint16_t tensor_count = read_le<std::uint16_t>(file);
    typename ParamStoreT<T>::Entry entry;
    for (std::uint16_t ti = 0; ti < tensor_count; ++ti) {
      const std::uint16_t name_len = read_le<std::uint16_t>(file);
      std::string name(name_len, '\0');
      file.read(name.data(), name_len);
      if (!file) throw IoError("checkpoint truncated");
      TensorT<T> tensor;
      tensor.n = read_le<std::int32_t>(file);
      tensor.c = read_le<std::int32_t>(file);
      tensor.h = read_le<std::int32_t>(file);
      tensor.w = read_le<std::int32_t>(file);
      if (tensor.n < 0 || tensor.c < 0 || tensor.h < 0 || tensor.w < 0)
        throw IoError("checkpoint has negative tensor dims");
      tensor.data.resize(static_cast<std::size_t>(tensor.n) * tensor.c * tensor.h * tensor.w);
      read_values(file, tensor.data);
      if (is_learned(name))
        entry.grads.emplace(name, TensorT<T>(tensor.n, tensor.c, tensor.h, tensor.w));
      entry.tensors.emplace(std::move(name), std::move(tensor));
    }
    store.nodes.emplace(id, std::move(entry));
  }
  return store;
}

template struct ParamStoreT<float>;
template struct ParamStoreT<double>;
template ParamStoreT<float> init_params<float>(const LayerGraph&, std::uint64_t);
template ParamStoreT<double> init_params<double>(const LayerGraph&, std::uint64_t);
template ForwardResultT<float> forward<float>(const LayerGraph&, ParamStoreT<float>&,
                                              const TensorT<float>&, const ForwardOptions&);
template ForwardResultT<double> forward<double>(const LayerGraph&, ParamStoreT<double>&,
                                                const TensorT<double>&, const ForwardOptions&);
template TensorT<float> backward<float>(const LayerGraph&, ParamStoreT<float>&,
                                        const ForwardResultT<float>&, const TensorT<float>&);
template TensorT<double> backward<double>(const LayerGraph&, ParamStoreT<double>&,
                                          const ForwardResultT<double>&, const TensorT<double>&);
template SoftmaxCeResult<float> softmax_cross_entropy<float>(const TensorT<float>&,
                                                             const std::vector<int>&);
template SoftmaxCeResult<double> softmax_cross_entropy<double>(const TensorT<double>&,
                                                               const std::vector<int>&);
template void save_checkpoint<float>(const std::string&, const LayerGraph&,
                                     const ParamStoreT<float>&);
template void save_checkpoint<double>(const std::string&, const LayerGraph&,
                                      const ParamStoreT<double>&);
template ParamStoreT<float> load_checkpoint<float>(const std::string&, const LayerGraph&);
template ParamStoreT<double> load_checkpoint<double>(const std::string&, const LayerGraph&);

}  // namespace pyror
