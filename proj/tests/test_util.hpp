#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pyror/graph.hpp"
#include "pyror/nnkernel.hpp"
#include "pyror/rng.hpp"
#include "pyror/tensor.hpp"

namespace pyror::testutil {

// Reference convolution: six explicit loops, nothing shared with the
// library's im2col path.
template <typename T>
TensorT<T> naive_conv(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad) {
  const int oh = (x.h + 2 * pad - w.h) / stride + 1;
  const int ow = (x.w + 2 * pad - w.w) / stride + 1;
  TensorT<T> out(x.n, w.n, oh, ow);
  for (int n = 0; n < x.n; ++n)
    for (int oc = 0; oc < w.n; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (int ic = 0; ic < x.c; ++ic)
            for (int ky = 0; ky < w.h; ++ky)
              for (int kx = 0; kx < w.w; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                acc += x.at(n, ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
          out.at(n, oc, oy, ox) = acc;
        }
  return out;
}

template <typename T>
void fill_uniform(TensorT<T>& t, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.data) v = static_cast<T>(lo + (hi - lo) * next_uniform(rng));
}

template <typename T>
double max_abs(const TensorT<T>& t) {
  double m = 0.0;
  for (T v : t.data) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_dims(b)) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

// Minimal graph straight from node lists; config defaults are irrelevant to
// the kernels, only input_shape matters.
inline LayerGraph make_hand_graph(std::vector<LayerNode> nodes, std::array<int, 3> input_shape,
                                  int num_classes = 10) {
  LayerGraph g;
  g.config.input_shape = input_shape;
  g.config.num_classes = num_classes;
  g.nodes = std::move(nodes);
  g.input_id = 0;
  g.output_id = static_cast<int>(g.nodes.size()) - 1;
  return g;
}

// Runs the library conv on explicit inputs via a one-node graph.
template <typename T>
TensorT<T> lib_conv(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad) {
  LayerGraph g = make_hand_graph({LayerNode{0, ConvSpec{w.n, w.h, stride, pad}, {}}},
                                 {x.c, x.h, x.w});
  ParamStoreT<T> params;
  params.nodes[0].tensors["weight"] = w;
  ForwardOptions options;
  options.mode = Mode::Eval;
  return forward(g, params, x, options).logits;
}

inline std::string temp_path(const std::string& name) {
  static std::uint64_t counter = 0;
  const auto dir = std::filesystem::temp_directory_path() / "pyror_tests";
  std::filesystem::create_directories(dir);
  return (dir / (std::to_string(++counter) + "_" + name)).string();
}

}  // namespace pyror::testutil
