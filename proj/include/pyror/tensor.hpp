#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace pyror {

/// Dense rank-4 array in batch x channel x height x width layout.
/// Parameter tensors reuse the same layout (e.g. conv kernels are
/// out x in x kh x kw, per-channel vectors are 1 x c x 1 x 1).
template <typename T>
struct TensorT {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  TensorT() = default;
  TensorT(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

  std::size_t size() const { return data.size(); }

  std::size_t index(int i, int j, int y, int x) const {
    return ((static_cast<std::size_t>(i) * c + j) * h + y) * w + x;
  }

  T& at(int i, int j, int y, int x) { return data[index(i, j, y, x)]; }
  const T& at(int i, int j, int y, int x) const { return data[index(i, j, y, x)]; }

  bool same_dims(const TensorT& other) const {
    return n == other.n && c == other.c && h == other.h && w == other.w;
  }

  void fill(T value) { data.assign(data.size(), value); }

  bool operator==(const TensorT&) const = default;

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(n, c, h, w);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
bool all_finite(const TensorT<T>& t) {
  for (T v : t.data) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

}  // namespace pyror
