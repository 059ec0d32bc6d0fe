#pragma once

// Parameter initialization: uniform +/- sqrt(6 / (fan_in + fan_out)) for
// affine and convolution kernels; normalization layers start at identity;
// LSTM forget-gate biases start at 1.

#include <cmath>
#include <cstddef>

#include "stnet/rng.hpp"
#include "stnet/tensor.hpp"

namespace stnet {

template <typename T>
Tensor<T> uniform_fan_init(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

// LSTM bias layout is [4H] with gate order i, f, g, o; the forget block is 1.
template <typename T>
Tensor<T> lstm_bias_init(std::size_t hidden) {
  Tensor<T> b({4 * hidden});
  for (std::size_t i = hidden; i < 2 * hidden; ++i) b.data[i] = T(1);
  return b;
}

}  // namespace stnet
