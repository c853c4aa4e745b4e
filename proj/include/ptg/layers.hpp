#pragma once

#include <cmath>
#include <string>

#include "ptg/ops.hpp"
#include "ptg/parameters.hpp"

namespace ptg {

template <class T>
struct Linear {
  Tensor<T> weight;  // (d_in, d_out)
  Tensor<T> bias;    // (d_out)

  static Linear make(ParamFactory<T>& f, const std::string& name, std::size_t d_in,
                     std::size_t d_out) {
    return {f.uniform(name + ".weight", {d_in, d_out}, d_in),
            f.uniform(name + ".bias", {d_out}, d_in)};
  }

  static Linear zeros(ParamFactory<T>& f, const std::string& name, std::size_t d_in,
                      std::size_t d_out) {
    return {f.constant(name + ".weight", {d_in, d_out}, T(0)),
            f.constant(name + ".bias", {d_out}, T(0))};
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const { return linear(tape, x, weight, bias); }
};

/// Square-kernel convolution with "same" padding (k / 2).
template <class T>
struct Conv2d {
  Tensor<T> weight;  // (k, k, c_in, c_out)
  Tensor<T> bias;    // (c_out)
  std::size_t stride = 1;

  static Conv2d make(ParamFactory<T>& f, const std::string& name, std::size_t k,
                     std::size_t c_in, std::size_t c_out, std::size_t stride = 1) {
    const std::size_t fan_in = k * k * c_in;
    return {f.uniform(name + ".weight", {k, k, c_in, c_out}, fan_in),
            f.uniform(name + ".bias", {c_out}, fan_in), stride};
  }

  /// Zero weights, constant bias.
  static Conv2d constant(ParamFactory<T>& f, const std::string& name, std::size_t k,
                         std::size_t c_in, std::size_t c_out, T bias_value) {
    return {f.constant(name + ".weight", {k, k, c_in, c_out}, T(0)),
            f.constant(name + ".bias", {c_out}, bias_value), 1};
  }

  std::size_t kernel() const { return weight.dim(0); }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return conv2d(tape, x, weight, bias, stride, kernel() / 2);
  }
};

/// Single-head self-attention over n tokens of width d with a residual:
///   out = x + softmax(Q K^T / sqrt(d)) V W_o + b_o
template <class T>
struct SelfAttention {
  Linear<T> query, key, value, output;

  struct Result {
    Tensor<T> out;
    Tensor<T> weights;  // (n, n) softmax matrix
  };

  static SelfAttention make(ParamFactory<T>& f, const std::string& name, std::size_t d) {
    return {Linear<T>::make(f, name + ".query", d, d), Linear<T>::make(f, name + ".key", d, d),
            Linear<T>::make(f, name + ".value", d, d), Linear<T>::make(f, name + ".output", d, d)};
  }

  Result forward(Tape<T>& tape, const Tensor<T>& x) const {
    detail::expect_rank(x.shape(), 2, "self_attention", "input");
    const std::size_t d = x.dim(1);
    detail::expect(query.weight.dim(0) == d, "self_attention: token width " + std::to_string(d) +
                                                 " differs from projection width " +
                                                 std::to_string(query.weight.dim(0)));
    auto q = query(tape, x);
    auto k = key(tape, x);
    auto v = value(tape, x);
    auto scores = scalar_mul(tape, matmul_nt(tape, q, k), T(1) / std::sqrt(static_cast<T>(d)));
    auto weights = softmax_rows(tape, scores);
    auto mixed = output(tape, matmul(tape, weights, v));
    return {add(tape, x, mixed), weights};
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const { return forward(tape, x).out; }
};

}  // namespace ptg
