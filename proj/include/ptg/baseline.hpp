#pragma once

#include <cstdint>
#include <vector>

#include "ptg/layers.hpp"
#include "ptg/parameters.hpp"

namespace ptg {

/// Small residual restorer: restored = degraded + tail(body(head(degraded))).
/// The tail is zero-initialised, so a fresh network is the identity.
template <class T>
class BaselineRestorer {
 public:
  explicit BaselineRestorer(std::uint64_t seed = 0, std::size_t width = 16, std::size_t blocks = 3) {
    ParamFactory<T> f(params_, seed, "baseline.");
    head_ = Conv2d<T>::make(f, "head", 3, 3, width);
    for (std::size_t b = 0; b < blocks; ++b)
      blocks_.push_back(Conv2d<T>::make(f, "block" + std::to_string(b), 3, width, width));
    tail_ = Conv2d<T>::constant(f, "tail", 3, width, 3, T(0));
  }

  ParameterTree<T>& parameters() { return params_; }
  const ParameterTree<T>& parameters() const { return params_; }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& degraded) const {
    auto x = silu(tape, head_(tape, degraded));
    for (const auto& block : blocks_) x = add(tape, x, silu(tape, block(tape, x)));
    return add(tape, degraded, tail_(tape, x));
  }

 private:
  ParameterTree<T> params_;
  Conv2d<T> head_;
  std::vector<Conv2d<T>> blocks_;
  Conv2d<T> tail_;
};

}  // namespace ptg
