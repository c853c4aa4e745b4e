#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "ptg/errors.hpp"
#include "ptg/tensor.hpp"

namespace ptg {

/// Records the backward closures of one forward pass, in execution order.
///
/// A tape belongs to exactly one forward pass. Ops append a closure when any
/// operand requires a gradient; backward() replays them in reverse and then
/// empties the tape. An inference tape records nothing.
template <class T>
class Tape {
 public:
  enum class Mode { record, inference };

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == Mode::record; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// True when an op over these operands must be taped.
  template <class... Ts>
  bool tracks(const Ts&... operands) const {
    return recording() && (operands.requires_grad() || ...);
  }

  void push(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  void backward(Tensor<T> loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_string(loss.shape()));
    if (!loss.requires_grad()) {
      clear();
      return;
    }
    loss.grad_buffer()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    clear();
  }

  void clear() { nodes_.clear(); }

 private:
  Mode mode_;
  std::vector<std::function<void()>> nodes_;
};

}  // namespace ptg
