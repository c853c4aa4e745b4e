#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ptg/errors.hpp"
#include "ptg/random.hpp"
#include "ptg/tensor.hpp"

namespace ptg {

/// Ordered name -> tensor map of every trainable tensor of a model. Entries
/// share storage with the layers that use them.
template <class T>
class ParameterTree {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T>& add(std::string name, Tensor<T> tensor) {
    if (contains(name)) throw ContractError("duplicate parameter name: " + name);
    entries_.emplace_back(std::move(name), std::move(tensor));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return true;
    return false;
  }

  const Tensor<T>& get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    throw ContractError("no parameter named " + name);
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).get(name));
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& [n, t] : entries_) t.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& [n, t] : entries_) t.set_requires_grad(on);
  }

  /// Copies values (not storage) from a tree with identical names and shapes,
  /// converting the element type if needed.
  template <class U>
  void assign_from(const ParameterTree<U>& other) {
    if (other.size() != size())
      throw DimensionError("parameter trees differ in size: " + std::to_string(other.size()) +
                           " vs " + std::to_string(size()));
    auto it = other.begin();
    for (auto& [name, t] : entries_) {
      if (it->first != name) throw DimensionError("parameter order differs at " + name);
      if (it->second.shape() != t.shape())
        throw DimensionError("parameter " + name + ": shape " + shape_string(it->second.shape()) +
                             " vs " + shape_string(t.shape()));
      auto src = it->second.data();
      auto dst = t.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
      ++it;
    }
  }

 private:
  std::vector<Entry> entries_;
};

template <class T>
std::size_t param_count(const ParameterTree<T>& tree) {
  std::size_t total = 0;
  for (const auto& [name, t] : tree) total += t.numel();
  return total;
}

/// Creates parameters inside a tree. Each tensor draws from its own stream
/// derived from (seed, name), so a tensor's initial values do not depend on
/// which other tensors exist.
template <class T>
class ParamFactory {
 public:
  ParamFactory(ParameterTree<T>& tree, std::uint64_t seed, std::string prefix = {})
      : tree_(tree), seed_(seed), prefix_(std::move(prefix)) {}

  ParamFactory scoped(const std::string& scope) const {
    return ParamFactory(tree_, seed_, prefix_ + scope + ".");
  }

  /// Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor<T> uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    const std::string full = prefix_ + name;
    Rng rng(derive_seed(seed_, full));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape), true);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return tree_.add(full, t);
  }

  Tensor<T> constant(const std::string& name, Shape shape, T value) {
    return tree_.add(prefix_ + name, Tensor<T>::filled(std::move(shape), value, true));
  }

 private:
  ParameterTree<T>& tree_;
  std::uint64_t seed_;
  std::string prefix_;
};

}  // namespace ptg
