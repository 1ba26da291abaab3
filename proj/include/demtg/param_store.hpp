#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "demtg/common.hpp"
#include "demtg/tape.hpp"
#include "demtg/tensor.hpp"

namespace demtg {

// Named parameter map. Paths are unique, shapes immutable after creation.
// trainable=false marks buffers the optimizer must skip (BN running stats);
// weight_decay=false exempts norm gains/biases from decay.
class ParamStore {
 public:
  struct Param {
    Tensor value;
    std::vector<double> grad;
    bool trainable = true;
    bool weight_decay = true;
  };

  Tensor& create(const std::string& path, Tensor init, bool trainable = true,
                 bool weight_decay = true) {
    auto [it, inserted] = map_.try_emplace(path);
    if (!inserted) throw ContractError("parameter path already exists: " + path);
    it->second.value = std::move(init);
    it->second.grad.assign(static_cast<std::size_t>(it->second.value.size()), 0.0);
    it->second.trainable = trainable;
    it->second.weight_decay = weight_decay;
    return it->second.value;
  }

  bool has(const std::string& path) const { return map_.count(path) != 0; }

  const Param& at(const std::string& path) const {
    auto it = map_.find(path);
    if (it == map_.end()) throw ContractError("unknown parameter path: " + path);
    return it->second;
  }

  const Tensor& value(const std::string& path) const { return at(path).value; }

  void set_value(const std::string& path, Tensor v) {
    auto it = map_.find(path);
    if (it == map_.end()) throw ContractError("unknown parameter path: " + path);
    if (v.shape() != it->second.value.shape()) {
      throw ContractError("parameter " + path + " shape is immutable: " +
                          shape_str(it->second.value.shape()) + " vs " + shape_str(v.shape()));
    }
    it->second.value = std::move(v).detached();
  }

  std::vector<double>& grad(const std::string& path) {
    auto it = map_.find(path);
    if (it == map_.end()) throw ContractError("unknown parameter path: " + path);
    return it->second.grad;
  }

  void zero_grads() {
    for (auto& [path, p] : map_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
  }

  std::size_t count() const { return map_.size(); }

  // Deterministic (sorted) iteration order.
  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }
  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }

 private:
  std::map<std::string, Param> map_;
};

// Binds store parameters onto a tape as leaves, one leaf per path per pass,
// and pulls the tape gradients back into the store after backward().
class BoundParams {
 public:
  BoundParams(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}

  const Tensor& operator()(const std::string& path) {
    auto it = bound_.find(path);
    if (it != bound_.end()) return it->second;
    Tensor leaf = tape_->leaf(store_->value(path));
    return bound_.emplace(path, std::move(leaf)).first->second;
  }

  ParamStore& store() { return *store_; }
  Tape& tape() { return *tape_; }

  // Accumulates into the store's grad buffers; parameters never bound in this
  // pass are untouched (their gradient is zero by definition).
  void pull_grads() {
    for (const auto& [path, leaf] : bound_) {
      if (!store_->at(path).trainable) continue;
      std::vector<double> g = tape_->grad_of(leaf);
      auto& dst = store_->grad(path);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }
  }

 private:
  Tape* tape_;
  ParamStore* store_;
  std::map<std::string, Tensor> bound_;
};

}  // namespace demtg
