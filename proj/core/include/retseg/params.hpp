#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "retseg/errors.hpp"
#include "retseg/tensor.hpp"

namespace retseg {

template <class T>
struct ParamEntryT {
  std::string name;
  TensorT<T> tensor;
  bool trainable = true;  // false for buffers such as BN running stats
};

// Ordered, name-addressed registry of parameter tensors. Entries alias the
// tensors owned by the model's layer structs, so writes through the registry
// (checkpoint load, momentum update) are visible to the model.
template <class T>
class ModelParamsT {
 public:
  void add(std::string name, TensorT<T> tensor, bool trainable = true) {
    if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(tensor), trainable});
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  TensorT<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  const TensorT<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }

  std::vector<ParamEntryT<T>>& entries() { return entries_; }
  const std::vector<ParamEntryT<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_)
      if (e.trainable) e.tensor.zero_grad();
  }

 private:
  std::vector<ParamEntryT<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ModelParams = ModelParamsT<float>;

}  // namespace retseg
