#pragma once

#include "latte/tensor.hpp"

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace latte::model {

// Named tensors with deterministic iteration order (insertion order).
template <typename ScalarT>
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<ScalarT> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<ScalarT>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return values_[it->second];
  }

  const Tensor<ScalarT>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return values_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return names_.size(); }

  Index total_parameters() const {
    Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& v : values_)
      if (!v.all_finite()) return false;
    return true;
  }

  template <typename T>
  ParameterStore<T> cast() const {
    ParameterStore<T> out;
    for (size_t i = 0; i < names_.size(); ++i)
      out.add(names_[i], values_[i].template cast<T>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<ScalarT>> values_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace latte::model
