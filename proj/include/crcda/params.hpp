#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crcda/error.hpp"
#include "crcda/tensor.hpp"

namespace crcda {

/// Named trainable tensors belonging to one network component.
/// Iteration order is by name, which fixes the order of every sweep over parameters.
template <class T>
class ParamGroup {
 public:
  ParamGroup() = default;
  explicit ParamGroup(std::string name) : name_(std::move(name)) {}

  const std::string& name() const { return name_; }

  Tensor<T>& add(const std::string& key, Tensor<T> t) {
    require(!params_.contains(key), "duplicate parameter name '" + key + "' in group " + name_);
    t.set_requires_grad(true);
    return params_.emplace(key, std::move(t)).first->second;
  }

  Tensor<T>& at(const std::string& key) {
    auto it = params_.find(key);
    require(it != params_.end(), "no parameter '" + key + "' in group " + name_);
    return it->second;
  }
  const Tensor<T>& at(const std::string& key) const {
    auto it = params_.find(key);
    require(it != params_.end(), "no parameter '" + key + "' in group " + name_);
    return it->second;
  }

  bool contains(const std::string& key) const { return params_.contains(key); }
  std::size_t size() const { return params_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [k, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [k, t] : params_) t.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::string name_;
  std::map<std::string, Tensor<T>> params_;
};

}  // namespace crcda
