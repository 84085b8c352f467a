#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mfr/tensor.hpp"

namespace mfr {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value
  // Buffers such as batch-norm running statistics are stored alongside
  // weights (and checkpointed with them) but never touched by the optimizer.
  bool trainable = true;
};

/// Insertion-ordered set of uniquely named parameters.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor value, bool trainable = true);

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t id) { return params_[id]; }
  const Parameter& operator[](std::size_t id) const { return params_[id]; }

  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;
  const Parameter& get(std::string_view name) const { return params_[index_of(name)]; }
  Parameter& get(std::string_view name) { return params_[index_of(name)]; }

  std::vector<Parameter>& all() noexcept { return params_; }
  const std::vector<Parameter>& all() const noexcept { return params_; }

  void zero_grad();
  // Number of trainable scalars.
  std::size_t trainable_count() const;

  // Value snapshot/restore, used to keep best-epoch weights.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mfr
