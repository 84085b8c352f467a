#include "mfr/parameter.hpp"

#include "mfr/error.hpp"

namespace mfr {

std::size_t ParameterStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) fail(ErrorKind::config, "duplicate parameter name '" + name + "'");
  const std::size_t id = params_.size();
  index_.emplace(name, id);
  Tensor grad(value.shape());
  params_.push_back(Parameter{std::move(name), std::move(value), std::move(grad), trainable});
  return id;
}

bool ParameterStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

std::size_t ParameterStore::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) fail(ErrorKind::config, "unknown parameter '" + std::string(name) + "'");
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

std::vector<Tensor> ParameterStore::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

void ParameterStore::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) fail(ErrorKind::dimension, "snapshot size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require_same_shape(params_[i].value, values[i], "restore");
    params_[i].value = values[i];
  }
}

}  // namespace mfr
