#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mfr/ops.hpp"
#include "mfr/parameter.hpp"

namespace mfr {

// Activations saved during a recorded forward pass. Every layer pushes one
// frame in forward and pops it in backward, so nesting unwinds naturally.
class Tape {
 public:
  void push(std::vector<Tensor> frame) { frames_.push_back(std::move(frame)); }
  std::vector<Tensor> pop();
  bool empty() const noexcept { return frames_.empty(); }
  void clear() noexcept { frames_.clear(); }

 private:
  std::vector<std::vector<Tensor>> frames_;
};

struct Pass {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;                 // required when mode == train
  Tape* tape = nullptr;               // null: nothing recorded
  const ParameterStore* params = nullptr;
  ParameterStore* buffers = nullptr;  // running statistics, train mode only
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string_view kind() const = 0;
  virtual Tensor forward(const Tensor& x, Pass& pass) const = 0;
  // Accumulates parameter gradients into `params` and returns dL/dx.
  virtual Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const = 0;
  virtual void collect_parameter_ids(std::vector<std::size_t>& out) const { (void)out; }
};

using LayerPtr = std::shared_ptr<const Layer>;

class DenseLayer final : public Layer {
 public:
  DenseLayer(std::size_t w, std::size_t b) : w_(w), b_(b) {}
  std::string_view kind() const override { return "dense"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
  void collect_parameter_ids(std::vector<std::size_t>& out) const override;
  std::size_t weight_id() const noexcept { return w_; }
  std::size_t bias_id() const noexcept { return b_; }

 private:
  std::size_t w_, b_;
};

class LayerNormLayer final : public Layer {
 public:
  LayerNormLayer(std::size_t gamma, std::size_t beta, double eps)
      : gamma_(gamma), beta_(beta), eps_(eps) {}
  std::string_view kind() const override { return "layernorm"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
  void collect_parameter_ids(std::vector<std::size_t>& out) const override;

 private:
  std::size_t gamma_, beta_;
  double eps_;
};

class BatchNormLayer final : public Layer {
 public:
  BatchNormLayer(std::size_t gamma, std::size_t beta, std::size_t mean, std::size_t var,
                 double momentum, double eps)
      : gamma_(gamma), beta_(beta), mean_(mean), var_(var), momentum_(momentum), eps_(eps) {}
  std::string_view kind() const override { return "batchnorm"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
  void collect_parameter_ids(std::vector<std::size_t>& out) const override;

 private:
  std::size_t gamma_, beta_, mean_, var_;
  double momentum_, eps_;
};

class DropoutLayer final : public Layer {
 public:
  explicit DropoutLayer(double p);
  std::string_view kind() const override { return "dropout"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
  double probability() const noexcept { return p_; }

 private:
  double p_;
};

class GeluLayer final : public Layer {
 public:
  std::string_view kind() const override { return "gelu"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
};

// [B, H, W, C] images -> [B * n, P*P*C] patch rows.
class PatchifyLayer final : public Layer {
 public:
  explicit PatchifyLayer(std::size_t patch) : patch_(patch) {}
  std::string_view kind() const override { return "patchify"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;

 private:
  std::size_t patch_;
};

// Adds row (r mod n) of a learned [n, d] table to row r.
class PositionEmbeddingLayer final : public Layer {
 public:
  PositionEmbeddingLayer(std::size_t table, std::size_t n) : table_(table), n_(n) {}
  std::string_view kind() const override { return "position_embedding"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
  void collect_parameter_ids(std::vector<std::size_t>& out) const override;

 private:
  std::size_t table_, n_;
};

struct MhaParameterIds {
  std::size_t wq, bq, wk, wv, bv, wo, bo;
};

class MhaLayer final : public Layer {
 public:
  MhaLayer(MhaParameterIds ids, std::size_t heads, std::size_t d_key, std::size_t seq_len)
      : ids_(ids), heads_(heads), d_key_(d_key), seq_len_(seq_len) {}
  std::string_view kind() const override { return "mha"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
  void collect_parameter_ids(std::vector<std::size_t>& out) const override;
  const MhaParameterIds& ids() const noexcept { return ids_; }

 private:
  MhaWeights weights(const ParameterStore& params) const;
  MhaParameterIds ids_;
  std::size_t heads_, d_key_, seq_len_;
};

class MeanPoolLayer final : public Layer {
 public:
  explicit MeanPoolLayer(std::size_t n) : n_(n) {}
  std::string_view kind() const override { return "mean_pool"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;

 private:
  std::size_t n_;
};

class SequentialLayer final : public Layer {
 public:
  explicit SequentialLayer(std::vector<LayerPtr> children) : children_(std::move(children)) {}
  std::string_view kind() const override { return "sequential"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
  void collect_parameter_ids(std::vector<std::size_t>& out) const override;
  const std::vector<LayerPtr>& children() const noexcept { return children_; }

 private:
  std::vector<LayerPtr> children_;
};

// y = x + inner(x)
class ResidualLayer final : public Layer {
 public:
  explicit ResidualLayer(LayerPtr inner) : inner_(std::move(inner)) {}
  std::string_view kind() const override { return "residual"; }
  Tensor forward(const Tensor& x, Pass& pass) const override;
  Tensor backward(const Tensor& dy, ParameterStore& params, Tape& tape) const override;
  void collect_parameter_ids(std::vector<std::size_t>& out) const override;
  const Layer& inner() const noexcept { return *inner_; }

 private:
  LayerPtr inner_;
};

}  // namespace mfr
