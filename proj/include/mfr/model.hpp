#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "mfr/layers.hpp"
#include "mfr/parameter.hpp"
#include "mfr/rng.hpp"

namespace mfr {

/// Classification head placed on top of a frozen backbone embedding:
/// dropout -> batch norm -> dense logits.
struct HeadClassifierConfig {
  std::size_t input_dim = 512;
  std::size_t num_classes = 2;
  double dropout_p = 0.5;
  double bn_momentum = 0.99;
  double bn_eps = 1e-3;
};

/// Patch-based Transformer classifier. Defaults for the encoder and head
/// follow the reference hyper-parameter table; d_model has no default and
/// must be set.
struct ViTConfig {
  std::size_t image_size = 0;
  std::size_t channels = 1;
  std::size_t patch_size = 0;
  std::size_t d_model = 0;
  std::size_t num_blocks = 10;
  std::size_t num_heads = 8;
  std::size_t d_key = 64;
  double encoder_dropout = 0.3;
  std::vector<std::size_t> head_units{2048, 1024};
  double head_dropout = 0.6;
  std::size_t num_classes = 2;
  double ln_eps = 1e-6;
};

using ModelSpec = std::variant<HeadClassifierConfig, ViTConfig>;

void validate(const HeadClassifierConfig& cfg);
void validate(const ViTConfig& cfg);

// Closed forms for the trainable scalar count of each builder.
//   head: input_dim*C + C + 2*input_dim
//   vit:  (P*P*ch*d + d) + n*d
//         + blocks * [2d + (3*d*hk + 2*hk) + (hk*d + d) + 2d + (2d*d + 2d) + (2d*d + d)]
//         + 2d + sum over head units (u_prev*u + u) + (u_last*C + C)
// with d = d_model, hk = heads*d_key, n = (image/P)^2, u_prev starting at d.
std::size_t parameter_count(const HeadClassifierConfig& cfg);
std::size_t parameter_count(const ViTConfig& cfg);

class Model {
 public:
  Model(ModelSpec spec, ParameterStore params, LayerPtr root, Shape sample_shape,
        std::size_t num_classes);

  const ModelSpec& spec() const noexcept { return spec_; }
  bool is_vit() const noexcept { return std::holds_alternative<ViTConfig>(spec_); }
  const Shape& sample_shape() const noexcept { return sample_shape_; }
  std::size_t num_classes() const noexcept { return num_classes_; }

  Mode mode() const noexcept { return mode_; }
  void set_mode(Mode mode) noexcept { mode_ = mode; }

  // Optional class names, index-aligned with the logits.
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  void set_labels(std::vector<std::string> labels);

  // Multiplier callers apply to raw inputs before forward (pixel rescale for
  // image models); stored with the model, never applied internally.
  double input_scale() const noexcept { return input_scale_; }
  void set_input_scale(double scale) noexcept { input_scale_ = scale; }

  ParameterStore& parameters() noexcept { return params_; }
  const ParameterStore& parameters() const noexcept { return params_; }
  const Layer& root() const noexcept { return *root_; }

  // Forward in the current mode, recording activations for backward. Train
  // mode draws dropout masks from `rng`; eval mode never touches it.
  Tensor forward(const Tensor& batch, Rng& rng);
  // Eval-mode forward; throws in train mode.
  Tensor forward(const Tensor& batch);
  // Eval-mode inference with no recorded state; safe to call concurrently.
  Tensor infer(const Tensor& batch) const;
  // Accumulates gradients of the loss w.r.t. every parameter, given dL/dlogits.
  Tensor backward(const Tensor& dlogits);

 private:
  void check_batch(const Tensor& batch) const;

  ModelSpec spec_;
  ParameterStore params_;
  LayerPtr root_;
  Shape sample_shape_;
  std::size_t num_classes_;
  Mode mode_ = Mode::eval;
  Tape tape_;
  std::vector<std::string> labels_;
  double input_scale_ = 1.0;
};

Model build_head_classifier(const HeadClassifierConfig& cfg, Rng init = Rng(0));
Model build_vit(const ViTConfig& cfg, Rng init = Rng(0));
Model build_model(const ModelSpec& spec, Rng init = Rng(0));

// Convenience: class with the largest logit per row, lowest index on ties.
std::vector<std::size_t> argmax_rows(const Tensor& scores);

}  // namespace mfr
