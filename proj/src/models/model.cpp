#include "mfr/model.hpp"

#include <cmath>
#include <string>

#include "mfr/error.hpp"

namespace mfr {

void validate(const HeadClassifierConfig& cfg) {
  if (cfg.input_dim == 0) fail(ErrorKind::config, "head classifier input_dim must be positive");
  if (cfg.num_classes < 2) {
    fail(ErrorKind::config, "head classifier needs at least 2 classes, got " +
                                std::to_string(cfg.num_classes));
  }
  if (!(cfg.dropout_p >= 0.0 && cfg.dropout_p < 1.0)) {
    fail(ErrorKind::config, "head classifier dropout must lie in [0, 1)");
  }
  if (!(cfg.bn_momentum >= 0.0 && cfg.bn_momentum < 1.0) || !(cfg.bn_eps > 0.0)) {
    fail(ErrorKind::config, "head classifier batch-norm momentum/eps out of range");
  }
}

void validate(const ViTConfig& cfg) {
  if (cfg.image_size == 0 || cfg.channels == 0) fail(ErrorKind::config, "vit image size/channels must be positive");
  if (cfg.patch_size == 0 || cfg.image_size % cfg.patch_size != 0) {
    fail(ErrorKind::config, "patch size " + std::to_string(cfg.patch_size) +
                                " does not divide image size " + std::to_string(cfg.image_size));
  }
  if (cfg.d_model == 0) fail(ErrorKind::config, "vit d_model must be set");
  if (cfg.num_blocks == 0 || cfg.num_heads == 0 || cfg.d_key == 0) {
    fail(ErrorKind::config, "vit blocks, heads and d_key must be positive");
  }
  if (cfg.head_units.empty()) fail(ErrorKind::config, "vit head_units must not be empty");
  for (auto u : cfg.head_units)
    if (u == 0) fail(ErrorKind::config, "vit head_units entries must be positive");
  for (double p : {cfg.encoder_dropout, cfg.head_dropout}) {
    if (!(p >= 0.0 && p < 1.0)) fail(ErrorKind::config, "vit dropouts must lie in [0, 1)");
  }
  if (cfg.num_classes < 2) fail(ErrorKind::config, "vit needs at least 2 classes");
  if (!(cfg.ln_eps > 0.0)) fail(ErrorKind::config, "vit ln_eps must be positive");
}

std::size_t parameter_count(const HeadClassifierConfig& cfg) {
  return cfg.input_dim * cfg.num_classes + cfg.num_classes + 2 * cfg.input_dim;
}

std::size_t parameter_count(const ViTConfig& cfg) {
  const std::size_t d = cfg.d_model, hk = cfg.num_heads * cfg.d_key;
  const std::size_t grid = cfg.image_size / cfg.patch_size;
  const std::size_t n = grid * grid;
  std::size_t total = cfg.patch_size * cfg.patch_size * cfg.channels * d + d + n * d;
  const std::size_t block =
      2 * d + (3 * d * hk + 2 * hk) + (hk * d + d) + 2 * d + (d * 2 * d + 2 * d) + (2 * d * d + d);
  total += cfg.num_blocks * block + 2 * d;
  std::size_t prev = d;
  for (auto u : cfg.head_units) {
    total += prev * u + u;
    prev = u;
  }
  return total + prev * cfg.num_classes + cfg.num_classes;
}

// ---- Model -------------------------------------------------------------------

Model::Model(ModelSpec spec, ParameterStore params, LayerPtr root, Shape sample_shape,
             std::size_t num_classes)
    : spec_(std::move(spec)),
      params_(std::move(params)),
      root_(std::move(root)),
      sample_shape_(std::move(sample_shape)),
      num_classes_(num_classes) {
  std::vector<std::size_t> ids;
  root_->collect_parameter_ids(ids);
  std::vector<int> seen(params_.size(), 0);
  for (auto id : ids) {
    if (id >= params_.size()) fail(ErrorKind::config, "layer references a missing parameter");
    ++seen[id];
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i] != 1) {
      fail(ErrorKind::config, "parameter '" + params_[i].name + "' is referenced " +
                                  std::to_string(seen[i]) + " times");
    }
  }
}

void Model::set_labels(std::vector<std::string> labels) {
  if (!labels.empty() && labels.size() != num_classes_) {
    fail(ErrorKind::vocabulary, "model has " + std::to_string(num_classes_) + " classes but " +
                                    std::to_string(labels.size()) + " labels were given");
  }
  labels_ = std::move(labels);
}

void Model::check_batch(const Tensor& batch) const {
  const Shape& expected = sample_shape_;
  bool ok = batch.rank() == expected.size() + 1;
  for (std::size_t i = 0; ok && i < expected.size(); ++i) ok = batch.dim(i + 1) == expected[i];
  if (!ok) {
    fail(ErrorKind::dimension, "model expects batches of " + shape_string(sample_shape_) +
                                   " samples, got " + shape_string(batch.shape()));
  }
}

Tensor Model::forward(const Tensor& batch, Rng& rng) {
  check_batch(batch);
  tape_.clear();
  Pass pass{mode_, &rng, &tape_, &params_, mode_ == Mode::train ? &params_ : nullptr};
  return root_->forward(batch, pass);
}

Tensor Model::forward(const Tensor& batch) {
  if (mode_ == Mode::train) {
    fail(ErrorKind::config, "train-mode forward needs a random generator");
  }
  check_batch(batch);
  tape_.clear();
  Pass pass{Mode::eval, nullptr, &tape_, &params_, nullptr};
  return root_->forward(batch, pass);
}

Tensor Model::infer(const Tensor& batch) const {
  check_batch(batch);
  Pass pass{Mode::eval, nullptr, nullptr, &params_, nullptr};
  return root_->forward(batch, pass);
}

Tensor Model::backward(const Tensor& dlogits) {
  Tensor dx = root_->backward(dlogits, params_, tape_);
  if (!tape_.empty()) fail(ErrorKind::config, "tape not fully unwound after backward");
  return dx;
}

// ---- builders ----------------------------------------------------------------

namespace {

Tensor glorot(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w({in, out});
  for (auto& v : w.values()) v = rng.uniform(-limit, limit);
  return w;
}

LayerPtr add_dense(ParameterStore& store, const std::string& name, std::size_t in,
                   std::size_t out, Rng& rng) {
  auto w = store.add(name + ".w", glorot(in, out, rng));
  auto b = store.add(name + ".b", Tensor({out}));
  return std::make_shared<DenseLayer>(w, b);
}

LayerPtr add_layernorm(ParameterStore& store, const std::string& name, std::size_t d,
                       double eps) {
  auto g = store.add(name + ".gamma", Tensor({d}, 1.0));
  auto b = store.add(name + ".beta", Tensor({d}));
  return std::make_shared<LayerNormLayer>(g, b, eps);
}

}  // namespace

Model build_head_classifier(const HeadClassifierConfig& cfg, Rng init) {
  validate(cfg);
  ParameterStore store;
  const std::size_t d = cfg.input_dim;
  auto gamma = store.add("bn.gamma", Tensor({d}, 1.0));
  auto beta = store.add("bn.beta", Tensor({d}));
  auto mean = store.add("bn.running_mean", Tensor({d}), false);
  auto var = store.add("bn.running_var", Tensor({d}, 1.0), false);
  std::vector<LayerPtr> layers{
      std::make_shared<DropoutLayer>(cfg.dropout_p),
      std::make_shared<BatchNormLayer>(gamma, beta, mean, var, cfg.bn_momentum, cfg.bn_eps),
      add_dense(store, "classifier", d, cfg.num_classes, init)};
  return Model(cfg, std::move(store), std::make_shared<SequentialLayer>(std::move(layers)), {d},
               cfg.num_classes);
}

Model build_vit(const ViTConfig& cfg, Rng init) {
  validate(cfg);
  ParameterStore store;
  const std::size_t d = cfg.d_model, p = cfg.patch_size, hk = cfg.num_heads * cfg.d_key;
  const std::size_t grid = cfg.image_size / p;
  const std::size_t n = grid * grid;

  std::vector<LayerPtr> layers;
  layers.push_back(std::make_shared<PatchifyLayer>(p));
  layers.push_back(add_dense(store, "patch_embed", p * p * cfg.channels, d, init));
  Tensor pos({n, d});
  for (auto& v : pos.values()) v = 0.02 * init.normal();
  layers.push_back(std::make_shared<PositionEmbeddingLayer>(store.add("pos_embed", pos), n));

  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b);
    auto ln1 = add_layernorm(store, prefix + ".ln1", d, cfg.ln_eps);
    MhaParameterIds ids{};
    ids.wq = store.add(prefix + ".mha.wq", glorot(d, hk, init));
    ids.bq = store.add(prefix + ".mha.bq", Tensor({hk}));
    ids.wk = store.add(prefix + ".mha.wk", glorot(d, hk, init));
    ids.wv = store.add(prefix + ".mha.wv", glorot(d, hk, init));
    ids.bv = store.add(prefix + ".mha.bv", Tensor({hk}));
    ids.wo = store.add(prefix + ".mha.wo", glorot(hk, d, init));
    ids.bo = store.add(prefix + ".mha.bo", Tensor({d}));
    auto mha = std::make_shared<MhaLayer>(ids, cfg.num_heads, cfg.d_key, n);
    layers.push_back(std::make_shared<ResidualLayer>(
        std::make_shared<SequentialLayer>(std::vector<LayerPtr>{ln1, mha})));

    auto ln2 = add_layernorm(store, prefix + ".ln2", d, cfg.ln_eps);
    auto fc1 = add_dense(store, prefix + ".mlp.fc1", d, 2 * d, init);
    auto fc2 = add_dense(store, prefix + ".mlp.fc2", 2 * d, d, init);
    layers.push_back(std::make_shared<ResidualLayer>(std::make_shared<SequentialLayer>(
        std::vector<LayerPtr>{ln2, fc1, std::make_shared<GeluLayer>(),
                              std::make_shared<DropoutLayer>(cfg.encoder_dropout), fc2,
                              std::make_shared<GeluLayer>(),
                              std::make_shared<DropoutLayer>(cfg.encoder_dropout)})));
  }

  layers.push_back(add_layernorm(store, "final_ln", d, cfg.ln_eps));
  layers.push_back(std::make_shared<MeanPoolLayer>(n));
  std::size_t prev = d;
  for (std::size_t i = 0; i < cfg.head_units.size(); ++i) {
    layers.push_back(
        add_dense(store, "head.fc" + std::to_string(i), prev, cfg.head_units[i], init));
    layers.push_back(std::make_shared<GeluLayer>());
    layers.push_back(std::make_shared<DropoutLayer>(cfg.head_dropout));
    prev = cfg.head_units[i];
  }
  layers.push_back(add_dense(store, "classifier", prev, cfg.num_classes, init));

  return Model(cfg, std::move(store), std::make_shared<SequentialLayer>(std::move(layers)),
               {cfg.image_size, cfg.image_size, cfg.channels}, cfg.num_classes);
}

Model build_model(const ModelSpec& spec, Rng init) {
  return std::visit(
      [&](const auto& cfg) -> Model {
        if constexpr (std::is_same_v<std::decay_t<decltype(cfg)>, ViTConfig>) {
          return build_vit(cfg, init);
        } else {
          return build_head_classifier(cfg, init);
        }
      },
      spec);
}

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  const std::size_t c = scores.cols();
  std::vector<std::size_t> out(scores.rows(), 0);
  for (std::size_t r = 0; r < out.size(); ++r) {
    for (std::size_t j = 1; j < c; ++j)
      if (scores[r * c + j] > scores[r * c + out[r]]) out[r] = j;
  }
  return out;
}

}  // namespace mfr
