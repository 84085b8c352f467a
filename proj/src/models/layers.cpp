#include "mfr/layers.hpp"

#include "mfr/error.hpp"

namespace mfr {

std::vector<Tensor> Tape::pop() {
  if (frames_.empty()) fail(ErrorKind::config, "backward without a recorded forward pass");
  std::vector<Tensor> f = std::move(frames_.back());
  frames_.pop_back();
  return f;
}

namespace {

const ParameterStore& params_of(const Pass& pass) {
  if (!pass.params) fail(ErrorKind::config, "forward pass without parameters");
  return *pass.params;
}

Rng& rng_of(const Pass& pass) {
  if (!pass.rng) fail(ErrorKind::config, "train-mode forward needs a random generator");
  return *pass.rng;
}

void record(Pass& pass, std::vector<Tensor> frame) {
  if (pass.tape) pass.tape->push(std::move(frame));
}

}  // namespace

// dense

Tensor DenseLayer::forward(const Tensor& x, Pass& pass) const {
  const auto& p = params_of(pass);
  Tensor y = dense_forward(x, p[w_].value, p[b_].value);
  record(pass, {x});
  return y;
}

Tensor DenseLayer::backward(const Tensor& dy, ParameterStore& params, Tape& tape) const {
  auto frame = tape.pop();
  auto g = dense_backward(frame[0], params[w_].value, dy);
  params[w_].grad += g.dw;
  params[b_].grad += g.db;
  return std::move(g.dx);
}

void DenseLayer::collect_parameter_ids(std::vector<std::size_t>& out) const {
  out.push_back(w_);
  out.push_back(b_);
}

// layer norm

Tensor LayerNormLayer::forward(const Tensor& x, Pass& pass) const {
  const auto& p = params_of(pass);
  if (!pass.tape) return layernorm_forward(x, p[gamma_].value, p[beta_].value, eps_);
  NormCache cache;
  Tensor y = layernorm_forward(x, p[gamma_].value, p[beta_].value, eps_, &cache);
  const std::size_t rows = cache.inv_std.size();
  record(pass, {std::move(cache.xhat), Tensor({rows}, std::move(cache.inv_std))});
  return y;
}

Tensor LayerNormLayer::backward(const Tensor& dy, ParameterStore& params, Tape& tape) const {
  auto frame = tape.pop();
  const auto& inv = frame[1].storage();
  NormCache cache{std::move(frame[0]), inv};
  auto g = layernorm_backward(cache, params[gamma_].value, dy);
  params[gamma_].grad += g.dgamma;
  params[beta_].grad += g.dbeta;
  return std::move(g.dx);
}

void LayerNormLayer::collect_parameter_ids(std::vector<std::size_t>& out) const {
  out.push_back(gamma_);
  out.push_back(beta_);
}

// batch norm

Tensor BatchNormLayer::forward(const Tensor& x, Pass& pass) const {
  const auto& p = params_of(pass);
  NormCache cache;
  Tensor y;
  if (pass.mode == Mode::train) {
    BatchNormState state{p[mean_].value, p[var_].value};
    y = batchnorm_forward(x, p[gamma_].value, p[beta_].value, &state, Mode::train, momentum_,
                          eps_, &cache);
    if (pass.buffers) {
      (*pass.buffers)[mean_].value = std::move(state.running_mean);
      (*pass.buffers)[var_].value = std::move(state.running_var);
    }
  } else {
    BatchNormState state{p[mean_].value, p[var_].value};
    y = batchnorm_forward(x, p[gamma_].value, p[beta_].value, state, eps_, &cache);
  }
  if (pass.tape) {
    const std::size_t d = cache.inv_std.size();
    record(pass, {std::move(cache.xhat), Tensor({d}, std::move(cache.inv_std)),
                  Tensor({1}, pass.mode == Mode::train ? 1.0 : 0.0)});
  }
  return y;
}

Tensor BatchNormLayer::backward(const Tensor& dy, ParameterStore& params, Tape& tape) const {
  auto frame = tape.pop();
  NormCache cache{std::move(frame[0]), frame[1].storage()};
  auto g = frame[2][0] == 1.0 ? batchnorm_backward(cache, params[gamma_].value, dy)
                              : batchnorm_eval_backward(cache, params[gamma_].value, dy);
  params[gamma_].grad += g.dgamma;
  params[beta_].grad += g.dbeta;
  return std::move(g.dx);
}

void BatchNormLayer::collect_parameter_ids(std::vector<std::size_t>& out) const {
  out.insert(out.end(), {gamma_, beta_, mean_, var_});
}

// dropout

DropoutLayer::DropoutLayer(double p) : p_(p) {
  if (!(p >= 0.0 && p < 1.0)) {
    fail(ErrorKind::invalid_probability, "dropout probability must lie in [0, 1)");
  }
}

Tensor DropoutLayer::forward(const Tensor& x, Pass& pass) const {
  if (pass.mode == Mode::eval || p_ == 0.0) {
    record(pass, {Tensor()});
    return x;
  }
  auto r = dropout_forward(x, p_, pass.mode, rng_of(pass));
  record(pass, {std::move(r.mask)});
  return std::move(r.output);
}

Tensor DropoutLayer::backward(const Tensor& dy, ParameterStore&, Tape& tape) const {
  auto frame = tape.pop();
  if (frame[0].empty()) return dy;
  return dropout_backward(dy, frame[0]);
}

// gelu

Tensor GeluLayer::forward(const Tensor& x, Pass& pass) const {
  record(pass, {x});
  return gelu(x);
}

Tensor GeluLayer::backward(const Tensor& dy, ParameterStore&, Tape& tape) const {
  auto frame = tape.pop();
  return gelu_backward(frame[0], dy);
}

// patchify

Tensor PatchifyLayer::forward(const Tensor& x, Pass& pass) const {
  Tensor y = patchify_batch(x, patch_);
  if (pass.tape) {
    std::vector<double> dims(x.shape().begin(), x.shape().end());
    const std::size_t rank = dims.size();
    record(pass, {Tensor({rank}, std::move(dims))});
  }
  return y;
}

Tensor PatchifyLayer::backward(const Tensor& dy, ParameterStore&, Tape& tape) const {
  auto frame = tape.pop();
  Shape s;
  for (double v : frame[0].values()) s.push_back(static_cast<std::size_t>(v));
  return unpatchify_batch(dy, s, patch_);
}

// position embedding

Tensor PositionEmbeddingLayer::forward(const Tensor& x, Pass& pass) const {
  const Tensor& table = params_of(pass)[table_].value;
  if (x.rank() != 2 || x.dim(1) != table.dim(1) || x.dim(0) % n_ != 0) {
    fail(ErrorKind::dimension, "position embedding " + shape_string(table.shape()) +
                                   " cannot be added to " + shape_string(x.shape()));
  }
  const std::size_t d = x.dim(1);
  Tensor y = x;
  for (std::size_t r = 0; r < x.dim(0); ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] += table[(r % n_) * d + j];
  record(pass, {Tensor()});
  return y;
}

Tensor PositionEmbeddingLayer::backward(const Tensor& dy, ParameterStore& params,
                                        Tape& tape) const {
  tape.pop();
  Tensor& grad = params[table_].grad;
  const std::size_t d = dy.dim(1);
  for (std::size_t r = 0; r < dy.dim(0); ++r)
    for (std::size_t j = 0; j < d; ++j) grad[(r % n_) * d + j] += dy[r * d + j];
  return dy;
}

void PositionEmbeddingLayer::collect_parameter_ids(std::vector<std::size_t>& out) const {
  out.push_back(table_);
}

// attention

MhaWeights MhaLayer::weights(const ParameterStore& p) const {
  return MhaWeights{heads_,           d_key_,           p[ids_.wq].value, p[ids_.bq].value,
                    p[ids_.wk].value, p[ids_.wv].value, p[ids_.bv].value, p[ids_.wo].value,
                    p[ids_.bo].value};
}

Tensor MhaLayer::forward(const Tensor& x, Pass& pass) const {
  const MhaWeights w = weights(params_of(pass));
  if (!pass.tape) return mha_forward(x, w, seq_len_);
  MhaCache c;
  Tensor y = mha_forward(x, w, seq_len_, &c);
  record(pass, {x, std::move(c.q), std::move(c.k), std::move(c.v), std::move(c.attn),
                std::move(c.concat)});
  return y;
}

Tensor MhaLayer::backward(const Tensor& dy, ParameterStore& params, Tape& tape) const {
  auto f = tape.pop();
  MhaCache c{seq_len_, std::move(f[1]), std::move(f[2]), std::move(f[3]), std::move(f[4]),
             std::move(f[5])};
  auto g = mha_backward(f[0], weights(params), c, dy);
  params[ids_.wq].grad += g.dwq;
  params[ids_.bq].grad += g.dbq;
  params[ids_.wk].grad += g.dwk;
  params[ids_.wv].grad += g.dwv;
  params[ids_.bv].grad += g.dbv;
  params[ids_.wo].grad += g.dwo;
  params[ids_.bo].grad += g.dbo;
  return std::move(g.dx);
}

void MhaLayer::collect_parameter_ids(std::vector<std::size_t>& out) const {
  out.insert(out.end(), {ids_.wq, ids_.bq, ids_.wk, ids_.wv, ids_.bv, ids_.wo, ids_.bo});
}

// pooling

Tensor MeanPoolLayer::forward(const Tensor& x, Pass& pass) const {
  record(pass, {Tensor()});
  return mean_pool(x, n_);
}

Tensor MeanPoolLayer::backward(const Tensor& dy, ParameterStore&, Tape& tape) const {
  tape.pop();
  return mean_pool_backward(dy, n_);
}

// composition

Tensor SequentialLayer::forward(const Tensor& x, Pass& pass) const {
  Tensor h = x;
  for (const auto& c : children_) h = c->forward(h, pass);
  return h;
}

Tensor SequentialLayer::backward(const Tensor& dy, ParameterStore& params, Tape& tape) const {
  Tensor g = dy;
  for (auto it = children_.rbegin(); it != children_.rend(); ++it) {
    g = (*it)->backward(g, params, tape);
  }
  return g;
}

void SequentialLayer::collect_parameter_ids(std::vector<std::size_t>& out) const {
  for (const auto& c : children_) c->collect_parameter_ids(out);
}

Tensor ResidualLayer::forward(const Tensor& x, Pass& pass) const {
  Tensor y = inner_->forward(x, pass);
  y += x;
  return y;
}

Tensor ResidualLayer::backward(const Tensor& dy, ParameterStore& params, Tape& tape) const {
  Tensor dx = inner_->backward(dy, params, tape);
  dx += dy;
  return dx;
}

void ResidualLayer::collect_parameter_ids(std::vector<std::size_t>& out) const {
  inner_->collect_parameter_ids(out);
}

}  // namespace mfr
