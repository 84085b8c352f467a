#include "mfr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "mfr/error.hpp"

namespace mfr {

namespace {

std::string describe(const char* op, const Tensor& a, const Tensor& b) {
  return std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape());
}

Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  out.back() = last;
  return out;
}

void require_vector(const Tensor& t, std::size_t n, const char* op, const char* name) {
  if (t.rank() != 1 || t.dim(0) != n) {
    fail(ErrorKind::dimension, std::string(op) + ": " + name + " has shape " +
                                   shape_string(t.shape()) + ", expected [" +
                                   std::to_string(n) + "]");
  }
}

// c[m, n] (+)= a[m, k] * b[k, n], all row-major raw buffers.
void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k, n] += a[m, k]^T * b[m, n]
void matmul_at_b_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m, k] += a[m, n] * b[k, n]^T
void matmul_a_bt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                     std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

}  // namespace

// ---- dense -----------------------------------------------------------------

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.rank() == 0 || x.cols() != w.dim(0)) {
    fail(ErrorKind::dimension, describe("dense_forward x/W", x, w));
  }
  const std::size_t in = w.dim(0), out = w.dim(1), rows = x.rows();
  require_vector(b, out, "dense_forward", "b");
  Tensor y(with_last(x.shape(), out));
  for (std::size_t i = 0; i < rows; ++i) std::copy(b.data(), b.data() + out, y.data() + i * out);
  matmul_acc(x.data(), w.data(), y.data(), rows, in, out);
  return y;
}

DenseGrads dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy) {
  if (w.rank() != 2 || x.cols() != w.dim(0) || dy.cols() != w.dim(1) || dy.rows() != x.rows()) {
    fail(ErrorKind::dimension, describe("dense_backward x/dy", x, dy));
  }
  const std::size_t in = w.dim(0), out = w.dim(1), rows = x.rows();
  DenseGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({out})};
  matmul_a_bt_acc(dy.data(), w.data(), g.dx.data(), rows, out, in);
  matmul_at_b_acc(x.data(), dy.data(), g.dw.data(), rows, in, out);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < out; ++j) g.db[j] += dy[i * out + j];
  return g;
}

// ---- layer norm --------------------------------------------------------------

Tensor layernorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                         NormCache* cache) {
  const std::size_t d = x.cols();
  if (d == 0) fail(ErrorKind::empty_axis, "layernorm over an empty last axis");
  require_vector(gamma, d, "layernorm_forward", "gamma");
  require_vector(beta, d, "layernorm_forward", "beta");
  const std::size_t rows = x.rows();
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      y[r * d + j] = h * gamma[j] + beta[j];
    }
  }
  if (cache) *cache = NormCache{std::move(xhat), std::move(inv_std)};
  return y;
}

NormGrads layernorm_backward(const NormCache& cache, const Tensor& gamma, const Tensor& dy) {
  require_same_shape(cache.xhat, dy, "layernorm_backward");
  const std::size_t d = dy.cols(), rows = dy.rows();
  NormGrads g{Tensor(dy.shape()), Tensor({d}), Tensor({d})};
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xh = cache.xhat.data() + r * d;
    const double* dyr = dy.data() + r * d;
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = dyr[j] * gamma[j];
      s1 += dxhat[j];
      s2 += dxhat[j] * xh[j];
      g.dgamma[j] += dyr[j] * xh[j];
      g.dbeta[j] += dyr[j];
    }
    const double scale = cache.inv_std[r] / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      g.dx[r * d + j] = scale * (static_cast<double>(d) * dxhat[j] - s1 - xh[j] * s2);
    }
  }
  return g;
}

// ---- batch norm --------------------------------------------------------------

namespace {

void check_batchnorm_shapes(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 2) fail(ErrorKind::dimension, "batchnorm expects [batch, d], got " +
                                                    shape_string(x.shape()));
  require_vector(gamma, x.dim(1), "batchnorm_forward", "gamma");
  require_vector(beta, x.dim(1), "batchnorm_forward", "beta");
}

Tensor normalise_columns(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const std::vector<double>& mean, const std::vector<double>& inv_std,
                         NormCache* cache) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (x[i * d + j] - mean[j]) * inv_std[j];
      xhat[i * d + j] = h;
      y[i * d + j] = h * gamma[j] + beta[j];
    }
  }
  if (cache) *cache = NormCache{std::move(xhat), inv_std};
  return y;
}

}  // namespace

Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         BatchNormState* state, Mode mode, double momentum, double eps,
                         NormCache* cache) {
  check_batchnorm_shapes(x, gamma, beta);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (mode == Mode::eval) {
    if (!state) fail(ErrorKind::config, "eval-mode batchnorm needs running statistics");
    return batchnorm_forward(x, gamma, beta, *state, eps, cache);
  }
  if (n < 2) {
    fail(ErrorKind::degenerate_batch,
         "train-mode batchnorm needs at least 2 samples, got " + std::to_string(n));
  }
  std::vector<double> mean(d, 0.0), var(d, 0.0), inv_std(d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j];
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[i * d + j] - mean[j];
      var[j] += c * c;
    }
  for (std::size_t j = 0; j < d; ++j) {
    var[j] /= static_cast<double>(n);
    inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  }
  if (state) {
    require_vector(state->running_mean, d, "batchnorm_forward", "running_mean");
    require_vector(state->running_var, d, "batchnorm_forward", "running_var");
    for (std::size_t j = 0; j < d; ++j) {
      state->running_mean[j] = momentum * state->running_mean[j] + (1.0 - momentum) * mean[j];
      state->running_var[j] = momentum * state->running_var[j] + (1.0 - momentum) * var[j];
    }
  }
  return normalise_columns(x, gamma, beta, mean, inv_std, cache);
}

Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const BatchNormState& state, double eps, NormCache* cache) {
  check_batchnorm_shapes(x, gamma, beta);
  const std::size_t d = x.dim(1);
  require_vector(state.running_mean, d, "batchnorm_forward", "running_mean");
  require_vector(state.running_var, d, "batchnorm_forward", "running_var");
  std::vector<double> mean(state.running_mean.values().begin(),
                           state.running_mean.values().end());
  std::vector<double> inv_std(d);
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + eps);
  return normalise_columns(x, gamma, beta, mean, inv_std, cache);
}

NormGrads batchnorm_backward(const NormCache& cache, const Tensor& gamma, const Tensor& dy) {
  require_same_shape(cache.xhat, dy, "batchnorm_backward");
  const std::size_t n = dy.dim(0), d = dy.dim(1);
  NormGrads g{Tensor(dy.shape()), Tensor({d}), Tensor({d})};
  std::vector<double> s1(d, 0.0), s2(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double dxh = dy[i * d + j] * gamma[j];
      s1[j] += dxh;
      s2[j] += dxh * cache.xhat[i * d + j];
      g.dgamma[j] += dy[i * d + j] * cache.xhat[i * d + j];
      g.dbeta[j] += dy[i * d + j];
    }
  const double nn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double dxh = dy[i * d + j] * gamma[j];
      g.dx[i * d + j] =
          cache.inv_std[j] / nn * (nn * dxh - s1[j] - cache.xhat[i * d + j] * s2[j]);
    }
  return g;
}

NormGrads batchnorm_eval_backward(const NormCache& cache, const Tensor& gamma,
                                  const Tensor& dy) {
  require_same_shape(cache.xhat, dy, "batchnorm_eval_backward");
  const std::size_t n = dy.dim(0), d = dy.dim(1);
  NormGrads g{Tensor(dy.shape()), Tensor({d}), Tensor({d})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      g.dx[i * d + j] = dy[i * d + j] * gamma[j] * cache.inv_std[j];
      g.dgamma[j] += dy[i * d + j] * cache.xhat[i * d + j];
      g.dbeta[j] += dy[i * d + j];
    }
  return g;
}

// ---- dropout / gelu ----------------------------------------------------------

DropoutResult dropout_forward(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    fail(ErrorKind::invalid_probability,
         "dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) return {x, Tensor(x.shape(), 1.0)};
  const double scale = 1.0 / (1.0 - p);
  Tensor mask(x.shape());
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = rng.uniform() < p ? 0.0 : scale;
    mask[i] = m;
    y[i] = x[i] * m;
  }
  return {std::move(y), std::move(mask)};
}

Tensor dropout_backward(const Tensor& dy, const Tensor& mask) {
  require_same_shape(dy, mask, "dropout_backward");
  Tensor dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
  return dx;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  }
  return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
  require_same_shape(x, dy, "gelu_backward");
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
  return dx;
}

// ---- softmax / cross entropy -------------------------------------------------

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t c = logits.cols(), rows = logits.rows();
  if (c == 0) fail(ErrorKind::empty_axis, "softmax over an empty axis");
  Tensor p(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* l = logits.data() + r * c;
    double* out = p.data() + r * c;
    const double m = *std::max_element(l, l + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[j] = std::exp(l[j] - m);
      s += out[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] /= s;
  }
  return p;
}

namespace {

void check_labels(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) {
    fail(ErrorKind::dimension, "cross entropy expects [batch, classes], got " +
                                   shape_string(logits.shape()));
  }
  if (logits.dim(1) < 2) fail(ErrorKind::dimension, "cross entropy needs at least 2 classes");
  if (labels.size() != logits.dim(0)) {
    fail(ErrorKind::dimension, "got " + std::to_string(labels.size()) + " labels for batch of " +
                                   std::to_string(logits.dim(0)));
  }
  for (auto l : labels) {
    if (l >= logits.dim(1)) {
      fail(ErrorKind::label, "label " + std::to_string(l) + " outside [0, " +
                                 std::to_string(logits.dim(1)) + ")");
    }
  }
}

}  // namespace

CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  check_labels(logits, labels);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  CrossEntropy out{0.0, softmax_rows(logits)};
  for (std::size_t i = 0; i < n; ++i) {
    const double* l = logits.data() + i * c;
    const double m = *std::max_element(l, l + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(l[j] - m);
    // -log softmax = logsumexp - l[label]
    out.loss += (m + std::log(s)) - l[labels[i]];
  }
  out.loss /= static_cast<double>(n);
  return out;
}

Tensor softmax_cross_entropy_backward(const Tensor& probs, std::span<const std::size_t> labels) {
  check_labels(probs, labels);
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  Tensor d = probs;
  for (std::size_t i = 0; i < n; ++i) d[i * c + labels[i]] -= 1.0;
  d *= 1.0 / static_cast<double>(n);
  return d;
}

// ---- patches -----------------------------------------------------------------

namespace {

void check_patch(std::size_t h, std::size_t w, std::size_t patch) {
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    fail(ErrorKind::patch_size, "patch size " + std::to_string(patch) + " does not divide " +
                                    std::to_string(h) + "x" + std::to_string(w));
  }
}

// Copies between one image [H, W, C] and its patch rows; `to_patches`
// selects direction.
void move_patches(double* image, double* patches, std::size_t h, std::size_t w, std::size_t c,
                  std::size_t patch, bool to_patches) {
  const std::size_t grid_w = w / patch;
  const std::size_t row_len = patch * patch * c;
  for (std::size_t py = 0; py < h / patch; ++py)
    for (std::size_t px = 0; px < grid_w; ++px) {
      double* prow = patches + (py * grid_w + px) * row_len;
      for (std::size_t dy = 0; dy < patch; ++dy) {
        double* pix = image + ((py * patch + dy) * w + px * patch) * c;
        double* dst = prow + dy * patch * c;
        if (to_patches) std::copy(pix, pix + patch * c, dst);
        else std::copy(dst, dst + patch * c, pix);
      }
    }
}

}  // namespace

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) {
    fail(ErrorKind::dimension, "patchify expects [H, W, C], got " + shape_string(image.shape()));
  }
  return patchify_batch(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}), patch);
}

Tensor unpatchify(const Tensor& patches, std::size_t height, std::size_t width,
                  std::size_t channels, std::size_t patch) {
  return unpatchify_batch(patches, {1, height, width, channels}, patch)
      .reshaped({height, width, channels});
}

Tensor patchify_batch(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4) {
    fail(ErrorKind::dimension,
         "patchify_batch expects [B, H, W, C], got " + shape_string(images.shape()));
  }
  const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  check_patch(h, w, patch);
  const std::size_t n = (h / patch) * (w / patch);
  Tensor out({b * n, patch * patch * c});
  Tensor src = images;
  for (std::size_t i = 0; i < b; ++i) {
    move_patches(src.data() + i * h * w * c, out.data() + i * n * patch * patch * c, h, w, c,
                 patch, true);
  }
  return out;
}

Tensor unpatchify_batch(const Tensor& patches, const Shape& image_shape, std::size_t patch) {
  if (image_shape.size() != 4) fail(ErrorKind::dimension, "unpatchify_batch needs a rank-4 shape");
  const std::size_t b = image_shape[0], h = image_shape[1], w = image_shape[2],
                    c = image_shape[3];
  check_patch(h, w, patch);
  const std::size_t n = (h / patch) * (w / patch);
  if (patches.rank() != 2 || patches.dim(0) != b * n || patches.dim(1) != patch * patch * c) {
    fail(ErrorKind::dimension, "patch tensor " + shape_string(patches.shape()) +
                                   " does not match image shape " + shape_string(image_shape));
  }
  Tensor out(image_shape);
  Tensor src = patches;
  for (std::size_t i = 0; i < b; ++i) {
    move_patches(out.data() + i * h * w * c, src.data() + i * n * patch * patch * c, h, w, c,
                 patch, false);
  }
  return out;
}

// ---- attention ---------------------------------------------------------------

void validate(const MhaWeights& w, std::size_t d_model) {
  const std::size_t hk = w.heads * w.d_key;
  if (w.heads == 0 || w.d_key == 0) fail(ErrorKind::dimension, "mha needs heads >= 1, d_key >= 1");
  auto check = [&](const Tensor& t, Shape expected, const char* name) {
    if (t.shape() != expected) {
      fail(ErrorKind::dimension, std::string("mha ") + name + " has shape " +
                                     shape_string(t.shape()) + ", expected " +
                                     shape_string(expected));
    }
  };
  check(w.wq, {d_model, hk}, "wq");
  check(w.wk, {d_model, hk}, "wk");
  check(w.wv, {d_model, hk}, "wv");
  check(w.bq, {hk}, "bq");
  check(w.bv, {hk}, "bv");
  check(w.wo, {hk, d_model}, "wo");
  check(w.bo, {d_model}, "bo");
}

Tensor mha_forward(const Tensor& x, const MhaWeights& w, std::size_t seq_len, MhaCache* cache) {
  if (x.rank() != 2) {
    fail(ErrorKind::dimension, "mha expects [tokens, d_model], got " + shape_string(x.shape()));
  }
  validate(w, x.dim(1));
  const std::size_t rows = x.dim(0);
  const std::size_t n = seq_len == 0 ? rows : seq_len;
  if (rows % n != 0) {
    fail(ErrorKind::dimension, std::to_string(rows) + " tokens do not split into sequences of " +
                                   std::to_string(n));
  }
  const std::size_t groups = rows / n, heads = w.heads, dk = w.d_key, hk = heads * dk;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Tensor q = dense_forward(x, w.wq, w.bq);
  Tensor k = dense_forward(x, w.wk, Tensor({hk}));
  Tensor v = dense_forward(x, w.wv, w.bv);
  Tensor attn({groups, heads, n, n});
  Tensor concat({rows, hk});
  std::vector<double> scores(n);

  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t h = 0; h < heads; ++h) {
      double* a = attn.data() + ((g * heads + h) * n) * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = q.data() + (g * n + i) * hk + h * dk;
        double m = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = k.data() + (g * n + j) * hk + h * dk;
          double s = 0.0;
          for (std::size_t t = 0; t < dk; ++t) s += qi[t] * kj[t];
          scores[j] = s * scale;
          m = std::max(m, scores[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          scores[j] = std::exp(scores[j] - m);
          total += scores[j];
        }
        double* out = concat.data() + (g * n + i) * hk + h * dk;
        for (std::size_t j = 0; j < n; ++j) {
          const double p = scores[j] / total;
          a[i * n + j] = p;
          const double* vj = v.data() + (g * n + j) * hk + h * dk;
          for (std::size_t t = 0; t < dk; ++t) out[t] += p * vj[t];
        }
      }
    }

  Tensor y = dense_forward(concat, w.wo, w.bo);
  if (cache) {
    *cache = MhaCache{n, std::move(q), std::move(k), std::move(v), std::move(attn),
                      std::move(concat)};
  }
  return y;
}

MhaGrads mha_backward(const Tensor& x, const MhaWeights& w, const MhaCache& cache,
                      const Tensor& dy) {
  const std::size_t rows = x.dim(0), n = cache.seq_len, groups = rows / n;
  const std::size_t heads = w.heads, dk = w.d_key, hk = heads * dk;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  require_same_shape(x, dy, "mha_backward");

  MhaGrads g;
  DenseGrads out = dense_backward(cache.concat, w.wo, dy);
  g.dwo = std::move(out.dw);
  g.dbo = std::move(out.db);
  const Tensor& dconcat = out.dx;

  Tensor dq({rows, hk}), dk_t({rows, hk}), dv({rows, hk});
  std::vector<double> da(n), ds(n);
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t h = 0; h < heads; ++h) {
      const double* a = cache.attn.data() + ((gi * heads + h) * n) * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double* dout = dconcat.data() + (gi * n + i) * hk + h * dk;
        // dA[i, j] = dO_i . V_j ; dV_j += A[i, j] dO_i
        double row_dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double* vj = cache.v.data() + (gi * n + j) * hk + h * dk;
          double* dvj = dv.data() + (gi * n + j) * hk + h * dk;
          double s = 0.0;
          for (std::size_t t = 0; t < dk; ++t) {
            s += dout[t] * vj[t];
            dvj[t] += a[i * n + j] * dout[t];
          }
          da[j] = s;
          row_dot += s * a[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) ds[j] = a[i * n + j] * (da[j] - row_dot) * scale;
        const double* qi = cache.q.data() + (gi * n + i) * hk + h * dk;
        double* dqi = dq.data() + (gi * n + i) * hk + h * dk;
        for (std::size_t j = 0; j < n; ++j) {
          if (ds[j] == 0.0) continue;
          const double* kj = cache.k.data() + (gi * n + j) * hk + h * dk;
          double* dkj = dk_t.data() + (gi * n + j) * hk + h * dk;
          for (std::size_t t = 0; t < dk; ++t) {
            dqi[t] += ds[j] * kj[t];
            dkj[t] += ds[j] * qi[t];
          }
        }
      }
    }

  DenseGrads gq = dense_backward(x, w.wq, dq);
  DenseGrads gk = dense_backward(x, w.wk, dk_t);
  DenseGrads gv = dense_backward(x, w.wv, dv);
  g.dx = gq.dx;
  g.dx += gk.dx;
  g.dx += gv.dx;
  g.dwq = std::move(gq.dw);
  g.dbq = std::move(gq.db);
  g.dwk = std::move(gk.dw);
  g.dwv = std::move(gv.dw);
  g.dbv = std::move(gv.db);
  return g;
}

// ---- pooling -----------------------------------------------------------------

Tensor mean_pool(const Tensor& x, std::size_t n) {
  if (x.rank() != 2 || n == 0 || x.dim(0) % n != 0) {
    fail(ErrorKind::dimension, "mean_pool of " + shape_string(x.shape()) + " over groups of " +
                                   std::to_string(n));
  }
  const std::size_t groups = x.dim(0) / n, d = x.dim(1);
  Tensor y({groups, d});
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) y[g * d + j] += x[(g * n + i) * d + j];
  y *= 1.0 / static_cast<double>(n);
  return y;
}

Tensor mean_pool_backward(const Tensor& dy, std::size_t n) {
  const std::size_t groups = dy.dim(0), d = dy.dim(1);
  Tensor dx({groups * n, d});
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) dx[(g * n + i) * d + j] = dy[g * d + j] * inv;
  return dx;
}

}  // namespace mfr
