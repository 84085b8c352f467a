#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mfr/rng.hpp"
#include "mfr/tensor.hpp"

namespace mfr {

enum class Mode { train, eval };

// ---- dense -----------------------------------------------------------------

// y = x W + b over the last axis of x; leading axes are treated as rows.
Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b);

struct DenseGrads {
  Tensor dx, dw, db;
};
DenseGrads dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy);

// ---- normalisation -----------------------------------------------------------

struct NormCache {
  Tensor xhat;                  // normalised input, same shape as x
  std::vector<double> inv_std;  // one per normalised slice
};

struct NormGrads {
  Tensor dx, dgamma, dbeta;
};

// Per last-axis slice: (x - mean) / sqrt(popvar + eps) * gamma + beta.
Tensor layernorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                         NormCache* cache = nullptr);
NormGrads layernorm_backward(const NormCache& cache, const Tensor& gamma, const Tensor& dy);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

// Keras convention: running = momentum * running + (1 - momentum) * batch.
// Train mode normalises with the batch's population statistics and updates
// `state` when it is non-null; eval mode reads `state` only.
Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         BatchNormState* state, Mode mode, double momentum, double eps,
                         NormCache* cache = nullptr);
Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const BatchNormState& state, double eps, NormCache* cache = nullptr);
// Train-mode gradient (batch statistics depend on x).
NormGrads batchnorm_backward(const NormCache& cache, const Tensor& gamma, const Tensor& dy);
// Eval-mode gradient (statistics are constants).
NormGrads batchnorm_eval_backward(const NormCache& cache, const Tensor& gamma,
                                  const Tensor& dy);

// ---- dropout / activations ---------------------------------------------------

struct DropoutResult {
  Tensor output;
  Tensor mask;  // 0 for dropped entries, 1/(1-p) for kept ones
};

// Inverted dropout. Eval mode and p == 0 are identities and draw nothing from
// the generator; otherwise one uniform is drawn per element in row-major order.
DropoutResult dropout_forward(const Tensor& x, double p, Mode mode, Rng& rng);
Tensor dropout_backward(const Tensor& dy, const Tensor& mask);

// Exact x * Phi(x) using erf.
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& dy);

// ---- classification loss -----------------------------------------------------

Tensor softmax_rows(const Tensor& logits);

struct CrossEntropy {
  double loss = 0.0;  // mean over the batch
  Tensor probs;
};
CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
// (probs - onehot) / batch
Tensor softmax_cross_entropy_backward(const Tensor& probs, std::span<const std::size_t> labels);

// ---- patches -----------------------------------------------------------------

// [H, W, C] -> [(H/P)(W/P), P*P*C]; patches in row-major grid order, each
// flattened in (row, col, channel) order.
Tensor patchify(const Tensor& image, std::size_t patch);
Tensor unpatchify(const Tensor& patches, std::size_t height, std::size_t width,
                  std::size_t channels, std::size_t patch);
// [B, H, W, C] -> [B * n, P*P*C], image b owning rows [b*n, (b+1)*n).
Tensor patchify_batch(const Tensor& images, std::size_t patch);
Tensor unpatchify_batch(const Tensor& patches, const Shape& image_shape, std::size_t patch);

// ---- attention ---------------------------------------------------------------

// Projections are packed per head: head h owns columns [h*d_key, (h+1)*d_key)
// of wq/wk/wv and rows [h*d_key, (h+1)*d_key) of wo. Keys carry no bias: a
// key bias adds the same q.b to every score of a softmax row and so has no
// effect on the output.
struct MhaWeights {
  std::size_t heads = 1;
  std::size_t d_key = 1;
  Tensor wq, bq;  // [d_model, heads*d_key], [heads*d_key]
  Tensor wk;
  Tensor wv, bv;
  Tensor wo, bo;  // [heads*d_key, d_model], [d_model]
};

void validate(const MhaWeights& w, std::size_t d_model);

struct MhaCache {
  std::size_t seq_len = 0;
  Tensor q, k, v;   // [rows, heads*d_key]
  Tensor attn;      // [groups, heads, seq_len, seq_len]
  Tensor concat;    // [rows, heads*d_key]
};

// x is [groups * seq_len, d_model]; each group of seq_len consecutive rows
// is an independent sequence. seq_len == 0 means a single sequence.
Tensor mha_forward(const Tensor& x, const MhaWeights& w, std::size_t seq_len = 0,
                   MhaCache* cache = nullptr);

struct MhaGrads {
  Tensor dx;
  Tensor dwq, dbq, dwk, dwv, dbv, dwo, dbo;
};
MhaGrads mha_backward(const Tensor& x, const MhaWeights& w, const MhaCache& cache,
                      const Tensor& dy);

// ---- pooling -----------------------------------------------------------------

// [groups * n, d] -> [groups, d]
Tensor mean_pool(const Tensor& x, std::size_t n);
Tensor mean_pool_backward(const Tensor& dy, std::size_t n);

}  // namespace mfr
