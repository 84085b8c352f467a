#include "mfr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mfr/error.hpp"
#include "mfr/ops.hpp"
#include "mfr/rng.hpp"

namespace mfr {

double grad_check(const ScalarFn& loss, const GradientFn& analytic, std::vector<Tensor> inputs,
                  double h) {
  const std::vector<Tensor> grads = analytic(inputs);
  if (grads.size() != inputs.size()) {
    fail(ErrorKind::dimension, "analytic gradient count does not match input count");
  }
  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    require_same_shape(inputs[t], grads[t], "grad_check");
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double saved = inputs[t][i];
      inputs[t][i] = saved + h;
      const double up = loss(inputs);
      inputs[t][i] = saved - h;
      const double down = loss(inputs);
      inputs[t][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = grads[t][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

Tensor positive_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(0.5, 1.5);
  return t;
}

struct Case {
  std::string name;
  // Builds inputs and the scalar/gradient pair for one trial.
  std::function<double(Rng&, double)> run;
};

double check_projected(std::vector<Tensor> inputs, const Tensor& projection,
                       const std::function<Tensor(const std::vector<Tensor>&)>& forward,
                       const GradientFn& backward, double h) {
  ScalarFn loss = [&](const std::vector<Tensor>& in) { return dot(forward(in), projection); };
  return grad_check(loss, backward, std::move(inputs), h);
}

std::vector<Case> cases() {
  std::vector<Case> out;

  out.push_back({"dense", [](Rng& rng, double h) {
    Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 5}, rng),
           b = random_tensor({5}, rng), r = random_tensor({3, 5}, rng);
    auto fwd = [](const std::vector<Tensor>& in) { return dense_forward(in[0], in[1], in[2]); };
    auto bwd = [&](const std::vector<Tensor>& in) {
      auto g = dense_backward(in[0], in[1], r);
      return std::vector<Tensor>{g.dx, g.dw, g.db};
    };
    return check_projected({x, w, b}, r, fwd, bwd, h);
  }});

  out.push_back({"layernorm", [](Rng& rng, double h) {
    Tensor x = random_tensor({4, 6}, rng), g = positive_tensor({6}, rng),
           b = random_tensor({6}, rng), r = random_tensor({4, 6}, rng);
    auto fwd = [](const std::vector<Tensor>& in) {
      return layernorm_forward(in[0], in[1], in[2], 1e-5);
    };
    auto bwd = [&](const std::vector<Tensor>& in) {
      NormCache c;
      layernorm_forward(in[0], in[1], in[2], 1e-5, &c);
      auto gr = layernorm_backward(c, in[1], r);
      return std::vector<Tensor>{gr.dx, gr.dgamma, gr.dbeta};
    };
    return check_projected({x, g, b}, r, fwd, bwd, h);
  }});

  out.push_back({"batchnorm_train", [](Rng& rng, double h) {
    Tensor x = random_tensor({5, 3}, rng), g = positive_tensor({3}, rng),
           b = random_tensor({3}, rng), r = random_tensor({5, 3}, rng);
    auto fwd = [](const std::vector<Tensor>& in) {
      return batchnorm_forward(in[0], in[1], in[2], nullptr, Mode::train, 0.99, 1e-5);
    };
    auto bwd = [&](const std::vector<Tensor>& in) {
      NormCache c;
      batchnorm_forward(in[0], in[1], in[2], nullptr, Mode::train, 0.99, 1e-5, &c);
      auto gr = batchnorm_backward(c, in[1], r);
      return std::vector<Tensor>{gr.dx, gr.dgamma, gr.dbeta};
    };
    return check_projected({x, g, b}, r, fwd, bwd, h);
  }});

  out.push_back({"batchnorm_eval", [](Rng& rng, double h) {
    Tensor x = random_tensor({4, 3}, rng), g = positive_tensor({3}, rng),
           b = random_tensor({3}, rng), r = random_tensor({4, 3}, rng);
    BatchNormState st{random_tensor({3}, rng), positive_tensor({3}, rng)};
    auto fwd = [&](const std::vector<Tensor>& in) {
      return batchnorm_forward(in[0], in[1], in[2], st, 1e-5);
    };
    auto bwd = [&](const std::vector<Tensor>& in) {
      NormCache c;
      batchnorm_forward(in[0], in[1], in[2], st, 1e-5, &c);
      auto gr = batchnorm_eval_backward(c, in[1], r);
      return std::vector<Tensor>{gr.dx, gr.dgamma, gr.dbeta};
    };
    return check_projected({x, g, b}, r, fwd, bwd, h);
  }});

  out.push_back({"dropout", [](Rng& rng, double h) {
    Tensor x = random_tensor({4, 5}, rng), r = random_tensor({4, 5}, rng);
    Rng mask_rng = rng.derive(7);
    const Tensor mask = dropout_forward(x, 0.4, Mode::train, mask_rng).mask;
    // The mask is frozen: the loss is differentiated with the same mask.
    auto fwd = [&](const std::vector<Tensor>& in) {
      Tensor y = in[0];
      for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
      return y;
    };
    auto bwd = [&](const std::vector<Tensor>&) {
      return std::vector<Tensor>{dropout_backward(r, mask)};
    };
    return check_projected({x}, r, fwd, bwd, h);
  }});

  out.push_back({"gelu", [](Rng& rng, double h) {
    Tensor x = random_tensor({3, 7}, rng), r = random_tensor({3, 7}, rng);
    auto fwd = [](const std::vector<Tensor>& in) { return gelu(in[0]); };
    auto bwd = [&](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{gelu_backward(in[0], r)};
    };
    return check_projected({x}, r, fwd, bwd, h);
  }});

  out.push_back({"softmax_cross_entropy", [](Rng& rng, double h) {
    Tensor logits = random_tensor({4, 5}, rng, 2.0);
    std::vector<std::size_t> labels(4);
    for (auto& l : labels) l = rng.uniform_index(5);
    ScalarFn loss = [&](const std::vector<Tensor>& in) {
      return softmax_cross_entropy(in[0], labels).loss;
    };
    GradientFn grad = [&](const std::vector<Tensor>& in) {
      auto ce = softmax_cross_entropy(in[0], labels);
      return std::vector<Tensor>{softmax_cross_entropy_backward(ce.probs, labels)};
    };
    return grad_check(loss, grad, {logits}, h);
  }});

  out.push_back({"mha", [](Rng& rng, double h) {
    const std::size_t d = 4, heads = 2, dk = 3, n = 3, groups = 2;
    Tensor x = random_tensor({groups * n, d}, rng), r = random_tensor({groups * n, d}, rng);
    std::vector<Tensor> in{x,
                           random_tensor({d, heads * dk}, rng, 0.7), random_tensor({heads * dk}, rng),
                           random_tensor({d, heads * dk}, rng, 0.7),
                           random_tensor({d, heads * dk}, rng, 0.7), random_tensor({heads * dk}, rng),
                           random_tensor({heads * dk, d}, rng, 0.7), random_tensor({d}, rng)};
    auto weights = [&](const std::vector<Tensor>& v) {
      return MhaWeights{heads, dk, v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
    };
    auto fwd = [&](const std::vector<Tensor>& v) { return mha_forward(v[0], weights(v), n); };
    auto bwd = [&](const std::vector<Tensor>& v) {
      MhaCache c;
      auto w = weights(v);
      mha_forward(v[0], w, n, &c);
      auto g = mha_backward(v[0], w, c, r);
      return std::vector<Tensor>{g.dx, g.dwq, g.dbq, g.dwk, g.dwv, g.dbv, g.dwo, g.dbo};
    };
    return check_projected(in, r, fwd, bwd, h);
  }});

  out.push_back({"mean_pool", [](Rng& rng, double h) {
    Tensor x = random_tensor({6, 4}, rng), r = random_tensor({2, 4}, rng);
    auto fwd = [](const std::vector<Tensor>& in) { return mean_pool(in[0], 3); };
    auto bwd = [&](const std::vector<Tensor>&) {
      return std::vector<Tensor>{mean_pool_backward(r, 3)};
    };
    return check_projected({x}, r, fwd, bwd, h);
  }});

  return out;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(std::size_t trials, double h,
                                                std::uint64_t seed) {
  std::vector<GradCheckResult> results;
  Rng root(seed);
  std::uint64_t stream = 0;
  for (const auto& c : cases()) {
    GradCheckResult r{c.name, trials, 0.0};
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng = root.derive(stream++);
      r.max_error = std::max(r.max_error, c.run(rng, h));
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace mfr
