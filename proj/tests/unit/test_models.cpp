#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mfr/checkpoint.hpp"
#include "mfr/error.hpp"
#include "mfr/gradcheck.hpp"
#include "mfr/model.hpp"
#include "mfr/train.hpp"

using namespace mfr;
namespace fs = std::filesystem;

namespace {

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an mfr::Error");
  return ErrorKind::data;
}

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

ViTConfig toy_vit() {
  ViTConfig c;
  c.image_size = 16;
  c.channels = 1;
  c.patch_size = 4;
  c.d_model = 32;
  c.num_blocks = 2;
  c.num_heads = 4;
  c.d_key = 8;
  c.head_units = {64, 32};
  c.num_classes = 8;
  return c;
}

ViTConfig tiny_vit() {
  ViTConfig c;
  c.image_size = 4;
  c.channels = 2;
  c.patch_size = 2;
  c.d_model = 6;
  c.num_blocks = 1;
  c.num_heads = 2;
  c.d_key = 3;
  c.head_units = {5, 4};
  c.num_classes = 3;
  return c;
}

// Gaussian blobs around well-separated class centres.
Dataset blobs(std::size_t classes, std::size_t per_class, std::size_t dim, Rng& rng) {
  Tensor centres = random_tensor({classes, dim}, rng, 3.0);
  Dataset d{Tensor({classes * per_class, dim}), {}};
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = c * per_class + i;
      for (std::size_t j = 0; j < dim; ++j) d.inputs.at(row, j) = centres.at(c, j) + 0.5 * rng.normal();
      d.labels.push_back(c);
    }
  return d;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("mfr_test_models_" + name);
}

}  // namespace

// ---- builders ------------------------------------------------------------------

TEST_CASE("build_head_classifier examples") {
  Model m = build_head_classifier({512, 10, 0.5});
  CHECK(m.parameters().trainable_count() == 6154);
  CHECK(parameter_count(HeadClassifierConfig{512, 10, 0.5}) == 6154);

  Model small = build_head_classifier({4, 2});
  CHECK(small.forward(Tensor({3, 4}, 0.5)).shape() == Shape{3, 2});

  CHECK(kind_of([] { build_head_classifier({4, 1}); }) == ErrorKind::config);
  CHECK(kind_of([] { build_head_classifier({4, 2, 1.0}); }) == ErrorKind::config);
}

TEST_CASE("build_vit examples") {
  Model m = build_vit(toy_vit());
  CHECK(m.forward(Tensor({5, 16, 16, 1}, 0.1)).shape() == Shape{5, 8});

  // Run the pipeline by hand up to the first attention output.
  const auto& root = dynamic_cast<const SequentialLayer&>(m.root());
  Pass pass{Mode::eval, nullptr, nullptr, &m.parameters(), nullptr};
  Tensor h = Tensor({1, 16, 16, 1}, 0.2);
  for (std::size_t i = 0; i < 3; ++i) h = root.children()[i]->forward(h, pass);
  const auto& block = dynamic_cast<const ResidualLayer&>(*root.children()[3]);
  const auto& attn_path = dynamic_cast<const SequentialLayer&>(block.inner());
  CHECK(attn_path.children()[1]->kind() == "mha");
  Tensor after_mha = attn_path.forward(h, pass);
  CHECK(after_mha.shape() == Shape{16, 32});

  ViTConfig bad = toy_vit();
  bad.patch_size = 3;
  CHECK(kind_of([&] { build_vit(bad); }) == ErrorKind::config);
  ViTConfig no_dmodel = toy_vit();
  no_dmodel.d_model = 0;
  CHECK(kind_of([&] { build_vit(no_dmodel); }) == ErrorKind::config);
}

TEST_CASE("parameter count closed forms match built models") {
  Rng rng(123);
  for (int trial = 0; trial < 3; ++trial) {
    HeadClassifierConfig h{1 + rng.uniform_index(40), 2 + rng.uniform_index(20), 0.5};
    CHECK(build_head_classifier(h).parameters().trainable_count() == parameter_count(h));

    ViTConfig v;
    v.patch_size = 1 + rng.uniform_index(3);
    v.image_size = v.patch_size * (1 + rng.uniform_index(3));
    v.channels = 1 + rng.uniform_index(3);
    v.d_model = 2 + rng.uniform_index(8);
    v.num_blocks = 1 + rng.uniform_index(3);
    v.num_heads = 1 + rng.uniform_index(3);
    v.d_key = 1 + rng.uniform_index(5);
    v.head_units = {1 + rng.uniform_index(9), 1 + rng.uniform_index(9), 1 + rng.uniform_index(9)};
    v.num_classes = 2 + rng.uniform_index(6);
    CHECK(build_vit(v).parameters().trainable_count() == parameter_count(v));
  }
  // Reference-table encoder on a 64px, 8px-patch input.
  ViTConfig reference;
  reference.image_size = 64;
  reference.patch_size = 8;
  reference.channels = 3;
  reference.d_model = 64;
  reference.num_classes = 10;
  CHECK(reference.num_blocks == 10);
  CHECK(reference.num_heads == 8);
  CHECK(reference.d_key == 64);
  CHECK(reference.encoder_dropout == 0.3);
  CHECK(reference.head_units == std::vector<std::size_t>{2048, 1024});
  CHECK(reference.head_dropout == 0.6);
}

TEST_CASE("every model parameter name is referenced exactly once") {
  for (const Model& m : {build_vit(toy_vit()), build_head_classifier({8, 3})}) {
    std::vector<std::size_t> ids;
    m.root().collect_parameter_ids(ids);
    std::sort(ids.begin(), ids.end());
    CHECK(ids.size() == m.parameters().size());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
  }
}

// ---- forward -------------------------------------------------------------------

TEST_CASE("model_forward examples") {
  Rng rng(7);
  Model m = build_vit(toy_vit(), Rng(1));
  Tensor x = random_tensor({3, 16, 16, 1}, rng);
  CHECK(m.forward(x) == m.forward(x));
  CHECK(m.infer(x) == m.forward(x));

  ViTConfig no_drop = toy_vit();
  no_drop.encoder_dropout = 0.0;
  no_drop.head_dropout = 0.0;
  Model a = build_vit(no_drop, Rng(2));
  Tensor eval_logits = a.forward(x);
  a.set_mode(Mode::train);
  Rng r(3);
  CHECK(a.forward(x, r) == eval_logits);
  CHECK(r.counter() == 0);

  CHECK(kind_of([&] { m.forward(Tensor({2, 8, 8, 1})); }) == ErrorKind::dimension);
  m.set_mode(Mode::train);
  CHECK(kind_of([&] { m.forward(x); }) == ErrorKind::config);
}

TEST_CASE("eval forward consumes no randomness, train forward does") {
  Model m = build_head_classifier({4, 3, 0.5}, Rng(4));
  Rng rng(9);
  m.forward(Tensor({4, 4}, 1.0), rng);
  CHECK(rng.counter() == 0);
  m.set_mode(Mode::train);
  m.forward(Tensor({4, 4}, 1.0), rng);
  CHECK(rng.counter() == 16);
}

TEST_CASE("zeroed output projections make encoder blocks the identity") {
  Model m = build_vit(tiny_vit(), Rng(5));
  auto& p = m.parameters();
  for (const char* name : {"block0.mha.wo", "block0.mha.bo", "block0.mlp.fc2.w", "block0.mlp.fc2.b"}) {
    p.get(name).value.fill(0.0);
  }
  const auto& root = dynamic_cast<const SequentialLayer&>(m.root());
  Pass pass{Mode::eval, nullptr, nullptr, &p, nullptr};
  Rng rng(6);
  Tensor x = random_tensor({2, 4, 4, 2}, rng);
  Tensor h = x;
  for (std::size_t i = 0; i < 3; ++i) h = root.children()[i]->forward(h, pass);
  Tensor after = root.children()[4]->forward(root.children()[3]->forward(h, pass), pass);
  CHECK(after == h);

  // With the patch projection zeroed too, pixel content cannot reach the
  // logits at all: permuting pixels within each patch leaves them unchanged.
  p.get("patch_embed.w").value.fill(0.0);
  Tensor permuted = x;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t py = 0; py < 2; ++py)
      for (std::size_t px = 0; px < 2; ++px)
        for (std::size_t c = 0; c < 2; ++c) {
          auto at = [&](std::size_t y, std::size_t xx) -> double& {
            return permuted[((b * 4 + py * 2 + y) * 4 + px * 2 + xx) * 2 + c];
          };
          std::swap(at(0, 0), at(1, 1));
          std::swap(at(0, 1), at(1, 0));
        }
  CHECK(!(permuted == x));
  CHECK(m.infer(permuted) == m.infer(x));
}

// ---- gradients through whole models ------------------------------------------------

namespace {

double model_grad_error(Model m, const Tensor& x, const std::vector<std::size_t>& labels,
                        Mode mode) {
  m.set_mode(mode);
  std::vector<std::size_t> ids;
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    if (!m.parameters()[i].trainable) continue;
    ids.push_back(i);
    inputs.push_back(m.parameters()[i].value);
  }
  const auto buffers = m.parameters().snapshot();
  auto load = [&](const std::vector<Tensor>& in) {
    m.parameters().restore(buffers);
    for (std::size_t k = 0; k < ids.size(); ++k) m.parameters()[ids[k]].value = in[k];
  };
  ScalarFn loss = [&](const std::vector<Tensor>& in) {
    load(in);
    Rng rng(77);  // identical dropout masks on every evaluation
    return softmax_cross_entropy(m.forward(x, rng), labels).loss;
  };
  GradientFn grad = [&](const std::vector<Tensor>& in) {
    load(in);
    m.parameters().zero_grad();
    Rng rng(77);
    auto ce = softmax_cross_entropy(m.forward(x, rng), labels);
    m.backward(softmax_cross_entropy_backward(ce.probs, labels));
    std::vector<Tensor> out;
    for (auto id : ids) out.push_back(m.parameters()[id].grad);
    return out;
  };
  return grad_check(loss, grad, inputs, 1e-5);
}

}  // namespace

TEST_CASE("head classifier backward matches finite differences") {
  Rng rng(10);
  Tensor x = random_tensor({5, 4}, rng);
  std::vector<std::size_t> labels{0, 1, 2, 1, 0};
  Model m = build_head_classifier({4, 3, 0.3}, Rng(11));
  CHECK(model_grad_error(m, x, labels, Mode::train) < 1e-4);
  CHECK(model_grad_error(m, x, labels, Mode::eval) < 1e-4);
}

TEST_CASE("vit backward matches finite differences") {
  Rng rng(12);
  ViTConfig cfg = tiny_vit();
  cfg.encoder_dropout = 0.2;
  cfg.head_dropout = 0.2;
  Tensor x = random_tensor({2, 4, 4, 2}, rng);
  std::vector<std::size_t> labels{2, 0};
  Model m = build_vit(cfg, Rng(13));
  CHECK(model_grad_error(m, x, labels, Mode::eval) < 1e-4);
  CHECK(model_grad_error(m, x, labels, Mode::train) < 1e-4);
}

// ---- training ------------------------------------------------------------------

TEST_CASE("train_epoch examples") {
  Rng data_rng(20);
  Dataset d = blobs(2, 20, 4, data_rng);
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  auto batches = make_batches(d, order, 8);

  SUBCASE("zero learning rate leaves trainable parameters bit-identical") {
    Model m = build_head_classifier({4, 2}, Rng(1));
    m.set_mode(Mode::train);
    auto before = m.parameters().snapshot();
    AdamState opt{AdamConfig{0.0}, 0, {}, {}};
    Rng rng(2);
    train_epoch(m, batches, opt, rng);
    for (std::size_t i = 0; i < before.size(); ++i) {
      if (m.parameters()[i].trainable) CHECK(m.parameters()[i].value == before[i]);
    }
  }

  SUBCASE("loss decreases on a separable set and runs are reproducible") {
    auto run = [&] {
      Model m = build_head_classifier({4, 2}, Rng(1));
      m.set_mode(Mode::train);
      AdamState opt;
      Rng rng(3);
      std::vector<double> losses;
      for (int e = 0; e < 50; ++e) losses.push_back(train_epoch(m, batches, opt, rng));
      return losses;
    };
    auto a = run();
    CHECK(a.back() < a.front());
    CHECK(a == run());
  }

  SUBCASE("errors") {
    Model m = build_head_classifier({4, 2});
    AdamState opt;
    Rng rng(1);
    m.set_mode(Mode::train);
    CHECK(kind_of([&] { train_epoch(m, std::vector<Batch>{}, opt, rng); }) ==
          ErrorKind::empty_input);
  }
}

TEST_CASE("make_batches never leaves a single-sample batch") {
  Dataset d{Tensor({9, 2}), std::vector<std::size_t>(9, 0)};
  std::vector<std::size_t> order{0, 1, 2, 3, 4, 5, 6, 7, 8};
  auto b = make_batches(d, order, 4);
  CHECK(b.size() == 2);
  CHECK(b.back().labels.size() == 5);
}

TEST_CASE("fit examples") {
  Rng data_rng(30);
  Dataset train = blobs(4, 30, 8, data_rng);
  Dataset val = blobs(4, 10, 8, data_rng);
  // Re-draw val around the same centres: rebuild from one pool instead.
  Rng pool_rng(31);
  Dataset pool = blobs(4, 40, 8, pool_rng);
  std::vector<std::size_t> tr, va;
  for (std::size_t i = 0; i < pool.size(); ++i) (i % 4 == 0 ? va : tr).push_back(i);
  train = pool.subset(tr);
  val = pool.subset(va);

  SUBCASE("patience 0 and one epoch gives a single record") {
    Model m = build_head_classifier({8, 4});
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.patience = 0;
    Rng rng(1);
    CHECK(fit(m, train, val, cfg, rng).epochs.size() == 1);
  }

  SUBCASE("separable data reaches high val accuracy, deterministically") {
    auto run = [&] {
      Model m = build_head_classifier({8, 4}, Rng(5));
      TrainConfig cfg;
      cfg.epochs = 60;
      cfg.patience = 60;
      cfg.adam.lr = 1e-2;
      Rng rng(6);
      auto h = fit(m, train, val, cfg, rng);
      CHECK(top1_accuracy(m, val) == h.best_val_top1);
      CHECK(m.mode() == Mode::eval);
      return h;
    };
    History a = run();
    CHECK(a.best_val_top1 >= 0.99);
    History b = run();
    REQUIRE(a.epochs.size() == b.epochs.size());
    for (std::size_t i = 0; i < a.epochs.size(); ++i) {
      CHECK(a.epochs[i].train_loss == b.epochs[i].train_loss);
      CHECK(a.epochs[i].val_top1 == b.epochs[i].val_top1);
    }
  }

  SUBCASE("errors") {
    Model m = build_head_classifier({8, 4});
    Rng rng(1);
    CHECK(kind_of([&] { fit(m, Dataset{}, val, TrainConfig{}, rng); }) == ErrorKind::empty_input);
    Dataset bad = val;
    bad.labels[0] = 9;
    CHECK(kind_of([&] { fit(m, train, bad, TrainConfig{}, rng); }) == ErrorKind::label);
  }
}

// ---- checkpoints ---------------------------------------------------------------

TEST_CASE("checkpoint roundtrip reproduces logits bit-exactly") {
  Model m = build_vit(toy_vit(), Rng(40));
  m.set_labels({"a", "b", "c", "d", "e", "f", "g", "h"});
  m.set_input_scale(1.0 / 255.0);
  Rng rng(41);
  Tensor x = random_tensor({2, 16, 16, 1}, rng);
  const auto path = temp_path("roundtrip.mfbc");
  save_model(m, path);
  Model loaded = load_model(path);
  CHECK(loaded.infer(x) == m.infer(x));
  CHECK(loaded.labels() == m.labels());
  CHECK(loaded.input_scale() == 1.0 / 255.0);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(loaded.parameters()[i].value == m.parameters()[i].value);
  }
  CHECK(encode_checkpoint(loaded.parameters()) == encode_checkpoint(m.parameters()));
}

TEST_CASE("checkpoint corruption is detected") {
  Model m = build_head_classifier({3, 2}, Rng(1));
  auto bytes = encode_checkpoint(m.parameters());

  SUBCASE("layout") {
    CHECK(bytes[0] == 'M');
    CHECK(bytes[3] == 'C');
    CHECK(bytes[4] == 1);  // version, little-endian
    CHECK(bytes[8] == m.parameters().size());
  }
  SUBCASE("truncated") {
    auto cut = bytes;
    cut.resize(cut.size() - 3);
    CHECK(kind_of([&] { decode_checkpoint(cut); }) == ErrorKind::checkpoint_format);
  }
  SUBCASE("declared count too large") {
    auto more = bytes;
    more[8] += 1;
    CHECK(kind_of([&] { decode_checkpoint(more); }) == ErrorKind::checkpoint_format);
  }
  SUBCASE("declared count too small") {
    auto fewer = bytes;
    fewer[8] -= 1;
    CHECK(kind_of([&] { decode_checkpoint(fewer); }) == ErrorKind::checkpoint_format);
  }
  SUBCASE("bad magic and version") {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK(kind_of([&] { decode_checkpoint(bad); }) == ErrorKind::checkpoint_format);
    bad = bytes;
    bad[4] = 2;
    CHECK(kind_of([&] { decode_checkpoint(bad); }) == ErrorKind::checkpoint_format);
  }
  SUBCASE("missing file") {
    CHECK(kind_of([] { read_checkpoint("/nonexistent/model.mfbc"); }) == ErrorKind::io);
  }
  SUBCASE("architecture mismatch") {
    const auto path = temp_path("mismatch.mfbc");
    save_checkpoint(m.parameters(), path);
    Model other = build_head_classifier({4, 2});
    CHECK(kind_of([&] { load_checkpoint_into(other, path); }) == ErrorKind::checkpoint_format);
  }
}

TEST_CASE("model config JSON rejects unknown keys") {
  auto j = to_json(ModelSpec{toy_vit()});
  auto spec = model_spec_from_json(j);
  CHECK(std::get<ViTConfig>(spec).head_units == toy_vit().head_units);
  j["surprise"] = 1;
  CHECK(kind_of([&] { model_spec_from_json(j); }) == ErrorKind::config);
  CHECK(kind_of([&] { model_spec_from_json(nlohmann::json{{"type", "cnn"}}); }) ==
        ErrorKind::config);
}
