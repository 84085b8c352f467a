#include "mfr/train.hpp"

#include <algorithm>

#include "mfr/error.hpp"

namespace mfr {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.inputs = gather_rows(inputs, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels.at(i));
  return out;
}

std::vector<Batch> make_batches(const Dataset& data, std::span<const std::size_t> order,
                                std::size_t batch_size) {
  if (batch_size == 0) fail(ErrorKind::config, "batch size must be positive");
  std::vector<std::vector<std::size_t>> chunks;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    chunks.emplace_back(order.begin() + i, order.begin() + end);
  }
  if (chunks.size() > 1 && chunks.back().size() == 1) {
    chunks[chunks.size() - 2].push_back(chunks.back().front());
    chunks.pop_back();
  }
  std::vector<Batch> batches;
  for (const auto& c : chunks) {
    Dataset d = data.subset(c);
    batches.push_back(Batch{std::move(d.inputs), std::move(d.labels)});
  }
  return batches;
}

double train_epoch(Model& model, std::span<const Batch> batches, AdamState& optimizer, Rng& rng,
                   const BatchTransform& transform) {
  if (batches.empty()) fail(ErrorKind::empty_input, "train_epoch needs at least one batch");
  if (model.mode() != Mode::train) fail(ErrorKind::config, "train_epoch needs a train-mode model");
  double total = 0.0;
  for (const auto& batch : batches) {
    model.parameters().zero_grad();
    Tensor logits = transform ? model.forward(transform(batch.inputs, rng), rng)
                              : model.forward(batch.inputs, rng);
    CrossEntropy ce = softmax_cross_entropy(logits, batch.labels);
    model.backward(softmax_cross_entropy_backward(ce.probs, batch.labels));
    adam_step(model.parameters().all(), optimizer);
    total += ce.loss;
  }
  return total / static_cast<double>(batches.size());
}

Tensor predict_probs(const Model& model, const Tensor& inputs, std::size_t chunk) {
  const std::size_t n = inputs.dim(0);
  Tensor out({n, model.num_classes()});
  for (std::size_t i = 0; i < n; i += chunk) {
    const std::size_t count = std::min(chunk, n - i);
    Tensor p = softmax_rows(model.infer(inputs.slice_rows(i, count)));
    std::copy(p.data(), p.data() + p.size(), out.data() + i * model.num_classes());
  }
  return out;
}

double top1_accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) fail(ErrorKind::empty_input, "accuracy of an empty dataset");
  auto pred = argmax_rows(predict_probs(model, data.inputs));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

History fit(Model& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
            Rng& rng) {
  if (train.size() == 0) fail(ErrorKind::empty_input, "fit needs a non-empty training set");
  if (val.size() == 0) fail(ErrorKind::empty_input, "fit needs a non-empty validation set");
  if (cfg.epochs == 0) fail(ErrorKind::config, "fit needs at least one epoch");
  for (const auto* set : {&train, &val}) {
    for (auto l : set->labels) {
      if (l >= model.num_classes()) {
        fail(ErrorKind::label, "label " + std::to_string(l) + " exceeds model output size " +
                                   std::to_string(model.num_classes()));
      }
    }
  }

  AdamState optimizer{cfg.adam, 0, {}, {}};
  History history;
  std::vector<Tensor> best = model.parameters().snapshot();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model.set_mode(Mode::train);
    auto order = permutation(train.size(), rng);
    auto batches = make_batches(train, order, cfg.batch_size);
    const double loss = train_epoch(model, batches, optimizer, rng, cfg.augment);
    model.set_mode(Mode::eval);
    const double acc = top1_accuracy(model, val);
    history.epochs.push_back({epoch, loss, acc});
    if (history.best_epoch == 0 || acc > history.best_val_top1) {
      history.best_epoch = epoch;
      history.best_val_top1 = acc;
      best = model.parameters().snapshot();
    } else if (epoch - history.best_epoch > cfg.patience) {
      break;
    }
  }
  model.parameters().restore(best);
  model.set_mode(Mode::eval);
  return history;
}

}  // namespace mfr
