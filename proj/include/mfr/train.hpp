#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "mfr/adam.hpp"
#include "mfr/model.hpp"

namespace mfr {

// Samples stacked along axis 0 with one class index per sample.
struct Dataset {
  Tensor inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
};

struct Batch {
  Tensor inputs;
  std::vector<std::size_t> labels;
};

// Consecutive chunks of `order`. A trailing chunk of one sample is folded
// into the previous chunk so that batch statistics always see >= 2 samples.
std::vector<Batch> make_batches(const Dataset& data, std::span<const std::size_t> order,
                                std::size_t batch_size);

// Optional per-batch input transform (augmentation), applied in train mode.
using BatchTransform = std::function<Tensor(const Tensor& inputs, Rng& rng)>;

/// One optimisation pass over `batches` in the given order. Returns the mean
/// per-batch loss. The model must be in train mode.
double train_epoch(Model& model, std::span<const Batch> batches, AdamState& optimizer, Rng& rng,
                   const BatchTransform& transform = {});

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  // Stop once this many epochs pass without a strictly better val top-1.
  std::size_t patience = 5;
  BatchTransform augment;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_top1 = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_top1 = 0.0;
};

/// Trains with a fresh shuffle per epoch, evaluates val top-1 after every
/// epoch and leaves the model holding the best-epoch weights in eval mode.
History fit(Model& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
            Rng& rng);

// Eval-mode softmax probabilities, computed in chunks.
Tensor predict_probs(const Model& model, const Tensor& inputs, std::size_t chunk = 256);
double top1_accuracy(const Model& model, const Dataset& data);

}  // namespace mfr
