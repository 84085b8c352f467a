#include "mfr/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

#include "mfr/error.hpp"
#include "mfr/train.hpp"

namespace mfr {

VoteRecord make_vote(std::string member, std::vector<double> probs) {
  if (probs.empty()) fail(ErrorKind::dimension, "empty probability vector");
  const auto best = std::max_element(probs.begin(), probs.end());  // first maximum
  const auto idx = static_cast<std::size_t>(best - probs.begin());
  return {std::move(member), idx, std::move(probs)};
}

VoteResult majority_vote(std::span<const VoteRecord> records) {
  if (records.empty()) fail(ErrorKind::empty_input, "majority_vote needs at least one record");
  const std::size_t classes = records[0].probs.size();
  for (const auto& r : records) {
    if (r.probs.size() != classes) {
      fail(ErrorKind::dimension, "member '" + r.member + "' reports " +
                                     std::to_string(r.probs.size()) + " classes, expected " +
                                     std::to_string(classes));
    }
    if (r.argmax >= classes) fail(ErrorKind::range, "vote outside the class range");
  }
  VoteResult out;
  auto& d = out.diagnostics;
  d.counts.assign(classes, 0);
  for (const auto& r : records) ++d.counts[r.argmax];
  const std::size_t top = *std::max_element(d.counts.begin(), d.counts.end());
  for (std::size_t c = 0; c < classes; ++c) {
    if (d.counts[c] == top) d.tied.push_back(c);
  }
  if (d.tied.size() == 1) {
    out.cls = d.tied[0];
    return out;
  }
  for (auto c : d.tied) {
    double s = 0.0;
    for (const auto& r : records) s += r.probs[c];
    d.tied_prob_sums.push_back(s);
  }
  const double best = *std::max_element(d.tied_prob_sums.begin(), d.tied_prob_sums.end());
  std::size_t winners = 0;
  for (std::size_t i = 0; i < d.tied.size(); ++i) {
    if (d.tied_prob_sums[i] == best) {
      if (winners++ == 0) out.cls = d.tied[i];
    }
  }
  d.path = winners == 1 ? TieBreak::probability : TieBreak::index;
  return out;
}

std::vector<double> vote_scores(std::span<const VoteRecord> records) {
  const auto result = majority_vote(records);  // validates the records
  const std::size_t classes = records[0].probs.size();
  std::vector<double> sums(classes, 0.0);
  for (const auto& r : records)
    for (std::size_t c = 0; c < classes; ++c) sums[c] += r.probs[c];
  std::vector<std::size_t> order(classes);
  std::iota(order.begin(), order.end(), 0);
  const auto& counts = result.diagnostics.counts;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return sums[a] > sums[b];
  });
  const double total = static_cast<double>(classes * (classes + 1) / 2);
  std::vector<double> score(classes);
  for (std::size_t r = 0; r < classes; ++r) {
    score[order[r]] = static_cast<double>(classes - r) / total;
  }
  return score;
}

std::vector<Fold> make_folds(std::size_t pool, std::size_t members, double val_fraction,
                             std::uint64_t seed) {
  if (members < 2) fail(ErrorKind::config, "an ensemble needs at least 2 members");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    fail(ErrorKind::config, "val_fraction must lie in (0, 1)");
  }
  if (static_cast<double>(members) * val_fraction > 1.0 + 1e-12) {
    fail(ErrorKind::config, std::to_string(members) + " folds of " + std::to_string(val_fraction) +
                                " exceed the training pool");
  }
  const auto fold_size =
      static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(pool)));
  if (fold_size == 0) fail(ErrorKind::config, "validation folds would be empty");
  Rng rng(seed, 0);
  const auto perm = permutation(pool, rng);
  std::vector<Fold> folds(members);
  for (std::size_t m = 0; m < members; ++m) {
    std::vector<char> in_val(pool, 0);
    for (std::size_t i = m * fold_size; i < (m + 1) * fold_size; ++i) in_val[perm[i]] = 1;
    for (std::size_t i = 0; i < pool; ++i) (in_val[i] ? folds[m].val : folds[m].train).push_back(i);
  }
  return folds;
}

std::vector<std::pair<DatasetManifest, DatasetManifest>> make_folds(
    const DatasetManifest& pool, std::size_t members, double val_fraction, std::uint64_t seed) {
  std::vector<std::pair<DatasetManifest, DatasetManifest>> out;
  for (const auto& f : make_folds(pool.size(), members, val_fraction, seed)) {
    out.emplace_back(subset(pool, f.train), subset(pool, f.val));
  }
  return out;
}

EnsemblePrediction ensemble_predict(std::span<const Model* const> members,
                                    std::span<const Tensor> inputs,
                                    std::span<const std::string> names, std::size_t jobs) {
  if (members.size() < 2) fail(ErrorKind::config, "an ensemble needs at least 2 members");
  if (inputs.size() != members.size()) {
    fail(ErrorKind::config, "expected one input tensor per member");
  }
  if (!names.empty() && names.size() != members.size()) {
    fail(ErrorKind::config, "expected one name per member");
  }
  const Model& first = *members[0];
  const std::size_t n = inputs[0].rank() > 0 ? inputs[0].dim(0) : 0;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const Model& model = *members[m];
    if (model.num_classes() != first.num_classes() || model.labels() != first.labels()) {
      fail(ErrorKind::config, "ensemble members disagree on the class vocabulary");
    }
    Shape expect{n};
    expect.insert(expect.end(), model.sample_shape().begin(), model.sample_shape().end());
    if (inputs[m].shape() != expect) {
      fail(ErrorKind::config, "member " + std::to_string(m) + " expects inputs " +
                                  shape_string(expect) + ", got " +
                                  shape_string(inputs[m].shape()));
    }
  }
  if (n == 0) fail(ErrorKind::empty_input, "no samples to predict");

  std::vector<Tensor> probs(members.size());
  auto run = [&](std::size_t m) { probs[m] = predict_probs(*members[m], inputs[m]); };
  jobs = std::clamp<std::size_t>(jobs, 1, members.size());
  if (jobs == 1) {
    for (std::size_t m = 0; m < members.size(); ++m) run(m);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < jobs; ++t) {
      workers.emplace_back([&] {
        for (std::size_t m = next++; m < members.size(); m = next++) run(m);
      });
    }
    for (auto& w : workers) w.join();
  }

  EnsemblePrediction out;
  const std::size_t c = first.num_classes();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<VoteRecord> votes;
    for (std::size_t m = 0; m < members.size(); ++m) {
      std::string name = names.empty() ? "member" + std::to_string(m) : names[m];
      votes.push_back(make_vote(std::move(name), std::vector<double>(probs[m].data() + i * c,
                                                                     probs[m].data() + (i + 1) * c)));
    }
    VoteResult r = majority_vote(votes);
    out.classes.push_back(r.cls);
    out.votes.push_back(std::move(votes));
    out.diagnostics.push_back(std::move(r.diagnostics));
  }
  return out;
}

LiftResult simulate_lift(const LiftScenario& s) {
  if (s.members < 2 || s.classes < 2 || s.samples == 0) {
    fail(ErrorKind::config, "lift scenario needs >= 2 members, >= 2 classes and samples");
  }
  if (!(s.accuracy >= 0.0 && s.accuracy <= 1.0)) fail(ErrorKind::config, "accuracy in [0, 1]");
  const Rng root(s.seed);
  Rng truth = root.derive(0);
  std::vector<Rng> streams;
  for (std::size_t m = 0; m < s.members; ++m) streams.push_back(root.derive(m + 1));

  LiftResult out;
  out.member_accuracy.assign(s.members, 0.0);
  std::size_t ensemble_hits = 0;
  const double rest = 0.4 / static_cast<double>(s.classes - 1);
  for (std::size_t i = 0; i < s.samples; ++i) {
    const std::size_t label = truth.uniform_index(s.classes);
    std::vector<VoteRecord> votes;
    for (std::size_t m = 0; m < s.members; ++m) {
      std::size_t vote = label;
      if (!(streams[m].uniform() < s.accuracy)) {
        vote = (label + 1 + streams[m].uniform_index(s.classes - 1)) % s.classes;
      }
      std::vector<double> p(s.classes, rest);
      p[vote] = 0.6;
      out.member_accuracy[m] += vote == label;
      votes.push_back(make_vote("sim" + std::to_string(m), std::move(p)));
    }
    ensemble_hits += majority_vote(votes).cls == label;
  }
  const double n = static_cast<double>(s.samples);
  for (auto& a : out.member_accuracy) {
    a /= n;
    out.mean_member_accuracy += a / static_cast<double>(s.members);
  }
  out.ensemble_accuracy = static_cast<double>(ensemble_hits) / n;
  return out;
}

}  // namespace mfr
