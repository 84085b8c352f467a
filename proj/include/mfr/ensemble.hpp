#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mfr/manifest.hpp"
#include "mfr/model.hpp"
#include "mfr/tensor.hpp"

namespace mfr {

struct VoteRecord {
  std::string member;
  std::size_t argmax = 0;
  std::vector<double> probs;
};

// Argmax with ties going to the lowest class index.
VoteRecord make_vote(std::string member, std::vector<double> probs);

enum class TieBreak { none, probability, index };

struct VoteDiagnostics {
  std::vector<std::size_t> counts;      // argmax votes per class
  std::vector<std::size_t> tied;        // classes sharing the top count
  std::vector<double> tied_prob_sums;   // summed probability per tied class
  TieBreak path = TieBreak::none;
};

struct VoteResult {
  std::size_t cls = 0;
  VoteDiagnostics diagnostics;
};

/// Most argmax votes wins; a tie on vote count goes to the tied class with
/// the highest probability summed over all members, and any remaining tie to
/// the lowest class index.
VoteResult majority_vote(std::span<const VoteRecord> records);

/// Rank-based class scores for top-k over an ensemble: classes are ordered
/// by the voting rule (votes, then summed probability, then index) and the
/// class at rank r of C gets (C - r + 1) / (C (C + 1) / 2). The argmax is the
/// majority_vote winner and all scores are distinct.
std::vector<double> vote_scores(std::span<const VoteRecord> records);

struct Fold {
  std::vector<std::size_t> train;  // ascending pool indices
  std::vector<std::size_t> val;    // ascending pool indices
};

/// K disjoint validation subsets of floor(val_fraction * pool) indices each,
/// cut from one seeded permutation; member i trains on everything else.
std::vector<Fold> make_folds(std::size_t pool, std::size_t members, double val_fraction,
                             std::uint64_t seed);
std::vector<std::pair<DatasetManifest, DatasetManifest>> make_folds(
    const DatasetManifest& pool, std::size_t members, double val_fraction, std::uint64_t seed);

struct EnsemblePrediction {
  std::vector<std::size_t> classes;  // per sample
  std::vector<std::vector<VoteRecord>> votes;  // per sample, per member
  std::vector<VoteDiagnostics> diagnostics;    // per sample
};

/// Runs every member in eval mode on its own input tensor (inputs[i] feeds
/// members[i]; all share the sample count) and votes per sample. Members must
/// agree on the class vocabulary and their inputs must match their sample
/// shapes, otherwise a config error is raised. `jobs` threads run members
/// concurrently; results are independent of it.
EnsemblePrediction ensemble_predict(std::span<const Model* const> members,
                                    std::span<const Tensor> inputs,
                                    std::span<const std::string> names = {},
                                    std::size_t jobs = 1);

struct LiftScenario {
  std::size_t members = 4;
  std::size_t classes = 3;
  std::size_t samples = 2000;
  double accuracy = 0.7;
  std::uint64_t seed = 0;
};

struct LiftResult {
  std::vector<double> member_accuracy;
  double mean_member_accuracy = 0.0;
  double ensemble_accuracy = 0.0;
};

/// Simulated members with independent errors: member m is correct on a sample
/// with probability `accuracy` (its own derived stream), otherwise votes for a
/// uniformly chosen wrong class. Probability vectors put 0.6 on the voted
/// class and spread the rest evenly.
LiftResult simulate_lift(const LiftScenario& scenario);

}  // namespace mfr
