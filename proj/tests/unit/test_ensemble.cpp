#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <set>
#include <tuple>

#include "mfr/ensemble.hpp"
#include "mfr/error.hpp"

using namespace mfr;

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

std::vector<double> peaked(std::size_t classes, std::size_t at, double p) {
  std::vector<double> v(classes, (1.0 - p) / static_cast<double>(classes - 1));
  v[at] = p;
  return v;
}

// Orders every class by (votes desc, summed probability desc, index asc).
// Summed probability only matters between classes tied on votes, so ranking
// all classes by the full key picks the same winner.
std::size_t oracle_vote(const std::vector<VoteRecord>& rs) {
  const std::size_t c = rs[0].probs.size();
  std::vector<std::tuple<long, double, long>> keys;
  for (std::size_t k = 0; k < c; ++k) {
    long votes = 0;
    double sum = 0.0;
    for (const auto& r : rs) {
      votes += r.argmax == k;
      sum += r.probs[k];
    }
    keys.emplace_back(-votes, -sum, static_cast<long>(k));
  }
  return static_cast<std::size_t>(std::get<2>(*std::min_element(keys.begin(), keys.end())));
}

std::vector<VoteRecord> random_votes(Rng& rng, std::size_t members, std::size_t classes) {
  std::vector<VoteRecord> rs;
  for (std::size_t m = 0; m < members; ++m) {
    // Coarse integer weights make exact probability ties common.
    std::vector<double> w(classes);
    for (auto& x : w) x = static_cast<double>(rng.uniform_index(4));
    w[rng.uniform_index(classes)] += 1.0;
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& x : w) x /= total;
    rs.push_back(make_vote("m" + std::to_string(m), w));
  }
  return rs;
}

}  // namespace

TEST_CASE("make_vote takes the lowest index among equal maxima") {
  CHECK(make_vote("a", {0.2, 0.4, 0.4}).argmax == 1);
  CHECK(make_vote("a", {0.5, 0.5}).argmax == 0);
}

TEST_CASE("majority_vote examples") {
  SUBCASE("strict majority") {
    std::vector<VoteRecord> rs;
    for (std::size_t c : {3, 3, 7, 3}) rs.push_back(make_vote("m", peaked(10, c, 0.9)));
    auto r = majority_vote(rs);
    CHECK(r.cls == 3);
    CHECK(r.diagnostics.path == TieBreak::none);
    CHECK(r.diagnostics.counts[3] == 3);
  }
  SUBCASE("vote tie decided by summed probability") {
    auto probs = [](double p2, double p5) {
      std::vector<double> v(10, (1.0 - p2 - p5) / 8.0);
      v[2] = p2;
      v[5] = p5;
      return v;
    };
    std::vector<VoteRecord> rs{make_vote("a", probs(0.5, 0.45)), make_vote("b", probs(0.5, 0.45)),
                               make_vote("c", probs(0.3, 0.45)), make_vote("d", probs(0.3, 0.45))};
    CHECK(rs[0].argmax == 2);
    CHECK(rs[2].argmax == 5);
    auto r = majority_vote(rs);
    CHECK(r.cls == 5);
    CHECK(r.diagnostics.path == TieBreak::probability);
    CHECK(r.diagnostics.tied == std::vector<std::size_t>{2, 5});
    CHECK(r.diagnostics.tied_prob_sums[0] == doctest::Approx(1.6));
    CHECK(r.diagnostics.tied_prob_sums[1] == doctest::Approx(1.8));
  }
  SUBCASE("full tie falls back to the lowest index") {
    std::vector<VoteRecord> rs{make_vote("a", {0.6, 0.4}), make_vote("b", {0.4, 0.6})};
    auto r = majority_vote(rs);
    CHECK(r.cls == 0);
    CHECK(r.diagnostics.path == TieBreak::index);
  }
  SUBCASE("errors") {
    std::vector<VoteRecord> rs{make_vote("a", {0.6, 0.4}), make_vote("b", {0.2, 0.3, 0.5})};
    CHECK(kind_of([&] { majority_vote(rs); }) == ErrorKind::dimension);
    CHECK(kind_of([] { majority_vote({}); }) == ErrorKind::empty_input);
  }
}

TEST_CASE("majority_vote agrees with the brute-force oracle") {
  Rng rng(2024);
  std::size_t probability_path = 0, index_path = 0;
  for (int i = 0; i < 10000; ++i) {
    auto rs = random_votes(rng, 4, 10);
    auto r = majority_vote(rs);
    CHECK(r.cls == oracle_vote(rs));
    const auto scores = vote_scores(rs);
    CHECK(make_vote("scores", scores).argmax == r.cls);
    probability_path += r.diagnostics.path == TieBreak::probability;
    index_path += r.diagnostics.path == TieBreak::index;
  }
  // Both tie-break stages are actually exercised.
  CHECK(probability_path > 100);
  CHECK(index_path > 10);
}

TEST_CASE("majority_vote properties") {
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    auto rs = random_votes(rng, 2 + rng.uniform_index(5), 2 + rng.uniform_index(6));
    const auto r = majority_vote(rs);

    auto shuffled = rs;
    const auto perm = permutation(rs.size(), rng);
    for (std::size_t k = 0; k < rs.size(); ++k) shuffled[k] = rs[perm[k]];
    CHECK(majority_vote(shuffled).cls == r.cls);

    const auto& counts = r.diagnostics.counts;
    const std::size_t top = *std::max_element(counts.begin(), counts.end());
    if (2 * top > rs.size()) {
      // Strict majority: scrambling the probabilities cannot change the outcome.
      auto scrambled = rs;
      for (auto& v : scrambled) {
        std::reverse(v.probs.begin(), v.probs.end());
      }
      CHECK(majority_vote(scrambled).cls == r.cls);
    }
    if (r.diagnostics.path == TieBreak::none) {
      // Identical rescaling (then renormalisation) of every member keeps argmaxes.
      auto scaled = rs;
      for (auto& v : scaled) {
        for (auto& p : v.probs) p = p * 3.0;
        const double s = std::accumulate(v.probs.begin(), v.probs.end(), 0.0);
        for (auto& p : v.probs) p /= s;
      }
      CHECK(majority_vote(scaled).cls == r.cls);
    }
  }
}

// ---- folds -------------------------------------------------------------------------

TEST_CASE("make_folds examples") {
  auto folds = make_folds(100, 4, 0.1, 3);
  REQUIRE(folds.size() == 4);
  std::set<std::size_t> all_val;
  for (const auto& f : folds) {
    CHECK(f.val.size() == 10);
    CHECK(f.train.size() == 90);
    for (auto v : f.val) CHECK(all_val.insert(v).second);
    std::set<std::size_t> both(f.train.begin(), f.train.end());
    both.insert(f.val.begin(), f.val.end());
    CHECK(both.size() == 100);
  }
  CHECK(kind_of([] { make_folds(100, 4, 0.3, 3); }) == ErrorKind::config);
  CHECK(kind_of([] { make_folds(100, 1, 0.3, 3); }) == ErrorKind::config);
  auto again = make_folds(100, 4, 0.1, 3);
  for (std::size_t i = 0; i < 4; ++i) CHECK(again[i].val == folds[i].val);
}

TEST_CASE("validation folds are pairwise disjoint") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.uniform_index(6);
    const double frac = rng.uniform(0.01, 1.0 / static_cast<double>(k));
    const std::size_t pool = 20 + rng.uniform_index(400);
    if (std::floor(frac * pool) < 1) continue;
    auto folds = make_folds(pool, k, frac, rng.next_u64());
    std::set<std::size_t> seen;
    for (const auto& f : folds) {
      for (auto v : f.val) CHECK(seen.insert(v).second);
      CHECK(f.train.size() + f.val.size() == pool);
    }
  }
}

TEST_CASE("manifest folds keep the vocabulary") {
  std::vector<SampleRecord> rs;
  for (int i = 0; i < 20; ++i) rs.push_back({"r" + std::to_string(i), "", i < 10 ? "a" : "b", false});
  auto m = make_manifest(rs);
  auto folds = make_folds(m, 2, 0.25, 1);
  CHECK(folds[0].second.size() == 5);
  CHECK(folds[1].first.vocabulary == m.vocabulary);
}

// ---- ensemble_predict --------------------------------------------------------------

TEST_CASE("ensemble_predict examples") {
  Model head = build_head_classifier({6, 4}, Rng(3));
  Rng rng(4);
  Tensor x({10, 6});
  for (auto& v : x.values()) v = rng.normal();

  SUBCASE("identical members reproduce the member's argmax") {
    std::vector<const Model*> members(4, &head);
    std::vector<Tensor> inputs(4, x);
    auto pred = ensemble_predict(members, inputs);
    CHECK(pred.classes == argmax_rows(head.infer(x)));
    auto threaded = ensemble_predict(members, inputs, {}, 4);
    CHECK(threaded.classes == pred.classes);
    CHECK(pred.votes[0].size() == 4);
  }
  SUBCASE("mixed modalities must receive matching inputs") {
    ViTConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.d_model = 4;
    cfg.num_blocks = 1;
    cfg.num_heads = 1;
    cfg.d_key = 2;
    cfg.head_units = {4};
    cfg.num_classes = 4;
    Model vit = build_vit(cfg);
    std::vector<const Model*> members{&head, &vit};
    Tensor images({10, 4, 4, 1}, 0.5);
    std::vector<Tensor> good{x, images};
    CHECK(ensemble_predict(members, good).classes.size() == 10);
    std::vector<Tensor> swapped{images, x};
    CHECK(kind_of([&] { ensemble_predict(members, swapped); }) == ErrorKind::config);
  }
  SUBCASE("vocabulary mismatch") {
    Model other = build_head_classifier({6, 5});
    std::vector<const Model*> members{&head, &other};
    std::vector<Tensor> inputs{x, x};
    CHECK(kind_of([&] { ensemble_predict(members, inputs); }) == ErrorKind::config);
    Model renamed = head;
    renamed.set_labels({"a", "b", "c", "d"});
    members = {&head, &renamed};
    CHECK(kind_of([&] { ensemble_predict(members, inputs); }) == ErrorKind::config);
  }
}

TEST_CASE("independent members: majority voting lifts accuracy") {
  LiftResult r = simulate_lift({4, 3, 2000, 0.7, 777});
  for (double a : r.member_accuracy) CHECK(a == doctest::Approx(0.7).epsilon(0.05));
  CHECK(r.ensemble_accuracy > r.mean_member_accuracy);
  // Analytic expectation for this rule: P(>= 3 right) + P(2 right, split
  // wrongs) + half of P(2 right, same wrong) = 0.6517 + 0.1323 + 0.0662.
  CHECK(r.ensemble_accuracy == doctest::Approx(0.8502).epsilon(0.03));
  // Frozen regression values for this seed.
  CHECK(r.ensemble_accuracy == 1698.0 / 2000.0);
  CHECK(r.mean_member_accuracy == doctest::Approx(0.690625).epsilon(1e-12));
  LiftResult again = simulate_lift({4, 3, 2000, 0.7, 777});
  CHECK(again.ensemble_accuracy == r.ensemble_accuracy);
}
