// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>

#include "mfr/checkpoint.hpp"
#include "mfr/cli.hpp"
#include "mfr/ensemble.hpp"
#include "mfr/eval.hpp"
#include "mfr/gradcheck.hpp"
#include "mfr/masker.hpp"

using namespace mfr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- 1 ----------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradient_suite(10, 1e-5, 2024);
  const double t = seconds_since(t0);
  double worst = 0.0;
  std::string worst_op;
  for (const auto& r : results) {
    if (r.trials != 10) return {false, r.op + " ran " + std::to_string(r.trials) + " trials"};
    if (r.max_error >= worst) {
      worst = r.max_error;
      worst_op = r.op;
    }
  }
  return {worst < 1e-4 && t < 30.0 && !results.empty(),
          std::to_string(results.size()) + " ops, worst " + worst_op + " " + fmt("%.2e", worst) +
              ", " + fmt("%.2f s", t)};
}

// ---- 2 ----------------------------------------------------------------------------

struct OverfitRun {
  std::size_t epochs = 0;
  double accuracy = 0.0;
  double seconds = 0.0;
  std::vector<Tensor> params;
};

OverfitRun overfit_once() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng data_rng(11);
  Dataset d = synth_images(8, 20, 16, 1, data_rng);
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.d_model = 32;
  c.num_blocks = 2;
  c.num_heads = 4;
  c.d_key = 8;
  c.head_units = {64, 32};
  c.num_classes = 8;
  Model m = build_vit(c, Rng(1));
  AdamState opt{AdamConfig{}, 0, {}, {}};
  Rng rng(2);
  OverfitRun run;
  for (std::size_t epoch = 1; epoch <= 200; ++epoch) {
    m.set_mode(Mode::train);
    const auto order = permutation(d.size(), rng);
    const auto batches = make_batches(d, order, 32);
    train_epoch(m, batches, opt, rng);
    m.set_mode(Mode::eval);
    run.epochs = epoch;
    run.accuracy = top1_accuracy(m, d);
    if (run.accuracy == 1.0) break;
  }
  run.params = m.parameters().snapshot();
  run.seconds = seconds_since(t0);
  return run;
}

Outcome vit_overfit() {
  const OverfitRun a = overfit_once();
  const OverfitRun b = overfit_once();
  bool same = a.epochs == b.epochs && a.params.size() == b.params.size();
  for (std::size_t i = 0; same && i < a.params.size(); ++i) {
    same = a.params[i].shape() == b.params[i].shape() &&
           std::equal(a.params[i].data(), a.params[i].data() + a.params[i].size(), b.params[i].data());
  }
  return {a.accuracy == 1.0 && a.seconds < 60.0 && b.seconds < 60.0 && same,
          "train top-1 " + fmt("%.4f", a.accuracy) + " after " + std::to_string(a.epochs) +
              " epochs, " + fmt("%.2f s", a.seconds) + " / " + fmt("%.2f s", b.seconds) +
              (same ? ", runs identical" : ", runs differ")};
}

// ---- 3 ----------------------------------------------------------------------------

Outcome head_sanity() {
  Rng rng(3);
  const auto recs = synth_embeddings(20, 50, 64, 6.0, 1.0, rng);
  auto [train_m, test_m] = split_dataset(embedding_manifest(recs), {0.5, 777});
  HeadClassifierConfig c;
  c.input_dim = 64;
  c.num_classes = 20;
  Model m = build_head_classifier(c, Rng(4));
  TrainConfig t;
  t.epochs = 100;
  t.patience = 100;
  Rng fit_rng(5);
  // Test top-1 is recorded after every epoch; training never sees the test half.
  const History h = fit(m, embedding_dataset(train_m, recs), embedding_dataset(test_m, recs), t, fit_rng);
  std::size_t first = 0;
  for (const auto& e : h.epochs) {
    if (e.val_top1 >= 0.99) {
      first = e.epoch;
      break;
    }
  }
  return {first != 0 && h.epochs.size() <= 100,
          "test top-1 " + fmt("%.4f", h.best_val_top1) + " on " + std::to_string(test_m.size()) +
              " samples, first >= 0.99 at epoch " + std::to_string(first) + ", final epoch " +
              fmt("%.4f", h.epochs.back().val_top1)};
}

// ---- 4 ----------------------------------------------------------------------------

// Ranks every class by (votes desc, summed probability desc, index asc).
std::size_t oracle_vote(const std::vector<VoteRecord>& rs) {
  std::vector<std::tuple<long, double, long>> keys;
  for (std::size_t k = 0; k < rs[0].probs.size(); ++k) {
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

Outcome voting_oracle() {
  Rng rng(404);
  std::size_t mismatches = 0, ties = 0;
  for (int s = 0; s < 10000; ++s) {
    std::vector<VoteRecord> rs;
    for (int m = 0; m < 4; ++m) {
      std::vector<double> w(10);
      for (auto& x : w) x = static_cast<double>(rng.uniform_index(4));
      w[rng.uniform_index(10)] += 1.0;
      const double total = std::accumulate(w.begin(), w.end(), 0.0);
      for (auto& x : w) x /= total;
      rs.push_back(make_vote("m" + std::to_string(m), w));
    }
    const VoteResult v = majority_vote(rs);
    mismatches += v.cls != oracle_vote(rs);
    ties += v.diagnostics.path != TieBreak::none;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in 10000 scenarios (" +
                               std::to_string(ties) + " tied)"};
}

// ---- 5 ----------------------------------------------------------------------------

Outcome ensemble_lift() {
  const LiftResult r = simulate_lift(LiftScenario{4, 3, 2000, 0.7, 777});
  const double golden = 1698.0 / 2000.0;
  return {r.ensemble_accuracy > r.mean_member_accuracy && r.ensemble_accuracy == golden,
          "ensemble " + fmt("%.4f", r.ensemble_accuracy) + " vs mean member " +
              fmt("%.6f", r.mean_member_accuracy) + " (golden " + fmt("%.4f", golden) + ")"};
}

// ---- 6 ----------------------------------------------------------------------------

Outcome warp_exactness() {
  Rng rng(606);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::array<Point, 3> s, d;
    do {
      for (auto& p : s) p = {rng.uniform(-200, 200), rng.uniform(-200, 200)};
    } while (triangle_area(s) < 1.0);
    for (auto& p : d) p = {rng.uniform(-200, 200), rng.uniform(-200, 200)};
    const Affine a = solve_affine(s, d);
    for (int k = 0; k < 3; ++k) {
      const Point q = a.apply(s[k]);
      worst = std::max(worst, std::hypot(q.x - d[k].x, q.y - d[k].y));
    }
  }

  const MaskTemplate tmpl = surgical_template();
  Raster face(160, 120);
  for (std::size_t i = 0; i < face.pixels.size(); ++i) {
    face.pixels[i] = i % 4 == 3 ? 255 : static_cast<std::uint8_t>(rng.uniform_index(256));
  }
  const std::size_t dx = 7, dy = 4;
  LandmarkSet moved = tmpl.anchors;
  for (auto& p : moved.points) p = {p.x + dx, p.y + dy};
  const Raster out = apply_mask(face, tmpl, moved);
  std::size_t opaque = 0, shift_errors = 0;
  for (std::size_t y = 0; y < tmpl.image.height; ++y)
    for (std::size_t x = 0; x < tmpl.image.width; ++x) {
      const auto* t = tmpl.image.at(x, y);
      if (t[3] != 255) continue;
      ++opaque;
      const auto* o = out.at(x + dx, y + dy);
      shift_errors += !std::equal(t, t + 4, o);
    }

  MaskTemplate clear = tmpl;
  for (std::size_t i = 3; i < clear.image.pixels.size(); i += 4) clear.image.pixels[i] = 0;
  const bool untouched = apply_mask(face, clear, moved) == face;

  return {worst < 1e-9 && opaque > 0 && shift_errors == 0 && untouched,
          "max residual " + fmt("%.2e px", worst) + ", " + std::to_string(shift_errors) + "/" +
              std::to_string(opaque) + " opaque pixels off, zero-alpha " +
              (untouched ? "bit-identical" : "modified")};
}

// ---- 7 ----------------------------------------------------------------------------

Outcome split_determinism() {
  constexpr std::uint64_t kTrainHash = 0x9f4c2221316f5b8cULL;
  constexpr std::uint64_t kTestHash = 0x1938c28625dea107ULL;
  std::uint64_t hashes[2][2];
  std::size_t sizes[2] = {0, 0};
  for (int rep = 0; rep < 2; ++rep) {
    Rng rng(rep == 0 ? 1 : 2);  // labels differ, ids and split do not
    auto [train, test] = split_dataset(synth_manifest(26466, 5749, rng), {0.95, 777});
    hashes[rep][0] = id_list_hash(train);
    hashes[rep][1] = id_list_hash(test);
    sizes[0] = train.size();
    sizes[1] = test.size();
  }
  const bool ok = sizes[0] == 25142 && sizes[1] == 1324 && hashes[0][0] == kTrainHash &&
                  hashes[0][1] == kTestHash && hashes[1][0] == kTrainHash && hashes[1][1] == kTestHash;
  char buf[96];
  std::snprintf(buf, sizeof buf, ", hashes %016llx / %016llx",
                static_cast<unsigned long long>(hashes[0][0]), static_cast<unsigned long long>(hashes[0][1]));
  return {ok, std::to_string(sizes[0]) + "/" + std::to_string(sizes[1]) + buf};
}

// ---- 8 ----------------------------------------------------------------------------

Outcome topk_properties() {
  Rng rng(808);
  std::size_t violations = 0, checks = 0;
  for (int s = 0; s < 1000; ++s) {
    const std::size_t c = 2 + rng.uniform_index(12);
    const std::size_t n = 1 + rng.uniform_index(30);
    PredictionSet p;
    for (std::size_t k = 0; k < c; ++k) p.classes.push_back("k" + std::to_string(k));
    std::vector<double> flat;
    std::vector<std::size_t> truth;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(c);
      for (auto& v : row) v = static_cast<double>(rng.uniform_index(5));
      const double sum = std::accumulate(row.begin(), row.end(), 0.0);
      for (auto& v : row) v = sum > 0 ? v / sum : 1.0 / double(c);
      flat.insert(flat.end(), row.begin(), row.end());
      truth.push_back(rng.uniform_index(c));
      p.ids.push_back("s" + std::to_string(i));
      p.labels.push_back(p.classes[truth.back()]);
    }
    p.probs = Tensor({n, c}, flat);
    double prev = 0.0;
    for (std::size_t k = 1; k <= c; ++k) {
      // Rank of the true class: one plus the count of classes that sort ahead
      // of it under (probability desc, index asc).
      std::size_t hits = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double pt = flat[i * c + truth[i]];
        std::size_t ahead = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const double pj = flat[i * c + j];
          ahead += pj > pt || (pj == pt && j < truth[i]);
        }
        hits += ahead < k;
      }
      const double a = topk_accuracy(p, k);
      violations += a != double(hits) / double(n) || a < prev;
      prev = a;
      ++checks;
    }
    violations += prev != 1.0;
  }
  return {violations == 0, std::to_string(violations) + " violations in " + std::to_string(checks) +
                               " (set, k) checks over 1000 sets"};
}

// ---- 9 ----------------------------------------------------------------------------

Tensor read_hex_block(std::istream& in, const std::string& tag) {
  std::string line;
  std::getline(in, line);
  std::istringstream head(line);
  std::string got;
  head >> got;
  if (got != tag) throw std::runtime_error("expected '" + tag + "' block, got '" + got + "'");
  Shape shape;
  for (std::size_t d; head >> d;) shape.push_back(d);
  const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  std::vector<double> values(count);
  for (auto& v : values) {
    std::string tok;
    in >> tok;
    v = std::strtod(tok.c_str(), nullptr);
  }
  std::getline(in, line);
  return Tensor(shape, std::move(values));
}

Outcome golden_checkpoint() {
  const fs::path dir = MFR_GOLDEN_DIR;
  std::string detail;
  bool ok = true;
  for (const char* name : {"vit", "head"}) {
    const Model m = load_model(dir / (std::string(name) + ".mfbc"));
    std::ifstream in(dir / (std::string(name) + ".logits"));
    if (!in) throw std::runtime_error("missing " + (dir / (std::string(name) + ".logits")).string());
    const Tensor inputs = read_hex_block(in, "inputs");
    const Tensor expected = read_hex_block(in, "logits");
    const Tensor got = m.infer(inputs);
    std::size_t diff = expected.size();
    if (got.shape() == expected.shape()) {
      diff = 0;
      for (std::size_t i = 0; i < got.size(); ++i) diff += got.data()[i] != expected.data()[i];
    }
    ok = ok && diff == 0;
    detail += std::string(detail.empty() ? "" : ", ") + name + " " + std::to_string(expected.size()) +
              " logits " + (diff == 0 ? "bit-exact" : std::to_string(diff) + " differ");
  }
  return {ok, detail};
}

// ---- 10 ---------------------------------------------------------------------------

Outcome report_format() {
  const fs::path dir = fs::temp_directory_path() / "mfr_acceptance_report";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(1010);
  std::vector<std::string> args{"mfr", "eval"};
  const auto& names = table_models();
  for (std::size_t m = 0; m < names.size(); ++m) {
    PredictionSet p;
    for (int k = 0; k < 7; ++k) p.classes.push_back("subject_" + std::to_string(k));
    std::vector<double> flat;
    for (int i = 0; i < 20; ++i) {
      p.ids.push_back("img_" + std::to_string(i));
      p.labels.push_back(p.classes[rng.uniform_index(7)]);
      std::vector<double> row(7);
      for (auto& v : row) v = rng.uniform(0.01, 1.0);
      const double sum = std::accumulate(row.begin(), row.end(), 0.0);
      for (auto v : row) flat.push_back(v / sum);
    }
    p.probs = Tensor({20, 7}, flat);
    const fs::path file = dir / ("pred" + std::to_string(m) + ".json");
    write_predictions(p, file);
    args.push_back("--pred");
    args.push_back(names[m] + "=" + file.string());
  }
  args.push_back("--out");
  args.push_back((dir / "report.json").string());
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != kExitOk) return {false, "eval exited " + std::to_string(code) + ": " + err.str()};

  std::ifstream in(dir / "report.json");
  const json report = json::parse(in);
  bool ok = report.at("columns") == json::array({"model", "top1", "top5"}) &&
            report.at("rows").size() == names.size();
  for (std::size_t m = 0; ok && m < names.size(); ++m) {
    const json& row = report["rows"][m];
    ok = row.size() == 3 && row.at("model") == names[m] && row.at("top1").is_number() &&
         row.at("top5").is_number() && row["top1"].get<double>() <= row["top5"].get<double>();
  }
  std::string listed;
  for (const auto& n : names) listed += (listed.empty() ? "" : ", ") + n;
  return {ok, "rows: " + listed};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"gradient suite", gradient_suite},
      {"toy transformer overfit", vit_overfit},
      {"head classifier sanity", head_sanity},
      {"voting oracle", voting_oracle},
      {"ensemble lift", ensemble_lift},
      {"warp exactness", warp_exactness},
      {"split determinism", split_determinism},
      {"top-k properties", topk_properties},
      {"checkpoint portability", golden_checkpoint},
      {"report format", report_format},
  };
  int failed = 0, n = 0;
  for (const auto& [name, run] : criteria) {
    ++n;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %-24s %s  %s\n", n, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", n - failed, n);
  return failed == 0 ? 0 : 1;
}
