#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "mfr/checkpoint.hpp"
#include "mfr/cli.hpp"
#include "mfr/ensemble.hpp"
#include "mfr/error.hpp"
#include "mfr/eval.hpp"
#include "mfr/gradcheck.hpp"
#include "mfr/masker.hpp"

namespace mfr {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class Log {
 public:
  explicit Log(std::ostream& err) : err_(err) {}
  void info(const std::string& msg) { write("info", msg); }
  void warn(const std::string& msg) { write("warn", msg); }
  void error(const std::string& msg) { write("error", msg); }

 private:
  void write(const char* level, const std::string& msg) {
    std::lock_guard<std::mutex> lock(mu_);
    err_ << "mfr " << level << ": " << msg << '\n';
  }
  std::ostream& err_;
  std::mutex mu_;
};

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) fail(ErrorKind::config, "no " + what + " given");
  if (!fs::exists(p)) fail(ErrorKind::io, what + " not found: " + p.string());
}

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Every input path a config names must exist, whether or not the command uses it.
void validate_inputs(const RunConfig& c) {
  const std::pair<const fs::path*, const char*> inputs[] = {
      {&c.data.manifest, "data.manifest"},
      {&c.data.train_manifest, "data.train_manifest"},
      {&c.data.val_manifest, "data.val_manifest"},
      {&c.data.test_manifest, "data.test_manifest"},
      {&c.data.embeddings, "data.embeddings"},
      {&c.data.image_root, "data.image_root"},
      {&c.masker.template_png, "masker.template"},
      {&c.masker.anchors, "masker.anchors"},
      {&c.masker.landmarks_dir, "masker.landmarks_dir"},
  };
  for (const auto& [path, key] : inputs) {
    if (!path->empty()) require_file(*path, key);
  }
  for (const auto& m : c.ensemble.members) {
    if (!m.embeddings.empty()) require_file(m.embeddings, "embeddings of member '" + m.name + "'");
  }
}

RunConfig load_checked(const std::string& path) {
  require_file(path, "config");
  RunConfig c = load_run_config(path);
  validate_inputs(c);
  return c;
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix);
}

// ---- shared model plumbing ---------------------------------------------------------

struct InputSource {
  fs::path embeddings;  // head models
  fs::path image_root;  // image models
};

fs::path image_root_for(const DataSection& d, const fs::path& manifest) {
  return d.image_root.empty() ? manifest.parent_path() : d.image_root;
}

/// Completes a model JSON from the data: num_classes always comes from the
/// vocabulary, a head's input_dim from the embeddings when omitted.
ModelSpec resolve_spec(json model, std::size_t classes, std::size_t embedding_dim) {
  if (model.contains("num_classes") && model["num_classes"].is_number_unsigned() &&
      model["num_classes"].get<std::size_t>() != classes) {
    fail(ErrorKind::config, "model num_classes " + model["num_classes"].dump() +
                                " disagrees with the " + std::to_string(classes) +
                                "-label vocabulary");
  }
  model["num_classes"] = classes;
  if (model.value("type", "") == "head") {
    if (!model.contains("input_dim")) model["input_dim"] = embedding_dim;
    if (model["input_dim"].is_number_unsigned() &&
        model["input_dim"].get<std::size_t>() != embedding_dim) {
      fail(ErrorKind::config, "head input_dim " + model["input_dim"].dump() +
                                  " disagrees with embedding dimension " +
                                  std::to_string(embedding_dim));
    }
  }
  return model_spec_from_json(model);
}

bool is_head(const json& model) { return model.value("type", "") == "head"; }

// Raw inputs (embeddings, or 0..255 images) for the manifest's records.
Dataset load_inputs(const ModelSpec& spec, const DatasetManifest& m, const InputSource& src,
                    const std::vector<EmbeddingRecord>* embeddings) {
  if (std::holds_alternative<HeadClassifierConfig>(spec)) {
    return embedding_dataset(m, *embeddings);
  }
  const auto& v = std::get<ViTConfig>(spec);
  Dataset d;
  d.inputs = load_images(m, v.image_size, v.channels, src.image_root);
  d.labels = m.class_indices();
  return d;
}

json history_json(const History& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_top1", e.val_top1}});
  }
  return {{"epochs", epochs}, {"best_epoch", h.best_epoch}, {"best_val_top1", h.best_val_top1}};
}

/// Builds and fits one model. Initialisation, shuffling, dropout and
/// augmentation all draw from streams derived from `seed`.
Model train_model(const json& model_json, const DatasetManifest& train,
                  const DatasetManifest& val, const InputSource& src,
                  const TrainingSection& t, std::uint64_t seed, History& history, Log& log,
                  const std::string& tag) {
  std::vector<EmbeddingRecord> embeddings;
  std::size_t dim = 0;
  if (is_head(model_json)) {
    embeddings = load_embeddings(src.embeddings);
    if (embeddings.empty()) fail(ErrorKind::empty_input, src.embeddings.string() + " is empty");
    dim = embeddings[0].values.size();
  }
  const ModelSpec spec = resolve_spec(model_json, train.vocabulary.size(), dim);
  Dataset tr = load_inputs(spec, train, src, &embeddings);
  Dataset va = load_inputs(spec, val, src, &embeddings);

  const Rng root(seed);
  Model model = build_model(spec, root.derive(1));
  model.set_labels(train.vocabulary.labels());
  TrainConfig cfg;
  cfg.adam = t.adam;
  cfg.batch_size = t.batch_size;
  cfg.epochs = t.epochs;
  cfg.patience = t.patience;
  if (model.is_vit()) {
    model.set_input_scale(t.augment.pixel_rescale);
    va.inputs = rescale(va.inputs, t.augment.pixel_rescale);
    const AugmentationSpec aug = t.augment;
    cfg.augment = [aug](const Tensor& x, Rng& rng) { return augment_batch(x, aug, rng); };
  }
  log.info(tag + ": training on " + std::to_string(tr.size()) + " samples, validating on " +
           std::to_string(va.size()) + ", " + std::to_string(std::visit([](const auto& s) { return parameter_count(s); }, spec)) +
           " parameters");
  Rng rng = root.derive(2);
  history = fit(model, tr, va, cfg, rng);
  log.info(tag + ": best val top-1 " + std::to_string(history.best_val_top1) + " at epoch " +
           std::to_string(history.best_epoch) + " of " + std::to_string(history.epochs.size()));
  return model;
}

PredictionSet predict_set(const Model& model, const DatasetManifest& m, const InputSource& src) {
  std::vector<EmbeddingRecord> embeddings;
  if (!model.is_vit()) embeddings = load_embeddings(src.embeddings);
  Dataset d = load_inputs(model.spec(), m, src, &embeddings);
  PredictionSet p;
  p.classes = model.labels();
  if (p.classes.empty()) {
    for (std::size_t c = 0; c < model.num_classes(); ++c) p.classes.push_back(std::to_string(c));
  }
  for (const auto& r : m.records) {
    p.ids.push_back(r.id);
    p.labels.push_back(r.label);
  }
  p.probs = predict_probs(model, rescale(d.inputs, model.input_scale()));
  return p;
}

// Train / validation manifests for `train` following the data section.
std::pair<DatasetManifest, DatasetManifest> train_val(const RunConfig& c, Log& log) {
  DatasetManifest pool;
  if (!c.data.train_manifest.empty()) {
    pool = load_manifest(c.data.train_manifest);
  } else {
    require_file(c.data.manifest, "data.manifest");
    pool = split_dataset(load_manifest(c.data.manifest), c.data.split).first;
  }
  if (!c.data.val_manifest.empty()) {
    DatasetManifest val = load_manifest(c.data.val_manifest);
    for (const auto& l : val.vocabulary.labels()) pool.vocabulary.add(l);
    val.vocabulary = pool.vocabulary;
    return {pool, val};
  }
  auto parts = split_dataset(pool, {1.0 - c.training.val_fraction, c.training.seed});
  log.info("held out " + std::to_string(parts.second.size()) + " of " +
           std::to_string(pool.size()) + " training records for validation");
  return parts;
}

// ---- subcommands -------------------------------------------------------------------

struct SplitArgs {
  std::string manifest, train_out, test_out;
  double fraction = 0.95;
  std::uint64_t seed = 777;
};

int run_split(const SplitArgs& a, std::ostream& out, Log& log) {
  require_file(a.manifest, "manifest");
  const fs::path in(a.manifest);
  const fs::path train_path = a.train_out.empty() ? with_suffix(in, ".train.csv") : fs::path(a.train_out);
  const fs::path test_path = a.test_out.empty() ? with_suffix(in, ".test.csv") : fs::path(a.test_out);
  auto [train, test] = split_dataset(load_manifest(in), {a.fraction, a.seed});
  save_manifest(train, train_path);
  save_manifest(test, test_path);
  log.info("split " + std::to_string(train.size() + test.size()) + " records with seed " +
           std::to_string(a.seed));
  out << "train " << train.size() << ' ' << train_path.string() << '\n'
      << "test " << test.size() << ' ' << test_path.string() << '\n';
  return kExitOk;
}

struct MaskArgs {
  std::string config, manifest, landmarks, out_dir, out_manifest, template_png, anchors;
  std::size_t jobs = 1;
  bool combine = false;
};

int run_mask(MaskArgs a, std::ostream& out, Log& log) {
  if (!a.config.empty()) {
    RunConfig c = load_checked(a.config);
    if (a.landmarks.empty()) a.landmarks = c.masker.landmarks_dir.string();
    if (a.template_png.empty()) a.template_png = c.masker.template_png.string();
    if (a.anchors.empty()) a.anchors = c.masker.anchors.string();
    if (a.manifest.empty()) a.manifest = c.data.manifest.string();
  }
  require_file(a.manifest, "manifest");
  require_file(a.landmarks, "landmarks directory");
  if (a.out_dir.empty()) fail(ErrorKind::config, "--out-dir is required");
  MaskTemplate tmpl = surgical_template();
  if (!a.template_png.empty() || !a.anchors.empty()) {
    require_file(a.template_png, "template image");
    require_file(a.anchors, "template anchors");
    tmpl = MaskTemplate{read_png(a.template_png), read_landmarks(a.anchors)};
    validate(tmpl);
  }
  const fs::path manifest_path(a.manifest);
  const fs::path out_manifest = a.out_manifest.empty() ? fs::path(a.out_dir) / "masked.csv"
                                                       : fs::path(a.out_manifest);
  DatasetManifest in = load_manifest(manifest_path);
  MaskRun run = mask_dataset(in, a.landmarks, tmpl, a.out_dir, manifest_path.parent_path(), a.jobs);

  // Sources relative to the written manifest.
  const fs::path base = fs::absolute(out_manifest).parent_path();
  std::vector<SampleRecord> records;
  if (a.combine) {
    for (auto r : in.records) {
      fs::path src = r.source;
      if (src.is_relative()) src = manifest_path.parent_path() / src;
      r.source = fs::relative(fs::absolute(src), base).generic_string();
      records.push_back(std::move(r));
    }
  }
  for (auto r : run.manifest.records) {
    r.source = fs::relative(fs::absolute(r.source), base).generic_string();
    records.push_back(std::move(r));
  }
  if (out_manifest.has_parent_path()) fs::create_directories(out_manifest.parent_path());
  save_manifest(make_manifest(std::move(records), in.vocabulary), out_manifest);

  json failures = json::array();
  for (const auto& f : run.failures) {
    log.warn("skipped " + f.id + ": " + f.reason);
    failures.push_back({{"id", f.id}, {"reason", f.reason}});
  }
  write_json(failures, with_suffix(out_manifest, ".failures.json"));
  out << "masked " << run.manifest.size() << " failed " << run.failures.size() << ' '
      << out_manifest.string() << '\n';
  return kExitOk;
}

struct SynthArgs {
  std::string kind, out, out_dir, manifest_out;
  std::size_t classes = 20, per_class = 50, dim = 64, size = 64, channels = 1, records = 26466,
              subjects = 5749;
  double separation = 6.0, noise = 1.0;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a, std::ostream& out, Log& log) {
  Rng rng(a.seed);
  if (a.kind == "embeddings") {
    if (a.out.empty()) fail(ErrorKind::config, "--out is required");
    auto recs = synth_embeddings(a.classes, a.per_class, a.dim, a.separation, a.noise, rng);
    save_embeddings(recs, a.out);
    const fs::path m = a.manifest_out.empty() ? with_suffix(a.out, ".manifest.csv") : fs::path(a.manifest_out);
    save_manifest(embedding_manifest(recs), m);
    out << "embeddings " << recs.size() << ' ' << a.out << '\n' << "manifest " << m.string() << '\n';
  } else if (a.kind == "images") {
    if (a.out_dir.empty()) fail(ErrorKind::config, "--out-dir is required");
    fs::create_directories(fs::path(a.out_dir) / "images");
    Dataset d = synth_images(a.classes, a.per_class, a.size, a.channels, rng);
    std::vector<SampleRecord> recs;
    const std::size_t stride = a.size * a.size * a.channels;
    for (std::size_t i = 0; i < d.size(); ++i) {
      Raster r(a.size, a.size, 255);
      for (std::size_t p = 0; p < a.size * a.size; ++p)
        for (std::size_t k = 0; k < 3; ++k) {
          const double v = d.inputs[i * stride + p * a.channels + (a.channels == 1 ? 0 : k % a.channels)];
          r.pixels[p * 4 + k] = static_cast<std::uint8_t>(std::lround(255.0 * v));
        }
      const std::string id = "pattern_" + std::to_string(i);
      write_png(r, fs::path(a.out_dir) / "images" / (id + ".png"));
      recs.push_back({id, "images/" + id + ".png", "class_" + std::to_string(d.labels[i]), false});
    }
    const fs::path m = fs::path(a.out_dir) / "manifest.csv";
    save_manifest(make_manifest(recs), m);
    out << "images " << recs.size() << ' ' << m.string() << '\n';
  } else if (a.kind == "faces") {
    if (a.out_dir.empty()) fail(ErrorKind::config, "--out-dir is required");
    const fs::path dir(a.out_dir);
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "landmarks");
    std::vector<SampleRecord> recs;
    for (std::size_t s = 0; s < a.classes; ++s) {
      const Rng subject = Rng(a.seed).derive(s);
      for (std::size_t i = 0; i < a.per_class; ++i) {
        SynthFace f = synth_face(a.size, subject, rng);
        const std::string id = "face_" + std::to_string(s) + "_" + std::to_string(i);
        write_png(f.image, dir / "images" / (id + ".png"));
        write_landmarks(f.landmarks, dir / "landmarks" / (id + ".json"));
        recs.push_back({id, "images/" + id + ".png", "subject_" + std::to_string(s), false});
      }
    }
    save_manifest(make_manifest(recs), dir / "manifest.csv");
    out << "faces " << recs.size() << ' ' << (dir / "manifest.csv").string() << '\n';
  } else if (a.kind == "manifest") {
    if (a.out.empty()) fail(ErrorKind::config, "--out is required");
    DatasetManifest m = synth_manifest(a.records, a.subjects, rng);
    save_manifest(m, a.out);
    const auto stats = subject_stats(m);
    log.info(std::to_string(stats.single_sample) + " of " + std::to_string(stats.subjects) +
             " subjects have a single record");
    out << "manifest " << m.size() << ' ' << a.out << '\n';
  }
  return kExitOk;
}

struct TrainArgs {
  std::string config, manifest, embeddings, out, history;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

int run_train(const TrainArgs& a, std::ostream& out, Log& log) {
  RunConfig c;
  if (!a.config.empty()) c = load_checked(a.config);
  if (!a.manifest.empty()) c.data.train_manifest = a.manifest;
  if (!a.embeddings.empty()) c.data.embeddings = a.embeddings;
  if (a.seed) c.training.seed = *a.seed;
  if (a.epochs) c.training.epochs = *a.epochs;
  if (a.out.empty()) fail(ErrorKind::config, "--out is required");
  json model = c.model.value_or(json{{"type", "head"}});
  // Validate every input path before doing any work.
  if (!c.data.train_manifest.empty()) {
    require_file(c.data.train_manifest, "training manifest");
  } else {
    require_file(c.data.manifest, "manifest");
  }
  if (!c.data.val_manifest.empty()) require_file(c.data.val_manifest, "validation manifest");
  if (is_head(model)) require_file(c.data.embeddings, "embeddings");

  auto [train, val] = train_val(c, log);
  const fs::path manifest_path =
      c.data.train_manifest.empty() ? c.data.manifest : c.data.train_manifest;
  InputSource src{c.data.embeddings, image_root_for(c.data, manifest_path)};
  History history;
  Model m = train_model(model, train, val, src, c.training, c.training.seed, history, log, "train");
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_model(m, a.out);
  const fs::path hist = a.history.empty() ? with_suffix(a.out, ".history.json") : fs::path(a.history);
  write_json(history_json(history), hist);
  out << "checkpoint " << a.out << '\n' << "history " << hist.string() << '\n';
  return kExitOk;
}

struct PredictArgs {
  std::string model, manifest, embeddings, image_root, out;
};

int run_predict(const PredictArgs& a, std::ostream& out, Log& log) {
  require_file(a.model, "model checkpoint");
  require_file(a.manifest, "manifest");
  if (a.out.empty()) fail(ErrorKind::config, "--out is required");
  Model model = load_model(a.model);
  if (!model.is_vit()) require_file(a.embeddings, "embeddings");
  DatasetManifest m = load_manifest(a.manifest);
  InputSource src{a.embeddings, a.image_root.empty() ? fs::path(a.manifest).parent_path()
                                                     : fs::path(a.image_root)};
  PredictionSet p = predict_set(model, m, src);
  write_predictions(p, a.out);
  log.info("wrote " + std::to_string(p.size()) + " predictions");
  out << "predictions " << p.size() << ' ' << a.out << '\n';
  return kExitOk;
}

struct EnsembleArgs {
  std::string config, out_dir;
  std::size_t jobs = 1;
};

int run_ensemble(const EnsembleArgs& a, std::ostream& out, Log& log) {
  RunConfig c = load_checked(a.config);
  if (a.out_dir.empty()) fail(ErrorKind::config, "--out-dir is required");
  const auto& members = c.ensemble.members;
  if (members.size() < 2) fail(ErrorKind::config, "ensemble.members needs at least 2 entries");
  std::vector<fs::path> embeddings;
  for (const auto& m : members) {
    fs::path e = m.embeddings.empty() ? c.data.embeddings : m.embeddings;
    if (is_head(m.model)) require_file(e, "embeddings for member '" + m.name + "'");
    embeddings.push_back(e);
  }
  DatasetManifest pool, test;
  fs::path manifest_path;
  if (!c.data.train_manifest.empty()) {
    require_file(c.data.train_manifest, "training manifest");
    require_file(c.data.test_manifest, "test manifest");
    pool = load_manifest(c.data.train_manifest);
    test = load_manifest(c.data.test_manifest);
    for (const auto& l : test.vocabulary.labels()) pool.vocabulary.add(l);
    test.vocabulary = pool.vocabulary;
    manifest_path = c.data.train_manifest;
  } else {
    require_file(c.data.manifest, "manifest");
    std::tie(pool, test) = split_dataset(load_manifest(c.data.manifest), c.data.split);
    manifest_path = c.data.manifest;
  }
  const fs::path root = image_root_for(c.data, manifest_path);
  const auto folds = make_folds(pool, members.size(), c.ensemble.val_fraction, c.ensemble.fold_seed);
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);

  const std::size_t k = members.size();
  std::vector<std::optional<Model>> models(k);
  std::vector<History> histories(k);
  std::vector<std::string> errors(k);
  auto train_member = [&](std::size_t i) {
    try {
      const Rng seeds(c.training.seed);
      models[i] = train_model(members[i].model, folds[i].first, folds[i].second,
                              InputSource{embeddings[i], root}, c.training,
                              seeds.derive(100 + i).seed(), histories[i], log, members[i].name);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(a.jobs, 1, k);
  if (jobs == 1) {
    for (std::size_t i = 0; i < k; ++i) train_member(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < jobs; ++t) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < k; i = next++) train_member(i);
      });
    }
    for (auto& w : workers) w.join();
  }
  for (std::size_t i = 0; i < k; ++i) {
    if (!errors[i].empty()) fail(ErrorKind::data, "member '" + members[i].name + "': " + errors[i]);
  }

  std::vector<PredictionSet> preds;
  std::vector<EvalReport> reports;
  for (std::size_t i = 0; i < k; ++i) {
    const fs::path ckpt = dir / ("member" + std::to_string(i) + ".mfbc");
    save_model(*models[i], ckpt);
    write_json(history_json(histories[i]), dir / ("member" + std::to_string(i) + ".history.json"));
    preds.push_back(predict_set(*models[i], test, InputSource{embeddings[i], root}));
    write_predictions(preds.back(), dir / ("member" + std::to_string(i) + ".pred.json"));
    reports.push_back(error_report(preds.back(), pool, members[i].name));
  }

  PredictionSet ens;
  ens.classes = preds[0].classes;
  ens.ids = preds[0].ids;
  ens.labels = preds[0].labels;
  const std::size_t classes = ens.classes.size();
  std::vector<double> scores;
  json votes = json::array();
  for (std::size_t s = 0; s < test.size(); ++s) {
    std::vector<VoteRecord> rs;
    for (std::size_t i = 0; i < k; ++i) {
      rs.push_back(make_vote(members[i].name,
                             std::vector<double>(preds[i].probs.data() + s * classes,
                                                 preds[i].probs.data() + (s + 1) * classes)));
    }
    const VoteResult v = majority_vote(rs);
    const auto sc = vote_scores(rs);
    scores.insert(scores.end(), sc.begin(), sc.end());
    json member_votes = json::object();
    for (const auto& r : rs) member_votes[r.member] = ens.classes[r.argmax];
    static const char* paths[] = {"votes", "probability", "index"};
    votes.push_back({{"id", ens.ids[s]},
                     {"class", ens.classes[v.cls]},
                     {"members", member_votes},
                     {"tie_break", paths[static_cast<int>(v.diagnostics.path)]}});
  }
  ens.probs = Tensor({test.size(), classes}, std::move(scores));
  write_predictions(ens, dir / "ensemble.pred.json");
  write_json(votes, dir / "votes.json");
  reports.push_back(error_report(ens, pool, "Ensemble Learning"));
  const fs::path report = c.eval.out.empty() ? dir / "report.json" : c.eval.out;
  write_json(table_json(reports), report);
  out << table_text(reports);
  log.info("report written to " + report.string());
  return kExitOk;
}

struct EvalArgs {
  std::vector<std::string> preds;
  std::string train_manifest, out, config;
  std::vector<std::size_t> k;
};

int run_eval(EvalArgs a, std::ostream& out, Log& log) {
  RunConfig c;
  if (!a.config.empty()) {
    c = load_checked(a.config);
    if (a.out.empty()) a.out = c.eval.out.string();
    if (a.k.empty()) a.k = c.eval.k;
  }
  const bool default_k = a.k.empty();
  if (a.preds.empty()) fail(ErrorKind::config, "at least one --pred NAME=FILE is required");
  std::vector<std::pair<std::string, fs::path>> inputs;
  for (const auto& spec : a.preds) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) {
      fail(ErrorKind::config, "--pred expects NAME=FILE, got '" + spec + "'");
    }
    inputs.emplace_back(spec.substr(0, eq), spec.substr(eq + 1));
    require_file(inputs.back().second, "predictions for " + inputs.back().first);
  }
  if (!a.train_manifest.empty()) require_file(a.train_manifest, "training manifest");

  std::vector<EvalReport> reports;
  json topk = json::array();
  for (const auto& [name, path] : inputs) {
    PredictionSet p = read_predictions(path);
    DatasetManifest train;
    if (!a.train_manifest.empty()) {
      train = load_manifest(a.train_manifest);
    } else {
      train.vocabulary = Vocabulary(p.classes);
    }
    reports.push_back(error_report(p, train, name));
    json row{{"model", name}};
    // The default list shrinks to the class count; explicit k values do not.
    const std::vector<std::size_t> ks =
        default_k ? std::vector<std::size_t>{1, std::min<std::size_t>(5, p.classes.size())} : a.k;
    for (auto k : ks) row["top" + std::to_string(k)] = topk_accuracy(p, k);
    topk.push_back(row);
  }
  json report = table_json(reports);
  report["topk"] = topk;
  if (!a.out.empty()) {
    write_json(report, a.out);
    log.info("report written to " + a.out);
  }
  out << table_text(reports);
  return kExitOk;
}

struct GradcheckArgs {
  std::size_t trials = 10;
  double h = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  std::string out;
};

int run_gradcheck(const GradcheckArgs& a, std::ostream& out, Log& log) {
  const auto results = run_gradient_suite(a.trials, a.h, a.seed);
  bool ok = true;
  json rows = json::array();
  char line[128];
  for (const auto& r : results) {
    const bool pass = r.max_error < a.tolerance;
    ok = ok && pass;
    std::snprintf(line, sizeof line, "%-24s trials %3zu  max rel error %.3e  %s\n", r.op.c_str(),
                  r.trials, r.max_error, pass ? "ok" : "FAIL");
    out << line;
    rows.push_back({{"op", r.op}, {"trials", r.trials}, {"max_error", r.max_error}, {"pass", pass}});
  }
  if (!a.out.empty()) {
    write_json({{"h", a.h}, {"tolerance", a.tolerance}, {"results", rows}}, a.out);
  }
  if (!ok) log.error("gradient check failed");
  return ok ? kExitOk : kExitVerification;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Log log(err);
  CLI::App app{"Masked-face recognition toolkit", "mfr"};
  app.require_subcommand(1);
  app.fallthrough(false);

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "Split a manifest into train and test manifests");
  split_cmd->add_option("--manifest", split.manifest, "Input manifest CSV")->required();
  split_cmd->add_option("--fraction", split.fraction, "Train fraction")->capture_default_str();
  split_cmd->add_option("--seed", split.seed, "Permutation seed")->capture_default_str();
  split_cmd->add_option("--train-out", split.train_out, "Train manifest (default <stem>.train.csv)");
  split_cmd->add_option("--test-out", split.test_out, "Test manifest (default <stem>.test.csv)");

  MaskArgs mask;
  auto* mask_cmd = app.add_subcommand("mask", "Warp a surgical mask onto every manifest image");
  mask_cmd->add_option("--config", mask.config, "Run config (masker and data sections)");
  mask_cmd->add_option("--manifest", mask.manifest, "Input manifest CSV");
  mask_cmd->add_option("--landmarks", mask.landmarks, "Directory of <id>.json landmark files");
  mask_cmd->add_option("--out-dir", mask.out_dir, "Directory for masked images")->required();
  mask_cmd->add_option("--out-manifest", mask.out_manifest, "Output manifest (default <out-dir>/masked.csv)");
  mask_cmd->add_option("--template", mask.template_png, "RGBA template PNG (default: bundled)");
  mask_cmd->add_option("--anchors", mask.anchors, "Landmark JSON of the template anchors");
  mask_cmd->add_option("--jobs", mask.jobs, "Worker threads")->capture_default_str();
  mask_cmd->add_flag("--combine", mask.combine, "Also list the unmasked input records");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic data");
  synth_cmd->add_option("kind", synth.kind, "embeddings | images | faces | manifest")
      ->required()
      ->check(CLI::IsMember({"embeddings", "images", "faces", "manifest"}));
  synth_cmd->add_option("--out", synth.out, "Output file (embeddings, manifest)");
  synth_cmd->add_option("--out-dir", synth.out_dir, "Output directory (images, faces)");
  synth_cmd->add_option("--manifest-out", synth.manifest_out, "Manifest for embeddings");
  synth_cmd->add_option("--classes", synth.classes, "Classes or subjects")->capture_default_str();
  synth_cmd->add_option("--per-class", synth.per_class, "Samples per class")->capture_default_str();
  synth_cmd->add_option("--dim", synth.dim, "Embedding dimension")->capture_default_str();
  synth_cmd->add_option("--separation", synth.separation, "Class-mean norm")->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise, "Gaussian noise sigma")->capture_default_str();
  synth_cmd->add_option("--size", synth.size, "Image side length")->capture_default_str();
  synth_cmd->add_option("--channels", synth.channels, "Pattern channels")->capture_default_str();
  synth_cmd->add_option("--records", synth.records, "Manifest records")->capture_default_str();
  synth_cmd->add_option("--subjects", synth.subjects, "Manifest subjects")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Fit one model and write a checkpoint");
  train_cmd->add_option("--config", train.config, "Run config JSON");
  train_cmd->add_option("--manifest", train.manifest, "Training manifest (overrides config)");
  train_cmd->add_option("--embeddings", train.embeddings, "Embedding CSV (overrides config)");
  train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
  train_cmd->add_option("--history", train.history, "History JSON (default <out stem>.history.json)");
  train_cmd->add_option("--seed", train.seed, "Training seed (overrides config)");
  train_cmd->add_option("--epochs", train.epochs, "Epoch limit (overrides config)");

  PredictArgs predict;
  auto* predict_cmd = app.add_subcommand("predict", "Write a prediction set for a manifest");
  predict_cmd->add_option("--model", predict.model, "Checkpoint path")->required();
  predict_cmd->add_option("--manifest", predict.manifest, "Manifest CSV")->required();
  predict_cmd->add_option("--embeddings", predict.embeddings, "Embedding CSV (head models)");
  predict_cmd->add_option("--image-root", predict.image_root, "Base for relative image paths");
  predict_cmd->add_option("--out", predict.out, "Prediction JSON")->required();

  EnsembleArgs ensemble;
  auto* ensemble_cmd = app.add_subcommand("ensemble", "Train members on distinct folds, vote and report");
  ensemble_cmd->add_option("--config", ensemble.config, "Run config JSON")->required();
  ensemble_cmd->add_option("--out-dir", ensemble.out_dir, "Output directory")->required();
  ensemble_cmd->add_option("--jobs", ensemble.jobs, "Members trained concurrently")->capture_default_str();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Top-k accuracy and error report");
  eval_cmd->add_option("--pred", eval.preds, "NAME=predictions.json (repeatable)");
  eval_cmd->add_option("--train-manifest", eval.train_manifest, "Training manifest for the single-sample analysis");
  eval_cmd->add_option("--k", eval.k, "k values to report (default 1 5)");
  eval_cmd->add_option("--config", eval.config, "Run config (eval section)");
  eval_cmd->add_option("--out", eval.out, "Report JSON");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every layer backward");
  gc_cmd->add_option("--trials", gc.trials, "Random inputs per operation")->capture_default_str();
  gc_cmd->add_option("--step", gc.h, "Central-difference step")->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();
  gc_cmd->add_option("--seed", gc.seed, "Input seed")->capture_default_str();
  gc_cmd->add_option("--out", gc.out, "Result JSON");

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "mfr: " << e.what() << '\n';
    auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs[0]->help());
    return kExitUsage;
  }

  try {
    if (*split_cmd) return run_split(split, out, log);
    if (*mask_cmd) return run_mask(mask, out, log);
    if (*synth_cmd) return run_synth(synth, out, log);
    if (*train_cmd) return run_train(train, out, log);
    if (*predict_cmd) return run_predict(predict, out, log);
    if (*ensemble_cmd) return run_ensemble(ensemble, out, log);
    if (*eval_cmd) return run_eval(eval, out, log);
    if (*gc_cmd) return run_gradcheck(gc, out, log);
  } catch (const Error& e) {
    log.error(e.what());
    return kExitData;
  } catch (const std::exception& e) {
    log.error(e.what());
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace mfr
