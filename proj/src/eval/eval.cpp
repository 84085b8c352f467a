#include "mfr/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "mfr/error.hpp"

namespace mfr {

std::vector<std::size_t> PredictionSet::label_indices() const {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t c = 0; c < classes.size(); ++c) index.emplace(classes[c], c);
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    auto it = index.find(l);
    if (it == index.end()) fail(ErrorKind::vocabulary, "label '" + l + "' is not a known class");
    out.push_back(it->second);
  }
  return out;
}

void validate(const PredictionSet& p) {
  const std::size_t n = p.ids.size();
  if (p.labels.size() != n) fail(ErrorKind::dimension, "one label per prediction expected");
  if (p.classes.empty()) fail(ErrorKind::dimension, "prediction set has no classes");
  if (n == 0) return;
  if (p.probs.rank() != 2 || p.probs.dim(0) != n || p.probs.dim(1) != p.classes.size()) {
    fail(ErrorKind::dimension, "probabilities " + shape_string(p.probs.shape()) +
                                   " do not match " + std::to_string(n) + " samples x " +
                                   std::to_string(p.classes.size()) + " classes");
  }
  if (!p.probs.all_finite()) fail(ErrorKind::data, "non-finite probability");
}

nlohmann::json to_json(const PredictionSet& p) {
  validate(p);
  nlohmann::json samples = nlohmann::json::array();
  const std::size_t c = p.classes.size();
  for (std::size_t i = 0; i < p.size(); ++i) {
    samples.push_back({{"id", p.ids[i]},
                       {"label", p.labels[i]},
                       {"probs", std::vector<double>(p.probs.data() + i * c,
                                                     p.probs.data() + (i + 1) * c)}});
  }
  return {{"classes", p.classes}, {"samples", samples}};
}

namespace {

void require_keys(const nlohmann::json& j, std::initializer_list<const char*> keys,
                  const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::parse, where + " must be an object");
  for (const auto& [k, _] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) fail(ErrorKind::parse, "unknown key '" + k + "' in " + where);
  }
  for (const char* key : keys) {
    if (!j.contains(key)) fail(ErrorKind::parse, std::string("missing key '") + key + "' in " + where);
  }
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, path.string() + ": " + e.what());
  }
}

}  // namespace

PredictionSet prediction_set_from_json(const nlohmann::json& j) {
  try {
    require_keys(j, {"classes", "samples"}, "prediction set");
    PredictionSet p;
    p.classes = j.at("classes").get<std::vector<std::string>>();
    const auto& samples = j.at("samples");
    if (!samples.is_array()) fail(ErrorKind::parse, "samples must be an array");
    std::vector<double> values;
    for (const auto& s : samples) {
      require_keys(s, {"id", "label", "probs"}, "sample");
      p.ids.push_back(s.at("id").get<std::string>());
      p.labels.push_back(s.at("label").get<std::string>());
      auto row = s.at("probs").get<std::vector<double>>();
      if (row.size() != p.classes.size()) {
        fail(ErrorKind::dimension, "sample '" + p.ids.back() + "' has " +
                                       std::to_string(row.size()) + " probabilities, expected " +
                                       std::to_string(p.classes.size()));
      }
      values.insert(values.end(), row.begin(), row.end());
    }
    if (!p.ids.empty()) p.probs = Tensor({p.ids.size(), p.classes.size()}, std::move(values));
    validate(p);
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("prediction set: ") + e.what());
  }
}

PredictionSet read_predictions(const std::filesystem::path& path) {
  return prediction_set_from_json(read_json(path));
}

void write_predictions(const PredictionSet& preds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << to_json(preds).dump(1) << '\n';
}

std::size_t rank_of(const double* probs, std::size_t classes, std::size_t target) {
  std::size_t rank = 1;
  const double t = probs[target];
  for (std::size_t c = 0; c < classes; ++c) {
    if (probs[c] > t || (probs[c] == t && c < target)) ++rank;
  }
  return rank;
}

double topk_accuracy(const PredictionSet& preds, std::size_t k) {
  validate(preds);
  const std::size_t c = preds.classes.size();
  if (k < 1 || k > c) {
    fail(ErrorKind::range, "k = " + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  }
  if (preds.size() == 0) fail(ErrorKind::empty_input, "no predictions");
  const auto labels = preds.label_indices();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    hits += rank_of(preds.probs.data() + i * c, c, labels[i]) <= k;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

EvalReport error_report(const PredictionSet& preds, const DatasetManifest& train,
                        const std::string& model) {
  validate(preds);
  for (const auto& l : preds.labels) {
    if (!train.vocabulary.contains(l)) {
      fail(ErrorKind::vocabulary, "label '" + l + "' is not in the training vocabulary");
    }
  }
  const std::size_t c = preds.classes.size();
  EvalReport r;
  r.model = model;
  r.samples = preds.size();
  r.top1 = topk_accuracy(preds, 1);
  r.top5 = topk_accuracy(preds, std::min<std::size_t>(5, c));
  const auto labels = preds.label_indices();
  const auto counts = label_counts(train);
  std::size_t single = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (rank_of(preds.probs.data() + i * c, c, labels[i]) == 1) continue;
    r.misclassified.push_back(preds.ids[i]);
    single += counts[train.vocabulary.index_of(preds.labels[i])] == 1;
  }
  if (!r.misclassified.empty()) {
    r.single_sample_fraction =
        static_cast<double>(single) / static_cast<double>(r.misclassified.size());
  }
  return r;
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"model", r.model},
          {"top1", r.top1},
          {"top5", r.top5},
          {"samples", r.samples},
          {"misclassified", r.misclassified},
          {"single_sample_fraction", r.single_sample_fraction}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  try {
    require_keys(j, {"model", "top1", "top5", "samples", "misclassified", "single_sample_fraction"},
                 "eval report");
    EvalReport r;
    r.model = j.at("model").get<std::string>();
    r.top1 = j.at("top1").get<double>();
    r.top5 = j.at("top5").get<double>();
    r.samples = j.at("samples").get<std::size_t>();
    r.misclassified = j.at("misclassified").get<std::vector<std::string>>();
    r.single_sample_fraction = j.at("single_sample_fraction").get<double>();
    if (!(0.0 <= r.top1 && r.top1 <= r.top5 && r.top5 <= 1.0)) {
      fail(ErrorKind::data, "report accuracies must satisfy 0 <= top1 <= top5 <= 1");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("eval report: ") + e.what());
  }
}

const std::vector<std::string>& table_models() {
  static const std::vector<std::string> names{"CNN-VGG16", "CNN-EfficientNet", "CNN-FaceNet",
                                              "Transformer", "Ensemble Learning"};
  return names;
}

nlohmann::json table_json(const std::vector<EvalReport>& reports) {
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json full = nlohmann::json::array();
  for (const auto& r : reports) {
    rows.push_back({{"model", r.model}, {"top1", r.top1}, {"top5", r.top5}});
    full.push_back(to_json(r));
  }
  return {{"columns", {"model", "top1", "top5"}}, {"rows", rows}, {"reports", full}};
}

std::string table_text(const std::vector<EvalReport>& reports) {
  std::string out;
  char line[128];
  std::snprintf(line, sizeof line, "%-20s %8s %8s\n", "Model", "Top-1", "Top-5");
  out += line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-20s %7.2f%% %7.2f%%\n", r.model.c_str(), 100.0 * r.top1,
                  100.0 * r.top5);
    out += line;
  }
  return out;
}

}  // namespace mfr
