#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "mfr/manifest.hpp"
#include "mfr/tensor.hpp"

#include <json.hpp>

namespace mfr {

/// Per-sample class probabilities [N, C] with the true label of each sample.
/// `classes` names the C columns.
struct PredictionSet {
  std::vector<std::string> classes;
  std::vector<std::string> ids;
  std::vector<std::string> labels;
  Tensor probs;

  std::size_t size() const noexcept { return ids.size(); }
  // Index of each true label in `classes`; unknown labels raise a
  // vocabulary error.
  std::vector<std::size_t> label_indices() const;
};

void validate(const PredictionSet& preds);

/// JSON: {"classes": [...], "samples": [{"id", "label", "probs": [...]}]}.
nlohmann::json to_json(const PredictionSet& preds);
PredictionSet prediction_set_from_json(const nlohmann::json& j);
PredictionSet read_predictions(const std::filesystem::path& path);
void write_predictions(const PredictionSet& preds, const std::filesystem::path& path);

// 1-based rank of class `target` in a probability row: classes with a higher
// probability, or an equal one and a lower index, rank before it.
std::size_t rank_of(const double* probs, std::size_t classes, std::size_t target);

/// Fraction of samples whose true label ranks within the top k. Requires
/// 1 <= k <= C, otherwise a range error.
double topk_accuracy(const PredictionSet& preds, std::size_t k);

struct EvalReport {
  std::string model;
  double top1 = 0.0;
  double top5 = 0.0;  // top-min(5, C)
  std::size_t samples = 0;
  std::vector<std::string> misclassified;
  // Share of misclassified samples whose subject has exactly one record in
  // the training manifest; 0 when nothing is misclassified.
  double single_sample_fraction = 0.0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Top-1 / top-5 plus the misclassification breakdown against the training
/// manifest. Prediction labels must be in the manifest vocabulary.
EvalReport error_report(const PredictionSet& preds, const DatasetManifest& train,
                        const std::string& model);

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

// Row names of the comparison table, in table order.
const std::vector<std::string>& table_models();

/// {"columns": ["model", "top1", "top5"], "rows": [{model, top1, top5}, ...],
/// "reports": [full reports]}.
nlohmann::json table_json(const std::vector<EvalReport>& reports);
// Fixed-width text rendering with accuracies as percentages.
std::string table_text(const std::vector<EvalReport>& reports);

}  // namespace mfr
