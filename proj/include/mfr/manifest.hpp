#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mfr/rng.hpp"

namespace mfr {

struct SampleRecord {
  std::string id;
  std::string source;  // image path or embedding id
  std::string label;   // subject identifier
  bool masked = false;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

/// Label -> dense class index, in first-insertion order.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> labels);

  std::size_t add(const std::string& label);
  bool contains(const std::string& label) const { return index_.count(label) != 0; }
  // Throws a vocabulary error for unknown labels.
  std::size_t index_of(const std::string& label) const;
  const std::string& label(std::size_t index) const { return labels_.at(index); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  std::size_t size() const noexcept { return labels_.size(); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.labels_ == b.labels_; }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  Vocabulary vocabulary;

  std::size_t size() const noexcept { return records.size(); }
  std::vector<std::size_t> class_indices() const;
};

// Builds a manifest whose vocabulary follows first appearance, or extends
// `base` when given. Duplicate ids raise a duplicate-id error.
DatasetManifest make_manifest(std::vector<SampleRecord> records, Vocabulary base = {});

/// CSV with header `id,source,label,masked`, masked in {true,false}. If a
/// `<path>.labels` file (one label per line) exists it fixes the vocabulary
/// order; otherwise labels are indexed by first appearance.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Writes the CSV and its `.labels` vocabulary file.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
std::filesystem::path labels_path(const std::filesystem::path& manifest_path);

struct SplitSpec {
  double train_fraction = 0.95;
  std::uint64_t seed = 777;
};

/// Fisher-Yates permutation from Rng(seed, 0); the first floor(fraction * N)
/// permuted records form the train set. Both halves keep manifest order and
/// the full vocabulary.
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          const SplitSpec& spec);

DatasetManifest subset(const DatasetManifest& manifest, const std::vector<std::size_t>& indices);

struct SubjectStats {
  std::size_t subjects = 0;         // labels with at least one record
  std::size_t single_sample = 0;    // labels with exactly one record
  double single_fraction() const {
    return subjects == 0 ? 0.0 : static_cast<double>(single_sample) / static_cast<double>(subjects);
  }
};

SubjectStats subject_stats(const DatasetManifest& manifest);
// Record count per vocabulary index.
std::vector<std::size_t> label_counts(const DatasetManifest& manifest);

/// LFW-shaped synthetic manifest: `records` image records over `subjects`
/// labels, every subject present at least once, the rest assigned with a
/// heavy single-image tail. Sources are placeholder paths.
DatasetManifest synth_manifest(std::size_t records, std::size_t subjects, Rng& rng);

// FNV-1a over the ids joined by '\n'.
std::uint64_t id_list_hash(const DatasetManifest& manifest);

}  // namespace mfr
