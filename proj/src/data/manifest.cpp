#include "mfr/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "csv.hpp"
#include "mfr/error.hpp"

namespace mfr {

Vocabulary::Vocabulary(std::vector<std::string> labels) {
  for (auto& l : labels) {
    if (contains(l)) fail(ErrorKind::vocabulary, "duplicate label '" + l + "' in vocabulary");
    add(l);
  }
}

std::size_t Vocabulary::add(const std::string& label) {
  auto it = index_.find(label);
  if (it != index_.end()) return it->second;
  index_.emplace(label, labels_.size());
  labels_.push_back(label);
  return labels_.size() - 1;
}

std::size_t Vocabulary::index_of(const std::string& label) const {
  auto it = index_.find(label);
  if (it == index_.end()) fail(ErrorKind::vocabulary, "unknown label '" + label + "'");
  return it->second;
}

std::vector<std::size_t> DatasetManifest::class_indices() const {
  std::vector<std::size_t> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(vocabulary.index_of(r.label));
  return out;
}

DatasetManifest make_manifest(std::vector<SampleRecord> records, Vocabulary base) {
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) fail(ErrorKind::duplicate_id, "duplicate id '" + r.id + "'");
    base.add(r.label);
  }
  return DatasetManifest{std::move(records), std::move(base)};
}

std::filesystem::path labels_path(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p += ".labels";
  return p;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  auto lines = csv::read_lines(path);
  if (lines.empty() || lines[0] != "id,source,label,masked") {
    fail(ErrorKind::parse, path.string() + ":1: expected header id,source,label,masked");
  }
  std::vector<SampleRecord> records;
  std::vector<std::string> f;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (lines[i].empty()) {
      if (i + 1 == lines.size()) break;
      fail(ErrorKind::parse, where + ": empty row");
    }
    if (!csv::split_line(lines[i], f)) fail(ErrorKind::parse, where + ": unterminated quote");
    if (f.size() != 4) {
      fail(ErrorKind::parse, where + ": expected 4 fields, got " + std::to_string(f.size()));
    }
    if (f[0].empty()) fail(ErrorKind::parse, where + ": empty id");
    if (f[2].empty()) fail(ErrorKind::parse, where + ": empty label");
    bool masked;
    if (f[3] == "true") {
      masked = true;
    } else if (f[3] == "false") {
      masked = false;
    } else {
      fail(ErrorKind::parse, where + ": masked must be true or false, got '" + f[3] + "'");
    }
    records.push_back({f[0], f[1], f[2], masked});
  }

  Vocabulary vocab;
  const auto lp = labels_path(path);
  if (std::filesystem::exists(lp)) {
    auto labels = csv::read_lines(lp);
    while (!labels.empty() && labels.back().empty()) labels.pop_back();
    vocab = Vocabulary(std::move(labels));
    for (const auto& r : records) {
      if (!vocab.contains(r.label)) {
        fail(ErrorKind::vocabulary, "label '" + r.label + "' of record '" + r.id +
                                        "' is missing from " + lp.string());
      }
    }
  }
  return make_manifest(std::move(records), std::move(vocab));
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::string text = "id,source,label,masked\n";
  for (const auto& r : manifest.records) {
    text += csv::quote(r.id) + ',' + csv::quote(r.source) + ',' + csv::quote(r.label) + ',' +
            (r.masked ? "true" : "false") + '\n';
  }
  csv::write_text(path, text);
  std::string labels;
  for (const auto& l : manifest.vocabulary.labels()) {
    if (l.find('\n') != std::string::npos) fail(ErrorKind::data, "label contains a newline");
    labels += l + '\n';
  }
  csv::write_text(labels_path(path), labels);
}

DatasetManifest subset(const DatasetManifest& manifest, const std::vector<std::size_t>& indices) {
  DatasetManifest out;
  out.vocabulary = manifest.vocabulary;
  out.records.reserve(indices.size());
  for (auto i : indices) {
    if (i >= manifest.size()) fail(ErrorKind::range, "record index out of range");
    out.records.push_back(manifest.records[i]);
  }
  return out;
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    fail(ErrorKind::config, "train_fraction must lie in (0, 1)");
  }
  const std::size_t n = manifest.size();
  if (n == 0) fail(ErrorKind::empty_input, "cannot split an empty manifest");
  Rng rng(spec.seed, 0);
  const auto perm = permutation(n, rng);
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(n)));
  std::vector<char> in_train(n, 0);
  for (std::size_t i = 0; i < n_train; ++i) in_train[perm[i]] = 1;
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < n; ++i) (in_train[i] ? train : test).push_back(i);
  return {subset(manifest, train), subset(manifest, test)};
}

std::vector<std::size_t> label_counts(const DatasetManifest& manifest) {
  std::vector<std::size_t> counts(manifest.vocabulary.size(), 0);
  for (const auto& r : manifest.records) ++counts[manifest.vocabulary.index_of(r.label)];
  return counts;
}

SubjectStats subject_stats(const DatasetManifest& manifest) {
  SubjectStats s;
  for (auto c : label_counts(manifest)) {
    if (c > 0) ++s.subjects;
    if (c == 1) ++s.single_sample;
  }
  return s;
}

DatasetManifest synth_manifest(std::size_t records, std::size_t subjects, Rng& rng) {
  if (subjects == 0 || records < subjects) {
    fail(ErrorKind::config, "synth_manifest needs 1 <= subjects <= records");
  }
  const std::size_t width = std::to_string(subjects - 1).size();
  auto subject_name = [&](std::size_t s) {
    std::string digits = std::to_string(s);
    return "subject_" + std::string(width - digits.size(), '0') + digits;
  };
  std::vector<std::size_t> owner(records);
  for (std::size_t s = 0; s < subjects; ++s) owner[s] = s;
  // Extra images go to a small popular head, skewed towards its first members.
  const std::size_t head = std::max<std::size_t>(1, subjects / 4);
  for (std::size_t i = subjects; i < records; ++i) {
    const double u = rng.uniform();
    owner[i] = std::min(head - 1, static_cast<std::size_t>(static_cast<double>(head) * u * u));
  }
  const auto order = permutation(records, rng);
  const std::size_t id_width = std::to_string(records - 1).size();
  std::vector<SampleRecord> out;
  out.reserve(records);
  for (std::size_t i = 0; i < records; ++i) {
    std::string digits = std::to_string(i);
    std::string id = "img_" + std::string(id_width - digits.size(), '0') + digits;
    out.push_back({id, "images/" + id + ".png", subject_name(owner[order[i]]), false});
  }
  return make_manifest(std::move(out));
}

std::uint64_t id_list_hash(const DatasetManifest& manifest) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ULL;
  };
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    if (i > 0) mix('\n');
    for (unsigned char c : manifest.records[i].id) mix(c);
  }
  return h;
}

}  // namespace mfr
