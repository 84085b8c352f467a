#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mfr/adam.hpp"
#include "mfr/data.hpp"
#include "mfr/manifest.hpp"

#include <json.hpp>

namespace mfr {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitVerification = 3;

struct DataSection {
  std::filesystem::path manifest;        // full set, split with `split`
  std::filesystem::path train_manifest;  // used instead of splitting `manifest`
  std::filesystem::path val_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path embeddings;
  std::filesystem::path image_root;      // default: the manifest's directory
  SplitSpec split;
};

struct TrainingSection {
  AdamConfig adam;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  AugmentationSpec augment;
};

struct MemberSection {
  std::string name;
  nlohmann::json model;
  std::filesystem::path embeddings;  // default: data.embeddings
};

struct EnsembleSection {
  std::vector<MemberSection> members;
  std::uint64_t fold_seed = 777;
  double val_fraction = 0.1;
};

struct MaskerSection {
  std::filesystem::path template_png;  // default: the bundled template
  std::filesystem::path anchors;       // landmark JSON for a custom template
  std::filesystem::path landmarks_dir;
};

struct EvalSection {
  std::vector<std::size_t> k{1, 5};
  std::filesystem::path out;
};

/// JSON run configuration with sections data, model, training, ensemble,
/// masker and eval. Unknown keys anywhere raise a config error. Relative
/// paths resolve against `base_dir`.
struct RunConfig {
  DataSection data;
  std::optional<nlohmann::json> model;
  TrainingSection training;
  EnsembleSection ensemble;
  MaskerSection masker;
  EvalSection eval;
};

RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Entry point of the `mfr` tool. Returns the process exit code: 0 success,
/// 1 usage error, 2 data or configuration error, 3 failed verification.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mfr
