#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfr/model.hpp"

namespace mfr {

// Binary layout, all integers and reals little-endian:
//   "MFBC" | version u32 (=1) | record count u32
//   per record: name length u32 | UTF-8 name | rank u32 | rank x extent u64
//               | volume x f64
// Records appear in parameter-store order and include non-trainable
// buffers. Nothing may follow the last record.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

std::vector<std::uint8_t> encode_checkpoint(const ParameterStore& params);
std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);
// Replaces every value in `model`; names, order and shapes must match.
void load_checkpoint_into(Model& model, const std::filesystem::path& path);

// Architecture description used by the model sidecar (<checkpoint>.json).
nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

// Writes the checkpoint plus a "<path>.json" sidecar holding the
// architecture and class labels, so load_model can rebuild it.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// Rejects keys outside `allowed` with a config error naming `where`.
void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                        const std::string& where);

}  // namespace mfr
