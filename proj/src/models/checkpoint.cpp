#include "mfr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mfr/error.hpp"

namespace mfr {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'B', 'C'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto c = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}

  void need(std::size_t n, const char* what) {
    if (buf.size() - pos < n) {
      fail(ErrorKind::checkpoint_format,
           std::string("truncated checkpoint while reading ") + what);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{buf[pos + i]} << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{buf[pos + i]} << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(std::size_t n) {
    need(n, "parameter name");
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  bool done() const { return pos == buf.size(); }

  std::span<const std::uint8_t> buf;
  std::size_t pos = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParameterStore& params) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.all()) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto e : p.value.shape()) w.u64(e);
    for (double v : p.value.values()) w.f64(v);
  }
  return std::move(w.out);
}

std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorKind::checkpoint_format, "bad magic, not an MFBC checkpoint");
  }
  r.pos = 4;
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    fail(ErrorKind::checkpoint_format, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.u32("parameter count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32("name length");
    std::string name = r.str(name_len);
    const auto rank = r.u32("rank");
    if (rank == 0 || rank > 8) {
      fail(ErrorKind::checkpoint_format, "parameter '" + name + "' has invalid rank " +
                                             std::to_string(rank));
    }
    Shape shape;
    std::uint64_t volume = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const auto e = r.u64("extent");
      if (e == 0 || e > (std::uint64_t{1} << 40) || volume > (std::uint64_t{1} << 40) / e) {
        fail(ErrorKind::checkpoint_format, "parameter '" + name + "' has an invalid extent");
      }
      volume *= e;
      shape.push_back(static_cast<std::size_t>(e));
    }
    r.need(volume * 8, "values");
    std::vector<double> values(volume);
    for (auto& v : values) v = r.f64("values");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (!r.done()) {
    fail(ErrorKind::checkpoint_format,
         "trailing bytes after " + std::to_string(count) + " declared parameters");
  }
  return out;
}

void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path) {
  auto bytes = encode_checkpoint(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::io, "failed writing " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void load_checkpoint_into(Model& model, const std::filesystem::path& path) {
  auto records = read_checkpoint(path);
  auto& store = model.parameters();
  if (records.size() != store.size()) {
    fail(ErrorKind::checkpoint_format, path.string() + " holds " + std::to_string(records.size()) +
                                           " parameters, model has " + std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& p = store[i];
    if (records[i].name != p.name || records[i].value.shape() != p.value.shape()) {
      fail(ErrorKind::checkpoint_format,
           "record " + std::to_string(i) + " ('" + records[i].name + "' " +
               shape_string(records[i].value.shape()) + ") does not match model parameter '" +
               p.name + "' " + shape_string(p.value.shape()));
    }
  }
  for (std::size_t i = 0; i < records.size(); ++i) store[i].value = std::move(records[i].value);
}

// ---- JSON ----------------------------------------------------------------------

void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                        const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::config, where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) fail(ErrorKind::config, "unknown key '" + key + "' in " + where);
  }
}

nlohmann::json to_json(const ModelSpec& spec) {
  if (const auto* h = std::get_if<HeadClassifierConfig>(&spec)) {
    return {{"type", "head"},
            {"input_dim", h->input_dim},
            {"num_classes", h->num_classes},
            {"dropout", h->dropout_p},
            {"bn_momentum", h->bn_momentum},
            {"bn_eps", h->bn_eps}};
  }
  const auto& v = std::get<ViTConfig>(spec);
  return {{"type", "vit"},
          {"image_size", v.image_size},
          {"channels", v.channels},
          {"patch_size", v.patch_size},
          {"d_model", v.d_model},
          {"num_blocks", v.num_blocks},
          {"num_heads", v.num_heads},
          {"d_key", v.d_key},
          {"encoder_dropout", v.encoder_dropout},
          {"head_units", v.head_units},
          {"head_dropout", v.head_dropout},
          {"num_classes", v.num_classes},
          {"ln_eps", v.ln_eps}};
}

namespace {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) {
    fail(ErrorKind::config, "model config needs a string 'type' (head or vit)");
  }
  const std::string type = j["type"].get<std::string>();
  if (type == "head") {
    require_known_keys(j, {"type", "input_dim", "num_classes", "dropout", "bn_momentum", "bn_eps"},
                       "head model config");
    HeadClassifierConfig c;
    read_opt(j, "input_dim", c.input_dim);
    read_opt(j, "num_classes", c.num_classes);
    read_opt(j, "dropout", c.dropout_p);
    read_opt(j, "bn_momentum", c.bn_momentum);
    read_opt(j, "bn_eps", c.bn_eps);
    validate(c);
    return c;
  }
  if (type == "vit") {
    require_known_keys(j, {"type", "image_size", "channels", "patch_size", "d_model", "num_blocks",
                           "num_heads", "d_key", "encoder_dropout", "head_units", "head_dropout",
                           "num_classes", "ln_eps"},
                       "vit model config");
    ViTConfig c;
    read_opt(j, "image_size", c.image_size);
    read_opt(j, "channels", c.channels);
    read_opt(j, "patch_size", c.patch_size);
    read_opt(j, "d_model", c.d_model);
    read_opt(j, "num_blocks", c.num_blocks);
    read_opt(j, "num_heads", c.num_heads);
    read_opt(j, "d_key", c.d_key);
    read_opt(j, "encoder_dropout", c.encoder_dropout);
    read_opt(j, "head_units", c.head_units);
    read_opt(j, "head_dropout", c.head_dropout);
    read_opt(j, "num_classes", c.num_classes);
    read_opt(j, "ln_eps", c.ln_eps);
    validate(c);
    return c;
  }
  fail(ErrorKind::config, "unknown model type '" + type + "'");
}

void save_model(const Model& model, const std::filesystem::path& path) {
  save_checkpoint(model.parameters(), path);
  nlohmann::json meta{{"model", to_json(model.spec())},
                      {"labels", model.labels()},
                      {"input_scale", model.input_scale()}};
  std::filesystem::path side = path;
  side += ".json";
  std::ofstream f(side, std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot write " + side.string());
  f << meta.dump(2) << '\n';
}

Model load_model(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  std::ifstream f(side);
  if (!f) fail(ErrorKind::io, "cannot open model sidecar " + side.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, side.string() + ": " + e.what());
  }
  require_known_keys(meta, {"model", "labels", "input_scale"}, side.string());
  if (!meta.contains("model")) fail(ErrorKind::config, side.string() + " has no 'model' entry");
  Model model = build_model(model_spec_from_json(meta["model"]));
  load_checkpoint_into(model, path);
  std::vector<std::string> labels;
  read_opt(meta, "labels", labels);
  model.set_labels(std::move(labels));
  double scale = 1.0;
  read_opt(meta, "input_scale", scale);
  model.set_input_scale(scale);
  return model;
}

}  // namespace mfr
