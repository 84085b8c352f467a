#include <fstream>

#include "mfr/checkpoint.hpp"
#include "mfr/cli.hpp"
#include "mfr/error.hpp"

namespace mfr {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

template <typename T>
void get(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::config, where + "." + key + ": " + e.what());
  }
}

void get_path(const json& j, const char* key, fs::path& out, const fs::path& base,
              const std::string& where) {
  std::string s;
  get(j, key, s, where);
  if (s.empty()) return;
  fs::path p(s);
  out = p.is_relative() && !base.empty() ? base / p : p;
}

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::config, where + " must be a JSON object");
}

}  // namespace

RunConfig parse_run_config(const json& j, const fs::path& base) {
  require_object(j, "config");
  require_known_keys(j, {"data", "model", "training", "ensemble", "masker", "eval"}, "config");
  RunConfig c;

  if (j.contains("data")) {
    const json& d = j["data"];
    require_object(d, "data");
    require_known_keys(d, {"manifest", "train_manifest", "val_manifest", "test_manifest",
                           "embeddings", "image_root", "train_fraction", "split_seed"},
                       "data");
    get_path(d, "manifest", c.data.manifest, base, "data");
    get_path(d, "train_manifest", c.data.train_manifest, base, "data");
    get_path(d, "val_manifest", c.data.val_manifest, base, "data");
    get_path(d, "test_manifest", c.data.test_manifest, base, "data");
    get_path(d, "embeddings", c.data.embeddings, base, "data");
    get_path(d, "image_root", c.data.image_root, base, "data");
    get(d, "train_fraction", c.data.split.train_fraction, "data");
    get(d, "split_seed", c.data.split.seed, "data");
  }

  if (j.contains("model")) {
    require_object(j["model"], "model");
    model_spec_from_json(j["model"]);  // fail early on a bad architecture
    c.model = j["model"];
  }

  if (j.contains("training")) {
    const json& t = j["training"];
    require_object(t, "training");
    require_known_keys(t, {"lr", "beta1", "beta2", "eps", "batch_size", "epochs", "patience",
                           "seed", "val_fraction", "augment"},
                       "training");
    get(t, "lr", c.training.adam.lr, "training");
    get(t, "beta1", c.training.adam.beta1, "training");
    get(t, "beta2", c.training.adam.beta2, "training");
    get(t, "eps", c.training.adam.eps, "training");
    get(t, "batch_size", c.training.batch_size, "training");
    get(t, "epochs", c.training.epochs, "training");
    get(t, "patience", c.training.patience, "training");
    get(t, "seed", c.training.seed, "training");
    get(t, "val_fraction", c.training.val_fraction, "training");
    if (t.contains("augment")) {
      const json& a = t["augment"];
      require_object(a, "training.augment");
      require_known_keys(a, {"hflip_prob", "zoom_range", "pixel_rescale"}, "training.augment");
      get(a, "hflip_prob", c.training.augment.hflip_prob, "training.augment");
      get(a, "zoom_range", c.training.augment.zoom_range, "training.augment");
      get(a, "pixel_rescale", c.training.augment.pixel_rescale, "training.augment");
    }
    if (c.training.batch_size < 2) fail(ErrorKind::config, "training.batch_size must be >= 2");
    if (c.training.epochs == 0) fail(ErrorKind::config, "training.epochs must be >= 1");
    if (!(c.training.val_fraction > 0.0 && c.training.val_fraction < 1.0)) {
      fail(ErrorKind::config, "training.val_fraction must lie in (0, 1)");
    }
    validate(c.training.augment);
  }

  if (j.contains("ensemble")) {
    const json& e = j["ensemble"];
    require_object(e, "ensemble");
    require_known_keys(e, {"members", "fold_seed", "val_fraction"}, "ensemble");
    get(e, "fold_seed", c.ensemble.fold_seed, "ensemble");
    get(e, "val_fraction", c.ensemble.val_fraction, "ensemble");
    if (e.contains("members")) {
      if (!e["members"].is_array()) fail(ErrorKind::config, "ensemble.members must be an array");
      for (const json& m : e["members"]) {
        require_object(m, "ensemble member");
        require_known_keys(m, {"name", "model", "embeddings"}, "ensemble member");
        MemberSection s;
        get(m, "name", s.name, "ensemble member");
        if (s.name.empty()) fail(ErrorKind::config, "every ensemble member needs a name");
        if (!m.contains("model")) fail(ErrorKind::config, "member '" + s.name + "' has no model");
        model_spec_from_json(m["model"]);
        s.model = m["model"];
        get_path(m, "embeddings", s.embeddings, base, "ensemble member");
        c.ensemble.members.push_back(std::move(s));
      }
    }
  }

  if (j.contains("masker")) {
    const json& m = j["masker"];
    require_object(m, "masker");
    require_known_keys(m, {"template", "anchors", "landmarks_dir"}, "masker");
    get_path(m, "template", c.masker.template_png, base, "masker");
    get_path(m, "anchors", c.masker.anchors, base, "masker");
    get_path(m, "landmarks_dir", c.masker.landmarks_dir, base, "masker");
    if (c.masker.template_png.empty() != c.masker.anchors.empty()) {
      fail(ErrorKind::config, "masker.template and masker.anchors must be given together");
    }
  }

  if (j.contains("eval")) {
    const json& e = j["eval"];
    require_object(e, "eval");
    require_known_keys(e, {"k", "out"}, "eval");
    get(e, "k", c.eval.k, "eval");
    get_path(e, "out", c.eval.out, base, "eval");
    if (c.eval.k.empty()) fail(ErrorKind::config, "eval.k must list at least one k");
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

}  // namespace mfr
