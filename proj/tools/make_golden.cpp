// Regenerates the golden checkpoint fixtures under tests/data/golden.
// Usage: mfr_make_golden <out-dir>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mfr/checkpoint.hpp"
#include "mfr/data.hpp"
#include "mfr/train.hpp"

using namespace mfr;
namespace fs = std::filesystem;

namespace {

void write_hex(std::ostream& out, const char* tag, const Tensor& t) {
  out << tag;
  for (auto d : t.shape()) out << ' ' << d;
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%a", t.data()[i]);
    out << buf << ((i + 1) % 4 == 0 || i + 1 == t.size() ? '\n' : ' ');
  }
}

void emit(const Model& model, const Tensor& inputs, const fs::path& dir, const std::string& name) {
  save_model(model, dir / (name + ".mfbc"));
  std::ofstream out(dir / (name + ".logits"));
  write_hex(out, "inputs", inputs);
  write_hex(out, "logits", model.infer(inputs));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: mfr_make_golden <out-dir>\n";
    return 1;
  }
  const fs::path dir = argv[1];
  fs::create_directories(dir);

  {
    Rng data_rng(41);
    Dataset d = synth_images(4, 6, 8, 1, data_rng);
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.d_model = 8;
    c.num_blocks = 2;
    c.num_heads = 2;
    c.d_key = 4;
    c.head_units = {16, 8};
    c.num_classes = 4;
    Model m = build_vit(c, Rng(42));
    m.set_labels({"a", "b", "c", "d"});
    TrainConfig t;
    t.epochs = 3;
    t.batch_size = 8;
    Rng rng(43);
    fit(m, d, d, t, rng);
    emit(m, d.inputs, dir, "vit");
  }
  {
    Rng data_rng(51);
    auto recs = synth_embeddings(3, 8, 6, 4.0, 1.0, data_rng);
    Dataset d = embedding_dataset(embedding_manifest(recs), recs);
    HeadClassifierConfig c;
    c.input_dim = 6;
    c.num_classes = 3;
    Model m = build_head_classifier(c, Rng(52));
    TrainConfig t;
    t.epochs = 4;
    t.batch_size = 8;
    t.adam.lr = 0.01;
    Rng rng(53);
    fit(m, d, d, t, rng);
    emit(m, d.inputs, dir, "head");
  }
  std::cout << "golden fixtures written to " << dir.string() << '\n';
  return 0;
}
