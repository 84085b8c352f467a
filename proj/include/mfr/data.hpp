#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "mfr/image.hpp"
#include "mfr/manifest.hpp"
#include "mfr/rng.hpp"
#include "mfr/tensor.hpp"
#include "mfr/train.hpp"

namespace mfr {

struct AugmentationSpec {
  double hflip_prob = 0.5;
  double zoom_range = 0.2;
  double pixel_rescale = 1.0 / 255.0;
};

void validate(const AugmentationSpec& spec);

/// For an image [H, W, C]: multiply by pixel_rescale, flip horizontally with
/// probability hflip_prob, then zoom about the centre by a factor drawn
/// uniformly from [1 - z, 1 + z] with bilinear resampling and zero padding.
/// Always consumes exactly two draws (flip, zoom) from `rng`.
Tensor augment_image(const Tensor& image, const AugmentationSpec& spec, Rng& rng);
// augment_image applied to every sample of [B, H, W, C], in order.
Tensor augment_batch(const Tensor& images, const AugmentationSpec& spec, Rng& rng);

// The evaluation-time counterpart: rescale only.
Tensor rescale(const Tensor& images, double factor);

// Resamples [H, W, C] at scale s about the pixel-grid centre; output pixel
// (y, x) reads input ((y - cy) / s + cy, (x - cx) / s + cx).
Tensor zoom_image(const Tensor& image, double scale);
Tensor hflip_image(const Tensor& image);

/// Raw 0..255 values as [H, W, channels]; channels 1 uses the Rec. 601 luma
/// of RGB, 3 keeps RGB, 4 keeps RGBA.
Tensor raster_to_tensor(const Raster& image, std::size_t channels);
// Loads each record's source image, resized (bilinear) to size x size.
Tensor load_images(const DatasetManifest& manifest, std::size_t size, std::size_t channels,
                   const std::filesystem::path& root = {});
Raster resize(const Raster& image, std::size_t width, std::size_t height);

struct EmbeddingRecord {
  std::string id;
  std::string label;
  std::vector<double> values;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

/// CSV with header `id,label,v0,...,v{d-1}`. Ragged rows raise a parse error,
/// non-finite values a data error.
std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path);
// Values are written with 17 significant digits so they reload exactly.
void save_embeddings(const std::vector<EmbeddingRecord>& records,
                     const std::filesystem::path& path);

/// K class means, each a random unit vector scaled by `separation`, and
/// per_class samples of mean + noise * N(0, I) per class. Records are
/// class-major with labels "c00", "c01", ... (zero-padded to the width of K).
std::vector<EmbeddingRecord> synth_embeddings(std::size_t classes, std::size_t per_class,
                                              std::size_t dim, double separation, double noise,
                                              Rng& rng);

// Manifest view of embedding records (source = id).
DatasetManifest embedding_manifest(const std::vector<EmbeddingRecord>& records,
                                   Vocabulary base = {});
/// Stacks the embeddings of the manifest's records (looked up by source) into
/// a Dataset labelled with the manifest's vocabulary.
Dataset embedding_dataset(const DatasetManifest& manifest,
                          const std::vector<EmbeddingRecord>& records);

/// Deterministic textured patterns in [0, 1]: every class has its own
/// mixture of oriented gratings and blobs; samples add small noise and a
/// random sub-pixel jitter. Labels are class-major.
Dataset synth_images(std::size_t classes, std::size_t per_class, std::size_t size,
                     std::size_t channels, Rng& rng);

}  // namespace mfr
