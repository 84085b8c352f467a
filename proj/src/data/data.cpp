#include "mfr/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "csv.hpp"
#include "mfr/error.hpp"

namespace mfr {

void validate(const AugmentationSpec& spec) {
  if (!(spec.hflip_prob >= 0.0 && spec.hflip_prob <= 1.0)) {
    fail(ErrorKind::config, "hflip_prob must lie in [0, 1]");
  }
  if (!(spec.zoom_range > -1.0) || !std::isfinite(spec.zoom_range)) {
    fail(ErrorKind::config, "zoom_range must be finite and > -1");
  }
  if (!std::isfinite(spec.pixel_rescale)) fail(ErrorKind::config, "pixel_rescale must be finite");
}

namespace {

void require_image(const Tensor& image) {
  if (image.rank() != 3) {
    fail(ErrorKind::dimension, "expected an image [H, W, C], got " + shape_string(image.shape()));
  }
}

}  // namespace

Tensor rescale(const Tensor& images, double factor) {
  Tensor out = images;
  out *= factor;
  return out;
}

Tensor hflip_image(const Tensor& image) {
  require_image(image);
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) {
        out[(y * w + x) * c + k] = image[(y * w + (w - 1 - x)) * c + k];
      }
  return out;
}

Tensor zoom_image(const Tensor& image, double scale) {
  require_image(image);
  if (!(scale > 0.0)) fail(ErrorKind::config, "zoom scale must be positive");
  if (scale == 1.0) return image;
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const double cy = 0.5 * static_cast<double>(h - 1);
  const double cx = 0.5 * static_cast<double>(w - 1);
  Tensor out(image.shape());
  auto pixel = [&](long y, long x, std::size_t k) {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return image[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * c + k];
  };
  for (std::size_t y = 0; y < h; ++y) {
    const double sy = (static_cast<double>(y) - cy) / scale + cy;
    const double y0 = std::floor(sy);
    const double fy = sy - y0;
    for (std::size_t x = 0; x < w; ++x) {
      const double sx = (static_cast<double>(x) - cx) / scale + cx;
      const double x0 = std::floor(sx);
      const double fx = sx - x0;
      const long iy = static_cast<long>(y0), ix = static_cast<long>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        const double top = (1 - fx) * pixel(iy, ix, k) + fx * pixel(iy, ix + 1, k);
        const double bottom = (1 - fx) * pixel(iy + 1, ix, k) + fx * pixel(iy + 1, ix + 1, k);
        out[(y * w + x) * c + k] = (1 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

Tensor augment_image(const Tensor& image, const AugmentationSpec& spec, Rng& rng) {
  validate(spec);
  require_image(image);
  Tensor out = rescale(image, spec.pixel_rescale);
  const bool flip = rng.uniform() < spec.hflip_prob;
  const double scale = rng.uniform(1.0 - spec.zoom_range, 1.0 + spec.zoom_range);
  if (flip) out = hflip_image(out);
  return zoom_image(out, scale);
}

Tensor augment_batch(const Tensor& images, const AugmentationSpec& spec, Rng& rng) {
  if (images.rank() != 4) {
    fail(ErrorKind::dimension,
         "expected images [B, H, W, C], got " + shape_string(images.shape()));
  }
  const Shape one{images.dim(1), images.dim(2), images.dim(3)};
  const std::size_t stride = shape_volume(one);
  Tensor out(images.shape());
  for (std::size_t b = 0; b < images.dim(0); ++b) {
    Tensor img(one, std::vector<double>(images.data() + b * stride,
                                        images.data() + (b + 1) * stride));
    Tensor aug = augment_image(img, spec, rng);
    std::copy(aug.data(), aug.data() + stride, out.data() + b * stride);
  }
  return out;
}

Tensor raster_to_tensor(const Raster& image, std::size_t channels) {
  if (channels != 1 && channels != 3 && channels != 4) {
    fail(ErrorKind::config, "channels must be 1, 3 or 4");
  }
  Tensor out({image.height, image.width, channels});
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const auto* p = image.at(x, y);
      double* o = out.data() + (y * image.width + x) * channels;
      if (channels == 1) {
        o[0] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
      } else {
        for (std::size_t k = 0; k < channels; ++k) o[k] = p[k];
      }
    }
  return out;
}

Raster resize(const Raster& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) fail(ErrorKind::dimension, "resize to an empty raster");
  if (image.width == width && image.height == height) return image;
  Raster out(width, height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  auto clampi = [](double v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n - 1)));
  };
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(image.height - 1));
    const std::size_t y0 = clampi(std::floor(fy), image.height);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(image.width - 1));
      const std::size_t x0 = clampi(std::floor(fx), image.width);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < 4; ++k) {
        const double top = (1 - wx) * image.at(x0, y0)[k] + wx * image.at(x1, y0)[k];
        const double bot = (1 - wx) * image.at(x0, y1)[k] + wx * image.at(x1, y1)[k];
        out.at(x, y)[k] = static_cast<std::uint8_t>(std::lround((1 - wy) * top + wy * bot));
      }
    }
  }
  return out;
}

Tensor load_images(const DatasetManifest& manifest, std::size_t size, std::size_t channels,
                   const std::filesystem::path& root) {
  if (manifest.size() == 0) fail(ErrorKind::empty_input, "manifest has no records");
  Tensor out({manifest.size(), size, size, channels});
  const std::size_t stride = size * size * channels;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    std::filesystem::path src = manifest.records[i].source;
    if (src.is_relative() && !root.empty()) src = root / src;
    Tensor img = raster_to_tensor(resize(read_png(src), size, size), channels);
    std::copy(img.data(), img.data() + stride, out.data() + i * stride);
  }
  return out;
}

// ---- embeddings ------------------------------------------------------------------

std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path) {
  auto lines = csv::read_lines(path);
  std::vector<std::string> f;
  if (lines.empty() || !csv::split_line(lines[0], f) || f.size() < 3 || f[0] != "id" ||
      f[1] != "label") {
    fail(ErrorKind::parse, path.string() + ":1: expected header id,label,v0,...");
  }
  const std::size_t dim = f.size() - 2;
  for (std::size_t j = 0; j < dim; ++j) {
    if (f[j + 2] != "v" + std::to_string(j)) {
      fail(ErrorKind::parse, path.string() + ":1: expected column v" + std::to_string(j));
    }
  }
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (lines[i].empty() && i + 1 == lines.size()) break;
    if (!csv::split_line(lines[i], f)) fail(ErrorKind::parse, where + ": unterminated quote");
    if (f.size() != dim + 2) {
      fail(ErrorKind::parse, where + ": expected " + std::to_string(dim) + " values, got " +
                                 std::to_string(f.size() < 2 ? 0 : f.size() - 2));
    }
    EmbeddingRecord r{f[0], f[1], std::vector<double>(dim)};
    for (std::size_t j = 0; j < dim; ++j) {
      const std::string& s = f[j + 2];
      const char* first = s.data();
      if (!s.empty() && s[0] == '+') ++first;
      auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), r.values[j]);
      if (ec == std::errc::result_out_of_range) {
        fail(ErrorKind::data, where + ": value '" + s + "' is not finite");
      }
      if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        fail(ErrorKind::parse, where + ": cannot parse '" + s + "' as a number");
      }
      if (!std::isfinite(r.values[j])) {
        fail(ErrorKind::data, where + ": value '" + s + "' is not finite");
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

void save_embeddings(const std::vector<EmbeddingRecord>& records,
                     const std::filesystem::path& path) {
  if (records.empty()) fail(ErrorKind::empty_input, "no embeddings to write");
  const std::size_t dim = records[0].values.size();
  std::ostringstream os;
  os.precision(17);
  os << "id,label";
  for (std::size_t j = 0; j < dim; ++j) os << ",v" << j;
  os << '\n';
  for (const auto& r : records) {
    if (r.values.size() != dim) fail(ErrorKind::dimension, "ragged embedding '" + r.id + "'");
    os << csv::quote(r.id) << ',' << csv::quote(r.label);
    for (double v : r.values) {
      if (!std::isfinite(v)) fail(ErrorKind::data, "non-finite value in '" + r.id + "'");
      os << ',' << v;
    }
    os << '\n';
  }
  csv::write_text(path, os.str());
}

std::vector<EmbeddingRecord> synth_embeddings(std::size_t classes, std::size_t per_class,
                                              std::size_t dim, double separation, double noise,
                                              Rng& rng) {
  if (classes < 2 || per_class == 0 || dim == 0) {
    fail(ErrorKind::config, "synth_embeddings needs classes >= 2, per_class >= 1, dim >= 1");
  }
  if (!(separation > 0.0) || !(noise >= 0.0)) {
    fail(ErrorKind::config, "separation must be positive and noise non-negative");
  }
  std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
  for (auto& m : means) {
    double norm = 0.0;
    while (norm == 0.0) {
      for (auto& v : m) v = rng.normal();
      norm = std::sqrt(std::inner_product(m.begin(), m.end(), m.begin(), 0.0));
    }
    for (auto& v : m) v *= separation / norm;
  }
  const std::size_t width = std::max<std::size_t>(2, std::to_string(classes - 1).size());
  const std::size_t id_width = std::to_string(per_class - 1).size();
  auto pad = [](std::size_t v, std::size_t w) {
    std::string s = std::to_string(v);
    return std::string(w > s.size() ? w - s.size() : 0, '0') + s;
  };
  std::vector<EmbeddingRecord> out;
  out.reserve(classes * per_class);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::string label = "c" + pad(c, width);
    for (std::size_t i = 0; i < per_class; ++i) {
      EmbeddingRecord r{label + "_" + pad(i, id_width), label, means[c]};
      for (auto& v : r.values) v += noise * rng.normal();
      out.push_back(std::move(r));
    }
  }
  return out;
}

DatasetManifest embedding_manifest(const std::vector<EmbeddingRecord>& records, Vocabulary base) {
  std::vector<SampleRecord> rs;
  rs.reserve(records.size());
  for (const auto& r : records) rs.push_back({r.id, r.id, r.label, false});
  return make_manifest(std::move(rs), std::move(base));
}

Dataset embedding_dataset(const DatasetManifest& manifest,
                          const std::vector<EmbeddingRecord>& records) {
  if (manifest.size() == 0) fail(ErrorKind::empty_input, "manifest has no records");
  std::unordered_map<std::string, const EmbeddingRecord*> by_id;
  for (const auto& r : records) by_id.emplace(r.id, &r);
  std::size_t dim = 0;
  std::vector<double> values;
  Dataset out;
  for (const auto& rec : manifest.records) {
    auto it = by_id.find(rec.source);
    if (it == by_id.end()) fail(ErrorKind::data, "no embedding with id '" + rec.source + "'");
    const auto& v = it->second->values;
    if (dim == 0) dim = v.size();
    if (v.size() != dim) fail(ErrorKind::dimension, "ragged embedding '" + rec.source + "'");
    values.insert(values.end(), v.begin(), v.end());
    out.labels.push_back(manifest.vocabulary.index_of(rec.label));
  }
  out.inputs = Tensor({manifest.size(), dim}, std::move(values));
  return out;
}

// ---- synthetic images --------------------------------------------------------------

Dataset synth_images(std::size_t classes, std::size_t per_class, std::size_t size,
                     std::size_t channels, Rng& rng) {
  if (classes < 2 || per_class == 0 || size == 0 || channels == 0) {
    fail(ErrorKind::config, "synth_images needs classes >= 2 and positive sizes");
  }
  struct Pattern {
    double angle, freq, phase, bx, by, polarity;
    std::vector<double> tint;
  };
  const double pi = std::numbers::pi;
  const double s = static_cast<double>(size);
  std::vector<Pattern> patterns;
  for (std::size_t c = 0; c < classes; ++c) {
    Pattern p;
    p.angle = pi * static_cast<double>(c) / static_cast<double>(classes) + rng.uniform(0.0, 0.2);
    p.freq = 1.0 + static_cast<double>(c % 3) + rng.uniform();
    p.phase = rng.uniform(0.0, 2 * pi);
    p.bx = rng.uniform(0.2, 0.8) * s;
    p.by = rng.uniform(0.2, 0.8) * s;
    p.polarity = c % 2 == 0 ? 1.0 : -1.0;
    for (std::size_t k = 0; k < channels; ++k) p.tint.push_back(rng.uniform(0.6, 1.0));
    patterns.push_back(std::move(p));
  }
  Dataset out{Tensor({classes * per_class, size, size, channels}), {}};
  const std::size_t stride = size * size * channels;
  for (std::size_t c = 0; c < classes; ++c) {
    const Pattern& p = patterns[c];
    for (std::size_t i = 0; i < per_class; ++i) {
      const double jitter = rng.uniform(-0.3, 0.3);
      double* img = out.inputs.data() + (c * per_class + i) * stride;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double fx = static_cast<double>(x), fy = static_cast<double>(y);
          const double t = (fx * std::cos(p.angle) + fy * std::sin(p.angle)) / s;
          const double grating = std::sin(2 * pi * p.freq * t + p.phase + jitter);
          const double d2 = (fx - p.bx) * (fx - p.bx) + (fy - p.by) * (fy - p.by);
          const double blob = std::exp(-d2 / (0.02 * s * s));
          for (std::size_t k = 0; k < channels; ++k) {
            const double v = 0.5 + p.tint[k] * (0.25 * grating + 0.25 * p.polarity * blob) +
                             0.03 * rng.normal();
            img[(y * size + x) * channels + k] = std::clamp(v, 0.0, 1.0);
          }
        }
      out.labels.push_back(c);
    }
  }
  return out;
}

}  // namespace mfr
