#include "mfr/masker.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <optional>
#include <thread>

#include "mfr/error.hpp"

namespace mfr {

const std::array<std::string_view, 6>& landmark_names() {
  static const std::array<std::string_view, 6> names{
      "left_jaw", "left_cheek", "nose_bridge_left", "nose_bridge_right", "right_cheek",
      "right_jaw"};
  return names;
}

double triangle_area(const std::array<Point, 3>& t) {
  return 0.5 * std::abs((t[1].x - t[0].x) * (t[2].y - t[0].y) -
                        (t[2].x - t[0].x) * (t[1].y - t[0].y));
}

void validate(const LandmarkSet& lm) {
  for (std::size_t i = 0; i < 6; ++i) {
    if (!std::isfinite(lm[i].x) || !std::isfinite(lm[i].y)) {
      fail(ErrorKind::degenerate_landmarks,
           std::string(landmark_names()[i]) + " has a non-finite coordinate");
    }
  }
  if (triangle_area(lm.left()) <= 1e-6) {
    fail(ErrorKind::degenerate_landmarks, "left landmark triangle is collinear");
  }
  if (triangle_area(lm.right()) <= 1e-6) {
    fail(ErrorKind::degenerate_landmarks, "right landmark triangle is collinear");
  }
}

nlohmann::json to_json(const LandmarkSet& lm) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < 6; ++i) {
    j[std::string(landmark_names()[i])] = {lm[i].x, lm[i].y};
  }
  return j;
}

LandmarkSet landmarks_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::parse, "landmarks must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    const auto& names = landmark_names();
    if (std::find(names.begin(), names.end(), key) == names.end()) {
      fail(ErrorKind::parse, "unknown landmark '" + key + "'");
    }
  }
  LandmarkSet lm;
  for (std::size_t i = 0; i < 6; ++i) {
    const std::string name(landmark_names()[i]);
    if (!j.contains(name)) fail(ErrorKind::parse, "missing landmark '" + name + "'");
    const auto& p = j.at(name);
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      fail(ErrorKind::parse, "landmark '" + name + "' must be [x, y]");
    }
    lm[i] = {p[0].get<double>(), p[1].get<double>()};
  }
  return lm;
}

LandmarkSet read_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, path.string() + ": " + e.what());
  }
  return landmarks_from_json(j);
}

void write_landmarks(const LandmarkSet& lm, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << to_json(lm).dump() << '\n';
}

// ---- affine ------------------------------------------------------------------

Affine Affine::inverse() const {
  const double det = m[0] * m[4] - m[1] * m[3];
  if (det == 0.0 || !std::isfinite(det)) {
    fail(ErrorKind::degenerate_landmarks, "affine map is singular");
  }
  const double a = m[4] / det, b = -m[1] / det, d = -m[3] / det, e = m[0] / det;
  return Affine{{a, b, -(a * m[2] + b * m[5]), d, e, -(d * m[2] + e * m[5])}};
}

Affine solve_affine(const std::array<Point, 3>& src, const std::array<Point, 3>& dst) {
  if (triangle_area(src) <= 1e-6) {
    fail(ErrorKind::degenerate_landmarks, "source triangle is collinear");
  }
  // Work relative to src[0] to keep the system well conditioned.
  const double ux = src[1].x - src[0].x, uy = src[1].y - src[0].y;
  const double vx = src[2].x - src[0].x, vy = src[2].y - src[0].y;
  const double det = ux * vy - vx * uy;
  Affine a;
  for (int row = 0; row < 2; ++row) {
    auto coord = [&](const Point& p) { return row == 0 ? p.x : p.y; };
    const double du = coord(dst[1]) - coord(dst[0]);
    const double dv = coord(dst[2]) - coord(dst[0]);
    const double gx = (du * vy - dv * uy) / det;
    const double gy = (ux * dv - vx * du) / det;
    a.m[3 * row] = gx;
    a.m[3 * row + 1] = gy;
    a.m[3 * row + 2] = coord(dst[0]) - gx * src[0].x - gy * src[0].y;
  }
  return a;
}

AffinePair solve_affine_pair(const LandmarkSet& anchors, const LandmarkSet& landmarks) {
  validate(landmarks);
  return {solve_affine(anchors.left(), landmarks.left()),
          solve_affine(anchors.right(), landmarks.right())};
}

// ---- template ------------------------------------------------------------------

void validate(const MaskTemplate& tmpl) {
  const auto& img = tmpl.image;
  if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height * 4) {
    fail(ErrorKind::config, "mask template raster is empty or inconsistent");
  }
  for (std::size_t i = 0; i < 6; ++i) {
    const Point& p = tmpl.anchors[i];
    if (!(p.x >= 0 && p.y >= 0 && p.x <= static_cast<double>(img.width - 1) &&
          p.y <= static_cast<double>(img.height - 1))) {
      fail(ErrorKind::out_of_bounds,
           "template anchor " + std::string(landmark_names()[i]) + " lies outside the raster");
    }
  }
  validate(tmpl.anchors);
}

MaskTemplate surgical_template(std::size_t width, std::size_t height) {
  if (width < 32 || height < 24) fail(ErrorKind::config, "template must be at least 32x24");
  MaskTemplate t;
  t.image = Raster(width, height, 0);
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  const double cx = 0.5 * (w - 1);
  const double left = 0.06 * w, right = w - 1 - 0.06 * w;
  const double half = cx - left;
  auto top = [&](double x) {
    const double s = std::abs(x - cx) / half;
    return 0.12 * h + 0.14 * h * s * s;
  };
  auto bottom = [&](double x) {
    const double s = std::abs(x - cx) / half;
    return 0.88 * h - 0.10 * h * s * s;
  };
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      // Signed distance (in px) to the nearest outline edge, positive inside.
      const double inside = std::min({fx - left, right - fx, fy - top(fx), bottom(fx) - fy});
      if (inside < -0.5) continue;
      auto* p = t.image.at(x, y);
      const double rel = (fy - top(fx)) / std::max(1.0, bottom(fx) - top(fx));
      const bool pleat = std::abs(std::fmod(rel * 4.0, 1.0) - 0.5) < 0.06;
      p[0] = pleat ? 92 : 118;
      p[1] = pleat ? 150 : 178;
      p[2] = pleat ? 196 : 224;
      p[3] = inside >= 0.5 ? 255 : 128;
    }
  const double nb = 0.11 * w;
  const double jaw = 0.16 * (right - left);
  t.anchors[0] = {left + jaw, bottom(left + jaw) - 1.0};
  t.anchors[1] = {left + 1.0, 0.45 * h};
  t.anchors[2] = {cx - nb, top(cx - nb) + 1.0};
  t.anchors[3] = {cx + nb, top(cx + nb) + 1.0};
  t.anchors[4] = {right - 1.0, 0.45 * h};
  t.anchors[5] = {right - jaw, bottom(right - jaw) - 1.0};
  validate(t);
  return t;
}

// ---- warp ------------------------------------------------------------------------

namespace {

struct Sample {
  double alpha = 0.0;  // 0..255
  double rgb[3] = {0, 0, 0};
};

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

// Bilinear sample on premultiplied colour; outside the raster is transparent.
Sample sample(const Raster& img, Point p) {
  Sample s;
  const double u = snap(p.x), v = snap(p.y);
  const double fx0 = std::floor(u), fy0 = std::floor(v);
  const double fx = u - fx0, fy = v - fy0;
  const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
  const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
  if (x0 < -1 || y0 < -1 || x0 >= w || y0 >= h) return s;
  if (fx == 0.0 && fy == 0.0) {
    if (x0 < 0 || y0 < 0) return s;
    const auto* px = img.at(static_cast<std::size_t>(x0), static_cast<std::size_t>(y0));
    s.alpha = px[3];
    for (int k = 0; k < 3; ++k) s.rgb[k] = px[k];
    return s;
  }
  double premul[3] = {0, 0, 0};
  const long xs[2] = {x0, x0 + 1};
  const long ys[2] = {y0, y0 + 1};
  const double wx[2] = {1 - fx, fx};
  const double wy[2] = {1 - fy, fy};
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) {
      const double weight = wx[i] * wy[j];
      if (weight == 0.0 || xs[i] < 0 || ys[j] < 0 || xs[i] >= w || ys[j] >= h) continue;
      const auto* px = img.at(static_cast<std::size_t>(xs[i]), static_cast<std::size_t>(ys[j]));
      s.alpha += weight * px[3];
      for (int k = 0; k < 3; ++k) premul[k] += weight * px[3] * px[k];
    }
  if (s.alpha > 0.0) {
    for (int k = 0; k < 3; ++k) s.rgb[k] = premul[k] / s.alpha;
  }
  return s;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

}  // namespace

Raster apply_mask(const Raster& image, const MaskTemplate& tmpl, const LandmarkSet& landmarks) {
  validate(tmpl);
  if (image.width == 0 || image.height == 0 ||
      image.pixels.size() != image.width * image.height * 4) {
    fail(ErrorKind::dimension, "image raster is empty or inconsistent");
  }
  for (std::size_t i = 0; i < 6; ++i) {
    const Point& p = landmarks[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) break;  // reported by validate below
    if (p.x < 0 || p.y < 0 || p.x > static_cast<double>(image.width - 1) ||
        p.y > static_cast<double>(image.height - 1)) {
      fail(ErrorKind::out_of_bounds, std::string(landmark_names()[i]) + " lies outside the " +
                                         std::to_string(image.width) + "x" +
                                         std::to_string(image.height) + " image");
    }
  }
  const AffinePair maps = solve_affine_pair(tmpl.anchors, landmarks);
  const Affine inv_left = maps.left.inverse();
  const Affine inv_right = maps.right.inverse();
  const double seam = tmpl.seam_x();

  // Output region touched by either warped half.
  const double tw = static_cast<double>(tmpl.image.width);
  const double th = static_cast<double>(tmpl.image.height);
  double lo_x = 1e300, lo_y = 1e300, hi_x = -1e300, hi_y = -1e300;
  for (const Affine* a : {&maps.left, &maps.right}) {
    for (Point c : {Point{-1, -1}, Point{tw, -1}, Point{-1, th}, Point{tw, th}}) {
      const Point q = a->apply(c);
      lo_x = std::min(lo_x, q.x);
      lo_y = std::min(lo_y, q.y);
      hi_x = std::max(hi_x, q.x);
      hi_y = std::max(hi_y, q.y);
    }
  }
  const double max_x = static_cast<double>(image.width - 1);
  const double max_y = static_cast<double>(image.height - 1);
  const auto x_begin = static_cast<std::size_t>(std::clamp(std::floor(lo_x), 0.0, max_x));
  const auto x_end = static_cast<std::size_t>(std::clamp(std::ceil(hi_x), 0.0, max_x));
  const auto y_begin = static_cast<std::size_t>(std::clamp(std::floor(lo_y), 0.0, max_y));
  const auto y_end = static_cast<std::size_t>(std::clamp(std::ceil(hi_y), 0.0, max_y));

  Raster out = image;
  for (std::size_t y = y_begin; y <= y_end; ++y)
    for (std::size_t x = x_begin; x <= x_end; ++x) {
      const Point p{static_cast<double>(x), static_cast<double>(y)};
      Point src = inv_left.apply(p);
      if (snap(src.x) > seam) {
        src = inv_right.apply(p);
        if (snap(src.x) <= seam) continue;
      }
      const Sample s = sample(tmpl.image, src);
      if (s.alpha <= 0.0) continue;
      auto* d = out.at(x, y);
      const double as = s.alpha / 255.0;
      const double ad = d[3] / 255.0;
      const double ao = as + ad * (1.0 - as);
      for (int k = 0; k < 3; ++k) {
        d[k] = to_byte((s.rgb[k] * as + d[k] * ad * (1.0 - as)) / ao);
      }
      d[3] = std::max(d[3], to_byte(ao * 255.0));
    }
  return out;
}

// ---- synthetic faces -------------------------------------------------------------

LandmarkSet synth_landmarks(std::size_t width, std::size_t height, Rng& rng) {
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  static const double base[6][2] = {{0.30, 0.84}, {0.20, 0.64}, {0.43, 0.48},
                                    {0.57, 0.48}, {0.80, 0.64}, {0.70, 0.84}};
  const double angle = rng.uniform(-0.12, 0.12);
  const double scale = rng.uniform(0.9, 1.05);
  const double ox = rng.uniform(-0.03, 0.03), oy = rng.uniform(-0.03, 0.03);
  LandmarkSet lm;
  for (std::size_t i = 0; i < 6; ++i) {
    const double bx = base[i][0] - 0.5, by = base[i][1] - 0.5;
    const double jx = rng.uniform(-0.015, 0.015), jy = rng.uniform(-0.015, 0.015);
    const double rx = scale * (std::cos(angle) * bx - std::sin(angle) * by) + 0.5 + ox + jx;
    const double ry = scale * (std::sin(angle) * bx + std::cos(angle) * by) + 0.5 + oy + jy;
    lm[i] = {std::clamp(rx * w, 0.0, w - 1), std::clamp(ry * h, 0.0, h - 1)};
  }
  return lm;
}

SynthFace synth_face(std::size_t size, const Rng& subject, Rng& pose) {
  if (size < 16) fail(ErrorKind::config, "synthetic faces need size >= 16");
  Rng rng = subject;
  const double s = static_cast<double>(size);
  SynthFace f{Raster(size, size, 0), {}};
  const std::uint8_t bg = static_cast<std::uint8_t>(rng.uniform(40, 200));
  const double skin[3] = {rng.uniform(150, 240), rng.uniform(110, 190), rng.uniform(80, 160)};
  const double hair = rng.uniform(10, 90);
  const double cx = 0.5 * s + pose.uniform(-0.02, 0.02) * s;
  const double cy = 0.52 * s + pose.uniform(-0.02, 0.02) * s;
  const double rx = rng.uniform(0.30, 0.36) * s, ry = rng.uniform(0.40, 0.46) * s;
  const double eye_y = cy - 0.12 * s, eye_dx = 0.12 * s, eye_r = 0.035 * s;
  const double mouth_y = cy + 0.22 * s;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
      auto* p = f.image.at(x, y);
      p[3] = 255;
      const double e = ((fx - cx) / rx) * ((fx - cx) / rx) + ((fy - cy) / ry) * ((fy - cy) / ry);
      if (e > 1.0) {
        p[0] = p[1] = p[2] = bg;
        continue;
      }
      double c[3] = {skin[0], skin[1], skin[2]};
      if (fy < cy - 0.28 * s) c[0] = c[1] = c[2] = hair;
      for (double ex : {cx - eye_dx, cx + eye_dx}) {
        if ((fx - ex) * (fx - ex) + (fy - eye_y) * (fy - eye_y) < eye_r * eye_r) {
          c[0] = c[1] = c[2] = 30;
        }
      }
      if (std::abs(fy - mouth_y) < 0.015 * s + 0.5 && std::abs(fx - cx) < 0.1 * s) {
        c[0] = 170;
        c[1] = 60;
        c[2] = 70;
      }
      for (int k = 0; k < 3; ++k) p[k] = to_byte(c[k]);
    }
  f.landmarks = synth_landmarks(size, size, pose);
  return f;
}

// ---- datasets --------------------------------------------------------------------

MaskRun mask_dataset(const DatasetManifest& manifest, const std::filesystem::path& landmarks_dir,
                     const MaskTemplate& tmpl, const std::filesystem::path& out_dir,
                     const std::filesystem::path& source_root, std::size_t jobs) {
  validate(tmpl);
  const std::size_t n = manifest.size();
  if (n > 0) std::filesystem::create_directories(out_dir);
  std::vector<std::optional<SampleRecord>> results(n);
  std::vector<std::string> errors(n);

  auto process = [&](std::size_t i) {
    const SampleRecord& rec = manifest.records[i];
    try {
      const auto sidecar = landmarks_dir / (rec.id + ".json");
      if (!std::filesystem::exists(sidecar)) {
        errors[i] = "missing landmark sidecar " + sidecar.string();
        return;
      }
      const LandmarkSet lm = read_landmarks(sidecar);
      std::filesystem::path src = rec.source;
      if (src.is_relative() && !source_root.empty()) src = source_root / src;
      const Raster masked = apply_mask(read_png(src), tmpl, lm);
      const std::string id = rec.id + "_masked";
      const auto dst = out_dir / (id + ".png");
      write_png(masked, dst);
      results[i] = SampleRecord{id, dst.string(), rec.label, true};
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  };

  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(1, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) process(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < jobs; ++t) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) process(i);
      });
    }
    for (auto& w : workers) w.join();
  }

  MaskRun run;
  std::vector<SampleRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    if (results[i]) {
      records.push_back(std::move(*results[i]));
    } else {
      run.failures.push_back({manifest.records[i].id, errors[i]});
    }
  }
  run.manifest = make_manifest(std::move(records), manifest.vocabulary);
  return run;
}

}  // namespace mfr
