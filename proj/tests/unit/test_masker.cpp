#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "mfr/error.hpp"
#include "mfr/masker.hpp"

using namespace mfr;
namespace fs = std::filesystem;

namespace {

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an mfr::Error");
  return ErrorKind::data;
}

std::array<Point, 3> random_triangle(Rng& rng) {
  std::array<Point, 3> t;
  do {
    for (auto& p : t) p = {rng.uniform(-200, 200), rng.uniform(-200, 200)};
  } while (triangle_area(t) < 1.0);
  return t;
}

// Least-squares oracle: normal equations of the 6x6 system, Gaussian
// elimination with partial pivoting.
std::array<double, 6> lsq_affine(const std::array<Point, 3>& s, const std::array<Point, 3>& d) {
  double A[6][6] = {}, rhs[6] = {};
  for (int i = 0; i < 3; ++i)
    for (int row = 0; row < 2; ++row) {
      double a[6] = {};
      a[3 * row] = s[i].x;
      a[3 * row + 1] = s[i].y;
      a[3 * row + 2] = 1;
      const double b = row == 0 ? d[i].x : d[i].y;
      for (int r = 0; r < 6; ++r) {
        rhs[r] += a[r] * b;
        for (int c = 0; c < 6; ++c) A[r][c] += a[r] * a[c];
      }
    }
  for (int c = 0; c < 6; ++c) {
    int piv = c;
    for (int r = c + 1; r < 6; ++r)
      if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
    std::swap(A[c], A[piv]);
    std::swap(rhs[c], rhs[piv]);
    for (int r = c + 1; r < 6; ++r) {
      const double f = A[r][c] / A[c][c];
      for (int k = c; k < 6; ++k) A[r][k] -= f * A[c][k];
      rhs[r] -= f * rhs[c];
    }
  }
  std::array<double, 6> x{};
  for (int r = 5; r >= 0; --r) {
    double v = rhs[r];
    for (int k = r + 1; k < 6; ++k) v -= A[r][k] * x[k];
    x[r] = v / A[r][r];
  }
  return x;
}

double dist(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

Raster random_raster(std::size_t w, std::size_t h, Rng& rng, bool random_alpha = false) {
  Raster r(w, h);
  for (std::size_t i = 0; i < r.pixels.size(); ++i) {
    r.pixels[i] = (i % 4 == 3 && !random_alpha) ? 255 : static_cast<std::uint8_t>(rng.uniform_index(256));
  }
  return r;
}

LandmarkSet shifted(const LandmarkSet& lm, double dx, double dy) {
  LandmarkSet out = lm;
  for (auto& p : out.points) p = {p.x + dx, p.y + dy};
  return out;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

// ---- affine ----------------------------------------------------------------------

TEST_CASE("solve_affine examples") {
  const std::array<Point, 3> src{Point{1, 2}, Point{10, 3}, Point{4, 9}};
  CHECK(solve_affine(src, src).m == std::array<double, 6>{1, 0, 0, 0, 1, 0});
  const std::array<Point, 3> moved{Point{6, 7}, Point{15, 8}, Point{9, 14}};
  CHECK(solve_affine(src, moved).m == std::array<double, 6>{1, 0, 5, 0, 1, 5});

  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    auto s = random_triangle(rng);
    auto d = random_triangle(rng);
    Affine a = solve_affine(s, d);
    for (int k = 0; k < 3; ++k) CHECK(dist(a.apply(s[k]), d[k]) < 1e-9);
    auto ref = lsq_affine(s, d);
    for (int k = 0; k < 6; ++k) CHECK(a.m[k] == doctest::Approx(ref[k]).epsilon(1e-7));
  }

  const std::array<Point, 3> line{Point{0, 0}, Point{1, 1}, Point{2, 2}};
  CHECK(kind_of([&] { solve_affine(line, src); }) == ErrorKind::degenerate_landmarks);
}

TEST_CASE("affine inverse undoes the map") {
  Rng rng(3);
  auto s = random_triangle(rng), d = random_triangle(rng);
  Affine a = solve_affine(s, d);
  Point p{12.5, -3.25};
  CHECK(dist(a.inverse().apply(a.apply(p)), p) < 1e-9);
}

TEST_CASE("warp is exact on anchors for random landmark sets") {
  const MaskTemplate tmpl = surgical_template();
  Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t size = 64 + rng.uniform_index(200);
    LandmarkSet lm = synth_landmarks(size, size, rng);
    AffinePair maps = solve_affine_pair(tmpl.anchors, lm);
    for (int k = 0; k < 3; ++k) {
      CHECK(dist(maps.left.apply(tmpl.anchors[k]), lm[k]) < 0.5);
      CHECK(dist(maps.right.apply(tmpl.anchors[3 + k]), lm[3 + k]) < 0.5);
    }
  }
}

TEST_CASE("halves agree on the seam when landmarks are one affine image of the anchors") {
  const MaskTemplate tmpl = surgical_template();
  const double seam = tmpl.seam_x();
  const Point top{seam, tmpl.anchors[2].y};
  const Point bottom{seam, static_cast<double>(tmpl.image.height - 1)};
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    Affine g{{rng.uniform(0.5, 2), rng.uniform(-0.3, 0.3), rng.uniform(-50, 50),
              rng.uniform(-0.3, 0.3), rng.uniform(0.5, 2), rng.uniform(-50, 50)}};
    LandmarkSet lm;
    for (int k = 0; k < 6; ++k) lm[k] = g.apply(tmpl.anchors[k]);
    AffinePair maps = solve_affine_pair(tmpl.anchors, lm);
    CHECK(dist(maps.left.apply(top), maps.right.apply(top)) < 1e-9);
    CHECK(dist(maps.left.apply(bottom), maps.right.apply(bottom)) < 1e-9);
  }
}

// ---- template and landmarks ----------------------------------------------------

TEST_CASE("bundled template is valid") {
  MaskTemplate t = surgical_template();
  CHECK(t.image.width == 128);
  CHECK(t.image.height == 80);
  for (int k = 0; k < 6; ++k) CHECK(t.image.at(std::size_t(t.anchors[k].x), std::size_t(t.anchors[k].y))[3] > 0);
  CHECK(t.anchors[2].x < t.seam_x());
  CHECK(t.anchors[3].x > t.seam_x());
}

TEST_CASE("landmark JSON") {
  Rng rng(1);
  LandmarkSet lm = synth_landmarks(100, 100, rng);
  CHECK(landmarks_from_json(nlohmann::json::parse(to_json(lm).dump())) == lm);
  auto j = to_json(lm);
  j["chin"] = {1, 2};
  CHECK(kind_of([&] { landmarks_from_json(j); }) == ErrorKind::parse);
  j = to_json(lm);
  j.erase("right_jaw");
  CHECK(kind_of([&] { landmarks_from_json(j); }) == ErrorKind::parse);

  LandmarkSet flat = lm;
  flat[1] = {(flat[0].x + flat[2].x) / 2, (flat[0].y + flat[2].y) / 2};
  CHECK(kind_of([&] { validate(flat); }) == ErrorKind::degenerate_landmarks);
}

// ---- apply_mask ------------------------------------------------------------------

TEST_CASE("apply_mask examples") {
  MaskTemplate tmpl = surgical_template();
  Rng rng(5);
  Raster face = random_raster(160, 120, rng);

  SUBCASE("transparent template is a no-op") {
    MaskTemplate clear = tmpl;
    for (std::size_t i = 3; i < clear.image.pixels.size(); i += 4) clear.image.pixels[i] = 0;
    LandmarkSet lm = synth_landmarks(160, 120, rng);
    CHECK(apply_mask(face, clear, lm) == face);
  }

  SUBCASE("identity warp composites the template in place") {
    Raster out = apply_mask(face, tmpl, tmpl.anchors);
    for (std::size_t y = 0; y < 120; ++y)
      for (std::size_t x = 0; x < 160; ++x) {
        const auto* o = out.at(x, y);
        const auto* f = face.at(x, y);
        if (x >= tmpl.image.width || y >= tmpl.image.height || tmpl.image.at(x, y)[3] == 0) {
          CHECK(std::equal(o, o + 4, f));
          continue;
        }
        const auto* t = tmpl.image.at(x, y);
        const double as = t[3] / 255.0;
        for (int k = 0; k < 3; ++k) {
          const double expect = std::round(t[k] * as + f[k] * (1 - as));
          CHECK(o[k] == expect);
        }
        CHECK(o[3] == 255);
      }
  }

  SUBCASE("translated landmarks shift every opaque pixel by exactly (5, 5)") {
    Raster out = apply_mask(face, tmpl, shifted(tmpl.anchors, 5, 5));
    for (std::size_t y = 0; y < 120; ++y)
      for (std::size_t x = 0; x < 160; ++x) {
        const auto* o = out.at(x, y);
        const bool inside = x >= 5 && y >= 5 && x - 5 < tmpl.image.width && y - 5 < tmpl.image.height;
        const std::uint8_t a = inside ? tmpl.image.at(x - 5, y - 5)[3] : 0;
        if (a == 255) {
          CHECK(std::equal(o, o + 4, tmpl.image.at(x - 5, y - 5)));
        } else if (a == 0) {
          CHECK(std::equal(o, o + 4, face.at(x, y)));
        }
      }
  }

  SUBCASE("errors") {
    LandmarkSet lm = shifted(tmpl.anchors, 5, 5);
    lm[5].x = 500;
    CHECK(kind_of([&] { apply_mask(face, tmpl, lm); }) == ErrorKind::out_of_bounds);
    LandmarkSet flat = tmpl.anchors;
    flat[4] = flat[3];
    CHECK(kind_of([&] { apply_mask(face, tmpl, flat); }) == ErrorKind::degenerate_landmarks);
  }
}

TEST_CASE("compositing never lowers alpha") {
  MaskTemplate tmpl = surgical_template();
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    Raster face = random_raster(96, 96, rng, true);
    LandmarkSet lm = synth_landmarks(96, 96, rng);
    Raster out = apply_mask(face, tmpl, lm);
    std::size_t changed = 0;
    for (std::size_t p = 3; p < out.pixels.size(); p += 4) {
      CHECK(out.pixels[p] >= face.pixels[p]);
      changed += out.pixels[p - 1] != face.pixels[p - 1];
    }
    CHECK(changed > 0);
  }
}

TEST_CASE("synthetic faces come with in-bounds landmarks") {
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    SynthFace f = synth_face(64, rng.derive(i), rng);
    CHECK(f.image.width == 64);
    Raster out = apply_mask(f.image, surgical_template(), f.landmarks);
    CHECK(out.width == 64);
  }
}

// ---- mask_dataset ----------------------------------------------------------------

TEST_CASE("mask_dataset examples") {
  const fs::path root = fs::temp_directory_path() / "mfr_test_masker";
  fs::remove_all(root);
  fs::create_directories(root / "img");
  fs::create_directories(root / "lm");
  const MaskTemplate tmpl = surgical_template();

  SUBCASE("empty manifest") {
    MaskRun run = mask_dataset(DatasetManifest{}, root / "lm", tmpl, root / "out_empty");
    CHECK(run.manifest.size() == 0);
    CHECK(run.failures.empty());
    CHECK(!fs::exists(root / "out_empty"));
  }

  SUBCASE("partial failure, determinism and job independence") {
    Rng rng(6);
    std::vector<SampleRecord> recs;
    for (int i = 0; i < 3; ++i) {
      SynthFace f = synth_face(64, rng.derive(i), rng);
      const std::string id = "face" + std::to_string(i);
      write_png(f.image, root / "img" / (id + ".png"));
      if (i != 1) write_landmarks(f.landmarks, root / "lm" / (id + ".json"));
      recs.push_back({id, "img/" + id + ".png", i == 2 ? "bob" : "alice", false});
    }
    DatasetManifest m = make_manifest(recs);
    MaskRun a = mask_dataset(m, root / "lm", tmpl, root / "out_a", root);
    REQUIRE(a.manifest.size() == 2);
    REQUIRE(a.failures.size() == 1);
    CHECK(a.failures[0].id == "face1");
    CHECK(a.manifest.records[0].id == "face0_masked");
    CHECK(a.manifest.records[1].masked);
    CHECK(a.manifest.vocabulary == m.vocabulary);

    MaskRun b = mask_dataset(m, root / "lm", tmpl, root / "out_b", root, 3);
    CHECK(b.manifest.size() == 2);
    for (const char* f : {"face0_masked.png", "face2_masked.png"}) {
      CHECK(file_bytes(root / "out_a" / f) == file_bytes(root / "out_b" / f));
      CHECK(!(read_png(root / "out_a" / f) == read_png(root / "img" / (std::string(f).substr(0, 5) + ".png"))));
    }
  }
}
