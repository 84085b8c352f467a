#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mfr/image.hpp"
#include "mfr/manifest.hpp"
#include "mfr/rng.hpp"

#include <json.hpp>

namespace mfr {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

/// Six facial keypoints in pixel coordinates (origin top-left), in the order
/// left_jaw, left_cheek, nose_bridge_left, nose_bridge_right, right_cheek,
/// right_jaw. The first three form the left triangle, the last three the
/// right triangle.
struct LandmarkSet {
  std::array<Point, 6> points{};

  const Point& operator[](std::size_t i) const { return points[i]; }
  Point& operator[](std::size_t i) { return points[i]; }

  std::array<Point, 3> left() const { return {points[0], points[1], points[2]}; }
  std::array<Point, 3> right() const { return {points[3], points[4], points[5]}; }

  friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;
};

const std::array<std::string_view, 6>& landmark_names();

double triangle_area(const std::array<Point, 3>& t);
// Finite coordinates and both triangles with area > 1e-6 px^2.
void validate(const LandmarkSet& lm);

nlohmann::json to_json(const LandmarkSet& lm);
LandmarkSet landmarks_from_json(const nlohmann::json& j);
LandmarkSet read_landmarks(const std::filesystem::path& path);
void write_landmarks(const LandmarkSet& lm, const std::filesystem::path& path);

// Row-major 2x3 matrix [[a, b, c], [d, e, f]] mapping (x, y) to
// (a x + b y + c, d x + e y + f).
struct Affine {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  Point apply(Point p) const { return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]}; }
  Affine inverse() const;
};

/// Exact affine map with A(src[i]) = dst[i], solved by Cramer's rule.
Affine solve_affine(const std::array<Point, 3>& src, const std::array<Point, 3>& dst);

struct AffinePair {
  Affine left;
  Affine right;
};

AffinePair solve_affine_pair(const LandmarkSet& anchors, const LandmarkSet& landmarks);

struct MaskTemplate {
  Raster image;
  LandmarkSet anchors;

  // Template columns u <= seam_x() belong to the left half.
  double seam_x() const { return 0.5 * (anchors[2].x + anchors[3].x); }
};

void validate(const MaskTemplate& tmpl);

/// Procedural pleated surgical mask. Anchors sit on the mask outline: jaw
/// points at the lower corners, cheek points at mid-height on the sides and
/// the nose-bridge pair on the upper edge either side of the centre.
MaskTemplate surgical_template(std::size_t width = 128, std::size_t height = 80);

/// Warps each half of the template with its affine map (inverse mapping,
/// bilinear sampling on premultiplied colour, transparent outside the
/// template) and composites it source-over onto `image`. Pixels where the
/// warped template has zero alpha are left untouched.
Raster apply_mask(const Raster& image, const MaskTemplate& tmpl, const LandmarkSet& landmarks);

// Deterministic plausible landmark set for a face-sized image.
LandmarkSet synth_landmarks(std::size_t width, std::size_t height, Rng& rng);

struct SynthFace {
  Raster image;
  LandmarkSet landmarks;
};

/// Procedural face (skin ellipse, hair, eyes, mouth) with matching
/// landmarks. Appearance depends only on `subject`, so images of one subject
/// share it; face placement and landmarks are drawn from `pose`.
SynthFace synth_face(std::size_t size, const Rng& subject, Rng& pose);

struct MaskFailure {
  std::string id;
  std::string reason;
};

struct MaskRun {
  DatasetManifest manifest;  // masked records, in input order
  std::vector<MaskFailure> failures;
};

/// Masks every record using `landmarks_dir/<id>.json`, writing
/// `out_dir/<id>_masked.png`. Output records get id `<id>_masked` and
/// masked = true. Records with a missing or invalid sidecar, unreadable
/// image or degenerate landmarks are reported and skipped. Relative sources
/// resolve against `source_root`. `jobs` worker threads share the records;
/// results do not depend on it.
MaskRun mask_dataset(const DatasetManifest& manifest, const std::filesystem::path& landmarks_dir,
                     const MaskTemplate& tmpl, const std::filesystem::path& out_dir,
                     const std::filesystem::path& source_root = {}, std::size_t jobs = 1);

}  // namespace mfr
