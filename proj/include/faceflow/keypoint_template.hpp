#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "faceflow/error.hpp"
#include "faceflow/geometry.hpp"

namespace faceflow {

struct KeypointTemplate {
  KeypointSet points;
  int width = 0;
  int height = 0;

  friend bool operator==(const KeypointTemplate&, const KeypointTemplate&) = default;
};

// Margins as fractions of the output size.
inline constexpr double kMarginTop = 0.2;
inline constexpr double kMarginLeft = 0.2;
inline constexpr double kMarginRight = 0.2;
inline constexpr double kMarginBottom = 0.1;

namespace detail {

struct SymmetricLayout {
  double center;
  double eye_half;
  double mouth_half;
  double eye_y;
  double nose_y;
  double mouth_y;
};

inline SymmetricLayout symmetric_layout(const KeypointSet& raw) {
  if (raw.size() != kCanonicalKeypoints) {
    throw Error(ErrorCode::InvalidArgument, "template construction needs exactly 5 keypoints");
  }
  for (const auto& p : raw.points) {
    if (!p.finite()) throw Error(ErrorCode::NonFinite, "template keypoint is NaN or infinite");
  }
  const Point2 le = raw.at(Landmark::left_eye), re = raw.at(Landmark::right_eye);
  const Point2 lm = raw.at(Landmark::left_mouth), rm = raw.at(Landmark::right_mouth);
  if (!(le.x < re.x)) throw Error(ErrorCode::InvalidArgument, "left eye must lie left of right eye");
  // Mean distance from the centerline of a pair is half its x-span, whatever
  // the centerline, which keeps mirrored inputs bit-identical.
  return {0.25 * (le.x + re.x + lm.x + rm.x),
          0.5 * (re.x - le.x),
          0.5 * (rm.x - lm.x),
          0.5 * (le.y + re.y),
          raw.at(Landmark::nose).y,
          0.5 * (lm.y + rm.y)};
}

}  // namespace detail

/// Mirror-symmetrize a five-point layout about its own vertical centerline.
///
/// Paired points (eyes, mouth corners) receive their pair's mean y and mean
/// distance from the centerline; the nose moves onto the centerline. The
/// centerline is the mean x of the four paired points.
inline KeypointSet symmetrize(const KeypointSet& raw) {
  const auto s = detail::symmetric_layout(raw);
  KeypointSet out;
  out.points = {{s.center - s.eye_half, s.eye_y},
                {s.center + s.eye_half, s.eye_y},
                {s.center, s.nose_y},
                {s.center - s.mouth_half, s.mouth_y},
                {s.center + s.mouth_half, s.mouth_y}};
  return out;
}

/// Symmetrize `raw` and fit it into the output image, leaving 20% margins at
/// the top, left and right edges and 10% at the bottom. Scaling is uniform;
/// the layout is centered horizontally on width/2 and vertically inside the
/// margin box.
inline KeypointTemplate build_template(const KeypointSet& raw, int width, int height) {
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "output size must be positive");
  const auto s = detail::symmetric_layout(raw);

  const double half_w = std::max({s.eye_half, s.mouth_half, -s.eye_half, -s.mouth_half});
  const double ymin = std::min({s.eye_y, s.nose_y, s.mouth_y});
  const double ymax = std::max({s.eye_y, s.nose_y, s.mouth_y});
  const double box_w = 2.0 * half_w;
  const double box_h = ymax - ymin;
  if (!(box_w > 0.0) || !(box_h > 0.0)) {
    throw Error(ErrorCode::DegenerateInput, "raw keypoint bounding box has zero width or height");
  }

  const double W = width, H = height;
  const double avail_w = W * (1.0 - kMarginLeft - kMarginRight);
  const double avail_h = H * (1.0 - kMarginTop - kMarginBottom);
  const double scale = std::min(avail_w / box_w, avail_h / box_h);
  const double top = H * kMarginTop + 0.5 * (avail_h - scale * box_h);
  const double mid = 0.5 * W;
  // Points are clamped to the margin box; right = W - left mirrors each pair about W/2.
  auto y_of = [&](double y) { return std::clamp(top + scale * (y - ymin), H * kMarginTop, H * (1.0 - kMarginBottom)); };
  auto left_of = [&](double half) { return std::max(mid - scale * half, W * kMarginLeft); };
  const double eye_l = left_of(s.eye_half);
  const double mouth_l = left_of(s.mouth_half);

  KeypointTemplate t;
  t.width = width;
  t.height = height;
  t.points.points = {{eye_l, y_of(s.eye_y)},
                     {W - eye_l, y_of(s.eye_y)},
                     {mid, y_of(s.nose_y)},
                     {mouth_l, y_of(s.mouth_y)},
                     {W - mouth_l, y_of(s.mouth_y)}};
  return t;
}

/// Hand-placed five-point layout of a frontal face (pixel coordinates of a
/// 112x112 crop). The shipped template is build_template(canonical_raw_keypoints(), 224, 224).
inline KeypointSet canonical_raw_keypoints() {
  return KeypointSet{{{38.29, 51.70}, {73.53, 51.50}, {56.03, 71.74}, {41.55, 92.37}, {70.73, 92.20}}};
}

inline KeypointTemplate default_template() { return build_template(canonical_raw_keypoints(), 224, 224); }

// Template file: "width height" then five "x y" lines.

inline std::string format_template(const KeypointTemplate& t) {
  std::ostringstream os;
  os << t.width << ' ' << t.height << '\n';
  char buf[64];
  for (const auto& p : t.points.points) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g\n", p.x, p.y);
    os << buf;
  }
  return os.str();
}

inline KeypointTemplate parse_template(std::istream& in) {
  KeypointTemplate t;
  std::string line;
  bool have_size = false;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    if (!have_size) {
      if (!(ls >> t.width >> t.height) || t.width <= 0 || t.height <= 0) {
        throw Error(ErrorCode::FormatError, "template header must be 'width height' with positive values");
      }
      have_size = true;
      continue;
    }
    Point2 p;
    if (!(ls >> p.x >> p.y) || !p.finite()) {
      throw Error(ErrorCode::FormatError, "malformed template point line: " + line);
    }
    std::string extra;
    if (ls >> extra) throw Error(ErrorCode::FormatError, "trailing data on template line: " + line);
    t.points.points.push_back(p);
  }
  if (!have_size) throw Error(ErrorCode::FormatError, "empty template file");
  if (t.points.size() != kCanonicalKeypoints) {
    throw Error(ErrorCode::FormatError,
                "template must contain exactly 5 points, found " + std::to_string(t.points.size()));
  }
  return t;
}

inline KeypointTemplate load_template(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::FormatError, "cannot open template file " + path);
  return parse_template(in);
}

inline void save_template(const KeypointTemplate& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::FormatError, "cannot write template file " + path);
  out << format_template(t);
}

}  // namespace faceflow
