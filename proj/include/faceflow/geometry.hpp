#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "faceflow/detail/svd.hpp"
#include "faceflow/error.hpp"

namespace faceflow {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
  bool finite() const { return std::isfinite(x) && std::isfinite(y); }
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Axis-aligned box, top-left corner plus extent, in pixels.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const Box&, const Box&) = default;

  Point2 centroid() const { return {x + 0.5 * w, y + 0.5 * h}; }
  double area() const { return w * h; }
  double diagonal() const { return std::hypot(w, h); }
  bool positive() const { return w > 0.0 && h > 0.0; }
};

/// Intersect `b` with the frame rectangle [0,width] x [0,height].
inline Box clamp_to_frame(const Box& b, double width, double height) {
  const double x0 = std::clamp(b.x, 0.0, width);
  const double y0 = std::clamp(b.y, 0.0, height);
  const double x1 = std::clamp(b.x + b.w, 0.0, width);
  const double y1 = std::clamp(b.y + b.h, 0.0, height);
  return {x0, y0, x1 - x0, y1 - y0};
}

enum class Landmark : std::size_t { left_eye = 0, right_eye, nose, left_mouth, right_mouth };

inline constexpr std::size_t kCanonicalKeypoints = 5;

/// Ordered keypoints: left eye, right eye, nose, left mouth corner, right
/// mouth corner when P == 5. Solving accepts any P >= 2.
struct KeypointSet {
  std::vector<Point2> points;

  friend bool operator==(const KeypointSet&, const KeypointSet&) = default;

  std::size_t size() const { return points.size(); }
  const Point2& operator[](std::size_t i) const { return points[i]; }
  Point2& operator[](std::size_t i) { return points[i]; }
  const Point2& at(Landmark l) const { return points.at(static_cast<std::size_t>(l)); }
  Point2& at(Landmark l) { return points.at(static_cast<std::size_t>(l)); }
};

/// v = s R(theta) u + t, the rotation/uniform-scale/translation subgroup of
/// affine maps. No shear.
struct SimilarityTransform {
  double scale = 1.0;
  double theta = 0.0;
  double tx = 0.0;
  double ty = 0.0;

  friend bool operator==(const SimilarityTransform&, const SimilarityTransform&) = default;

  double a() const { return scale * std::cos(theta); }
  double b() const { return scale * std::sin(theta); }

  Point2 apply(Point2 p) const {
    const double ca = a(), sb = b();
    return {ca * p.x - sb * p.y + tx, sb * p.x + ca * p.y + ty};
  }

  SimilarityTransform inverse() const {
    const double inv_s = 1.0 / scale;
    const double c = std::cos(theta), s = std::sin(theta);
    // -(1/s) R^T t
    const double itx = -inv_s * (c * tx + s * ty);
    const double ity = -inv_s * (-s * tx + c * ty);
    double itheta = -theta;
    if (itheta <= -std::numbers::pi) itheta += 2.0 * std::numbers::pi;
    return {inv_s, itheta, itx, ity};
  }

  static SimilarityTransform identity() { return {}; }
};

inline Point2 apply_transform(const SimilarityTransform& h, Point2 p) { return h.apply(p); }

inline KeypointSet apply_transform(const SimilarityTransform& h, const KeypointSet& k) {
  KeypointSet out;
  out.points.reserve(k.size());
  for (const auto& p : k.points) out.points.push_back(h.apply(p));
  return out;
}

/// Smallest-to-largest singular value ratio below which the stacked system is
/// treated as rank deficient.
inline constexpr double kDegeneracyRatio = 1e-12;

/// Least-squares similarity mapping `detected` onto `template_points`.
///
/// Each correspondence contributes the two rows
///   [ -y  -x  0  1 ]                 [ -y' ]
///   [  x  -y  1  0 ] * (a, b, c, d) = [  x' ]
/// with a = s cos(theta), b = s sin(theta). The system is solved through its
/// singular value decomposition. With y-down image coordinates the fourth
/// unknown of that row layout is -ty (the first row reads
/// y' = b x + a y - d), so ty = -d on decode.
inline SimilarityTransform solve_similarity(const KeypointSet& detected,
                                            const KeypointSet& template_points) {
  const std::size_t n = detected.size();
  if (n != template_points.size()) {
    throw Error(ErrorCode::MismatchedSize, "keypoint sets differ in size");
  }
  if (n < 2) throw Error(ErrorCode::DegenerateInput, "need at least two correspondences");
  for (std::size_t i = 0; i < n; ++i) {
    if (!detected[i].finite() || !template_points[i].finite()) {
      throw Error(ErrorCode::NonFinite, "keypoint coordinate is NaN or infinite");
    }
  }

  std::vector<std::array<double, 4>> rows;
  std::vector<double> rhs;
  rows.reserve(2 * n);
  rhs.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [x, y] = detected[i];
    const auto [xp, yp] = template_points[i];
    rows.push_back({-y, -x, 0.0, 1.0});
    rhs.push_back(-yp);
    rows.push_back({x, -y, 1.0, 0.0});
    rhs.push_back(xp);
  }

  const auto svd = detail::jacobi_svd<4>(rows);
  const double smax = *std::max_element(svd.sigma.begin(), svd.sigma.end());
  const double smin = *std::min_element(svd.sigma.begin(), svd.sigma.end());
  if (!(smax > 0.0) || smin / smax < kDegeneracyRatio) {
    throw Error(ErrorCode::DegenerateInput, "correspondence system is rank deficient");
  }

  // x = V diag(1/sigma) U^T b
  std::array<double, 4> sol{};
  for (std::size_t j = 0; j < 4; ++j) {
    double ub = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) ub += svd.u[i][j] * rhs[i];
    const double coef = ub / svd.sigma[j];
    for (std::size_t k = 0; k < 4; ++k) sol[k] += svd.v[k][j] * coef;
  }

  const double a = sol[0], b = sol[1];
  SimilarityTransform h;
  h.scale = std::hypot(a, b);
  h.theta = std::atan2(b, a);
  h.tx = sol[2];
  h.ty = -sol[3];
  return h;
}

/// Root-mean-square distance between h(detected_i) and template_i.
inline double residual(const SimilarityTransform& h, const KeypointSet& detected,
                       const KeypointSet& template_points) {
  if (detected.size() != template_points.size() || detected.size() == 0) {
    throw Error(ErrorCode::MismatchedSize, "keypoint sets differ in size or are empty");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < detected.size(); ++i) {
    const Point2 m = h.apply(detected[i]);
    const double dx = m.x - template_points[i].x;
    const double dy = m.y - template_points[i].y;
    sum += dx * dx + dy * dy;
  }
  return std::sqrt(sum / static_cast<double>(detected.size()));
}

}  // namespace faceflow
