#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "faceflow/geometry.hpp"
#include "faceflow/keypoint_template.hpp"
#include "support.hpp"

using namespace faceflow;

namespace {

constexpr double kPi = std::numbers::pi;

double rel_err(double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 1.0); }

double angle_err(double a, double b) {
  double d = std::fmod(a - b, 2 * kPi);
  if (d > kPi) d -= 2 * kPi;
  if (d < -kPi) d += 2 * kPi;
  return std::abs(d);
}

KeypointSet random_points(std::mt19937_64& rng, std::size_t n = 5) {
  std::uniform_real_distribution<double> u(0.0, 200.0);
  KeypointSet k;
  for (std::size_t i = 0; i < n; ++i) k.points.push_back({u(rng), u(rng)});
  return k;
}

SimilarityTransform random_transform(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> s(0.2, 5.0), th(-kPi, kPi), t(-100.0, 100.0);
  double theta = th(rng);
  if (theta == -kPi) theta = kPi;
  return {s(rng), theta, t(rng), t(rng)};
}

}  // namespace

TEST(ApplyTransform, Examples) {
  EXPECT_EQ(apply_transform(SimilarityTransform{1, 0, 0, 0}, Point2{7, 9}), (Point2{7, 9}));
  EXPECT_EQ(apply_transform(SimilarityTransform{2, 0, 1, 1}, Point2{3, 4}), (Point2{7, 9}));
  const Point2 q = apply_transform(SimilarityTransform{1, kPi / 2, 0, 0}, Point2{1, 0});
  EXPECT_NEAR(q.x, 0.0, 1e-15);
  EXPECT_NEAR(q.y, 1.0, 1e-15);
}

TEST(SolveSimilarity, IdentityAndTranslation) {
  const KeypointSet tmpl = default_template().points;
  const auto h = solve_similarity(tmpl, tmpl);
  EXPECT_NEAR(h.scale, 1.0, 1e-12);
  EXPECT_NEAR(h.theta, 0.0, 1e-12);
  EXPECT_NEAR(h.tx, 0.0, 1e-9);
  EXPECT_NEAR(h.ty, 0.0, 1e-9);

  KeypointSet shifted = tmpl;
  for (auto& p : shifted.points) p = {p.x - 5, p.y - 3};
  const auto g = solve_similarity(shifted, tmpl);
  EXPECT_NEAR(g.scale, 1.0, 1e-12);
  EXPECT_NEAR(g.theta, 0.0, 1e-12);
  EXPECT_NEAR(g.tx, 5.0, 1e-9);
  EXPECT_NEAR(g.ty, 3.0, 1e-9);
}

TEST(SolveSimilarity, RecoversKnownParameters) {
  const KeypointSet tmpl = default_template().points;
  const SimilarityTransform truth{2.0, kPi / 6, 10.0, -4.0};
  const KeypointSet detected = apply_transform(truth.inverse(), tmpl);
  const auto h = solve_similarity(detected, tmpl);
  EXPECT_LT(rel_err(h.scale, 2.0), 1e-9);
  EXPECT_LT(angle_err(h.theta, kPi / 6), 1e-9);
  EXPECT_LT(rel_err(h.tx, 10.0), 1e-9);
  EXPECT_LT(rel_err(h.ty, -4.0), 1e-9);
}

TEST(SolveSimilarity, Errors) {
  const KeypointSet one{{{1, 2}}};
  try {
    solve_similarity(one, one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateInput);
  }
  const KeypointSet same{{{3, 3}, {3, 3}, {3, 3}}};
  const KeypointSet tmpl{{{0, 0}, {1, 0}, {0, 1}}};
  try {
    solve_similarity(same, tmpl);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateInput);
  }
  KeypointSet bad = tmpl;
  bad[1].x = std::nan("");
  try {
    solve_similarity(bad, tmpl);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFinite);
  }
  EXPECT_THROW(solve_similarity(tmpl, one), Error);
}

TEST(SolveSimilarity, TwoPointsSuffice) {
  const KeypointSet tmpl{{{0, 0}, {10, 0}}};
  const SimilarityTransform truth{0.5, -1.0, 3.0, 7.0};
  const auto h = solve_similarity(apply_transform(truth.inverse(), tmpl), tmpl);
  EXPECT_LT(rel_err(h.scale, 0.5), 1e-9);
  EXPECT_LT(angle_err(h.theta, -1.0), 1e-9);
}

TEST(SolveSimilarity, RandomRoundTrip) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const SimilarityTransform truth = random_transform(rng);
    const KeypointSet detected = random_points(rng);
    const KeypointSet tmpl = apply_transform(truth, detected);
    const auto h = solve_similarity(detected, tmpl);
    ASSERT_LT(rel_err(h.scale, truth.scale), 1e-9) << trial;
    ASSERT_LT(angle_err(h.theta, truth.theta), 1e-9) << trial;
    ASSERT_LT(rel_err(h.tx, truth.tx), 1e-9) << trial;
    ASSERT_LT(rel_err(h.ty, truth.ty), 1e-9) << trial;
  }
}

TEST(SolveSimilarity, InverseRoundTrip) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const SimilarityTransform h = random_transform(rng);
    const Point2 p = random_points(rng, 1)[0];
    const Point2 back = h.inverse().apply(h.apply(p));
    EXPECT_LT(rel_err(back.x, p.x), 1e-9);
    EXPECT_LT(rel_err(back.y, p.y), 1e-9);
  }
}

TEST(Residual, Examples) {
  const KeypointSet tmpl = default_template().points;
  EXPECT_NEAR(residual(solve_similarity(tmpl, tmpl), tmpl, tmpl), 0.0, 1e-9);
  KeypointSet moved = tmpl;
  const double eps = 0.75;
  moved[2].x += eps;
  EXPECT_NEAR(residual(SimilarityTransform::identity(), moved, tmpl), eps / std::sqrt(5.0), 1e-12);
  EXPECT_THROW(residual({}, moved, KeypointSet{}), Error);
}

// Least-squares optimality against a coarse grid around the solution.
TEST(Residual, SolutionBeatsGridNeighbours) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const SimilarityTransform truth = random_transform(rng);
    const KeypointSet detected = random_points(rng);
    KeypointSet tmpl = apply_transform(truth, detected);
    for (auto& p : tmpl.points) p = {p.x + noise(rng), p.y + noise(rng)};
    const auto h = solve_similarity(detected, tmpl);
    const double best = residual(h, detected, tmpl);
    EXPECT_LE(best, residual(SimilarityTransform::identity(), detected, tmpl));
    for (int i = -3; i <= 3; ++i) {
      for (int j = -3; j <= 3; ++j) {
        for (int k = -3; k <= 3; ++k) {
          for (int l = -3; l <= 3; ++l) {
            SimilarityTransform g{h.scale * (1 + 1e-3 * i), h.theta + 1e-3 * j, h.tx + 0.05 * k, h.ty + 0.05 * l};
            ASSERT_LE(best, residual(g, detected, tmpl) * (1 + 1e-12));
          }
        }
      }
    }
  }
}

TEST(SolveSimilarity, TranslationEquivariance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const SimilarityTransform truth = random_transform(rng);
    const KeypointSet detected = random_points(rng);
    const KeypointSet tmpl = apply_transform(truth, detected);
    const Point2 w{std::uniform_real_distribution<double>(-50, 50)(rng), std::uniform_real_distribution<double>(-50, 50)(rng)};
    KeypointSet d2 = detected, t2 = tmpl;
    for (auto& p : d2.points) p = {p.x + w.x, p.y + w.y};
    for (auto& p : t2.points) p = {p.x + w.x, p.y + w.y};
    const auto h = solve_similarity(detected, tmpl);
    const auto g = solve_similarity(d2, t2);
    EXPECT_LT(rel_err(g.scale, h.scale), 1e-9);
    EXPECT_LT(angle_err(g.theta, h.theta), 1e-9);
    // t' = t + w - sR w
    const Point2 srw = SimilarityTransform{h.scale, h.theta, 0, 0}.apply(w);
    EXPECT_LT(rel_err(g.tx, h.tx + w.x - srw.x), 1e-9);
    EXPECT_LT(rel_err(g.ty, h.ty + w.y - srw.y), 1e-9);
  }
}

TEST(SolveSimilarity, RotationEquivariance) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const SimilarityTransform truth = random_transform(rng);
    const KeypointSet detected = random_points(rng);
    const KeypointSet tmpl = apply_transform(truth, detected);
    const double phi = std::uniform_real_distribution<double>(-kPi, kPi)(rng);
    const SimilarityTransform rot{1.0, phi, 0, 0};
    const auto h = solve_similarity(detected, tmpl);

    // Rotating the template by phi turns the solution by +phi; rotating the
    // detected points turns it by -phi.
    const auto g_tmpl = solve_similarity(detected, apply_transform(rot, tmpl));
    EXPECT_LT(angle_err(g_tmpl.theta, h.theta + phi), 1e-9);
    const auto g_det = solve_similarity(apply_transform(rot, detected), tmpl);
    EXPECT_LT(angle_err(g_det.theta, h.theta - phi), 1e-9);
    for (std::size_t i = 0; i < detected.size(); ++i) {
      const Point2 a = g_det.apply(rot.apply(detected[i]));
      const Point2 b = h.apply(detected[i]);
      EXPECT_LT(rel_err(a.x, b.x), 1e-9);
      EXPECT_LT(rel_err(a.y, b.y), 1e-9);
    }
  }
}

TEST(ApplyTransform, PreservesDistanceRatios) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    const SimilarityTransform h = random_transform(rng);
    const auto pq = random_points(rng, 2);
    const double before = distance(pq[0], pq[1]);
    const double after = distance(h.apply(pq[0]), h.apply(pq[1]));
    EXPECT_LT(std::abs(after - h.scale * before) / std::max(h.scale * before, 1e-300), 1e-9);
  }
}

// --- template ------------------------------------------------------------------

namespace {

void expect_symmetric(const KeypointTemplate& t) {
  const double mid = t.width / 2.0;
  const auto& p = t.points.points;
  ASSERT_EQ(p.size(), 5u);
  EXPECT_NEAR(p[0].y, p[1].y, 1e-9);
  EXPECT_NEAR(p[3].y, p[4].y, 1e-9);
  EXPECT_NEAR(mid - p[0].x, p[1].x - mid, 1e-9);
  EXPECT_NEAR(mid - p[3].x, p[4].x - mid, 1e-9);
  EXPECT_NEAR(p[2].x, mid, 1e-9);
}

void expect_in_margins(const KeypointTemplate& t) {
  const double W = t.width, H = t.height;
  for (const auto& q : t.points.points) {
    EXPECT_GE(q.x, 0.2 * W);
    EXPECT_LE(q.x, W - 0.2 * W);
    EXPECT_GE(q.y, 0.2 * H);
    EXPECT_LE(q.y, H - 0.1 * H);
  }
}

KeypointSet random_face(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-20, 20), c(50, 150);
  const double cx = c(rng);
  const double eye_y = c(rng), mouth_y = eye_y + 30 + std::abs(u(rng));
  KeypointSet k;
  k.points = {{cx - 20 + 0.2 * u(rng), eye_y + 0.1 * u(rng)},
              {cx + 20 + 0.2 * u(rng), eye_y + 0.1 * u(rng)},
              {cx + 0.2 * u(rng), 0.5 * (eye_y + mouth_y) + 0.3 * u(rng)},
              {cx - 15 + 0.3 * u(rng), mouth_y + 0.1 * u(rng)},
              {cx + 15 + 0.3 * u(rng), mouth_y + 0.1 * u(rng)}};
  return k;
}

}  // namespace

TEST(Template, ShippedFileMatchesGenerator) {
  const auto shipped = load_template(std::string(FACEFLOW_SOURCE_DIR) + "/data/template_224.txt");
  EXPECT_EQ(shipped.width, 224);
  EXPECT_EQ(shipped.height, 224);
  const auto generated = default_template();
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(shipped.points[i].x, generated.points[i].x);
    EXPECT_DOUBLE_EQ(shipped.points[i].y, generated.points[i].y);
  }
  expect_symmetric(shipped);
  expect_in_margins(shipped);
}

TEST(Template, MarginBoxAt224) {
  const auto t = default_template();
  for (const auto& p : t.points.points) {
    EXPECT_GE(p.x, 44.8);
    EXPECT_LE(p.x, 179.2);
    EXPECT_GE(p.y, 44.8);
    EXPECT_LE(p.y, 201.6);
  }
}

TEST(Template, AveragesPairedEyes) {
  KeypointSet raw{{{40, 100}, {80, 102}, {60, 120}, {45, 140}, {75, 140}}};
  const auto sym = symmetrize(raw);
  EXPECT_EQ(sym[0].y, 101.0);
  EXPECT_EQ(sym[1].y, 101.0);
  const auto t = build_template(raw, 224, 224);
  EXPECT_EQ(t.points[0].y, t.points[1].y);
}

TEST(Template, MirrorImageGivesIdenticalTemplate) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const KeypointSet raw = random_face(rng);
    KeypointSet mirror;
    auto m = [](Point2 p) { return Point2{-p.x, p.y}; };
    mirror.points = {m(raw[1]), m(raw[0]), m(raw[2]), m(raw[4]), m(raw[3])};
    EXPECT_EQ(build_template(raw, 224, 224), build_template(mirror, 224, 224));
  }
}

TEST(Template, SymmetricIdempotentAndInsideMargins) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const KeypointSet raw = random_face(rng);
    for (auto [w, h] : {std::pair{224, 224}, std::pair{112, 96}, std::pair{300, 400}}) {
      const auto t = build_template(raw, w, h);
      expect_symmetric(t);
      expect_in_margins(t);
      const auto again = build_template(t.points, w, h);
      for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(again.points[i].x, t.points[i].x, 1e-9);
        EXPECT_NEAR(again.points[i].y, t.points[i].y, 1e-9);
      }
    }
  }
}

TEST(Template, DegenerateAndMalformedInputs) {
  KeypointSet flat{{{10, 5}, {20, 5}, {15, 5}, {12, 5}, {18, 5}}};
  try {
    build_template(flat, 224, 224);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateInput);
  }
  KeypointSet swapped{{{20, 5}, {10, 5}, {15, 9}, {12, 12}, {18, 12}}};
  EXPECT_THROW(build_template(swapped, 224, 224), Error);
  EXPECT_THROW(build_template(KeypointSet{{{0, 0}, {1, 1}}}, 224, 224), Error);
}

TEST(TemplateFile, RoundTripAndPointCount) {
  const auto t = default_template();
  std::istringstream in(format_template(t));
  EXPECT_EQ(parse_template(in), t);

  for (int n : {4, 6}) {
    std::ostringstream os;
    os << "224 224\n";
    for (int i = 0; i < n; ++i) os << i << " " << i << "\n";
    std::istringstream bad(os.str());
    try {
      parse_template(bad);
      FAIL() << n;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::FormatError);
    }
  }
  std::istringstream junk("224 224\n1 2 3\n");
  EXPECT_THROW(parse_template(junk), Error);
}
