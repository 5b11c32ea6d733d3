#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <thread>

#include "faceflow/inference.hpp"
#include "faceflow/keypoint_template.hpp"
#include "faceflow/metrics.hpp"
#include "faceflow/rng.hpp"
#include "faceflow/scene.hpp"

namespace faceflow {

struct MockParams {
  std::chrono::nanoseconds latency{0};
  /// Box jitter standard deviation in pixels.
  double jitter = 0.0;
  /// Age noise standard deviation in years.
  double age_noise = 0.0;
  /// Noise standard deviation on gender/smile probabilities.
  double prob_noise = 0.0;
  /// Per-dimension embedding noise before renormalization.
  double intra_noise = 0.01;
  std::size_t embedding_dim = kDefaultEmbeddingDim;
  std::uint64_t seed = 0;
  /// Sleep for `latency` on each call. Off in deterministic runs, where the
  /// engine charges nominal_latency() to a virtual clock instead.
  bool sleep = true;
};

namespace mock_roles {
inline constexpr std::uint64_t detect = 1, keypoints = 2, age = 3, gender = 4, smile = 5, embed = 6, base = 7;
}

/// Identity prototype on the unit sphere.
inline Embedding mock_identity_base(std::uint64_t identity, std::size_t dim, std::uint64_t seed) {
  KeyedRng rng(mix_key({seed, mock_roles::base, identity}));
  Embedding e;
  e.values.resize(dim);
  for (auto& v : e.values) v = static_cast<float>(rng.normal());
  return normalized(std::move(e));
}

/// One sample of `identity`: prototype plus per-dimension noise of standard
/// deviation `noise`, renormalized. `sample_key` selects the noise draw.
inline Embedding mock_identity_embedding(std::uint64_t identity, std::uint64_t sample_key, std::size_t dim,
                                         double noise, std::uint64_t seed) {
  Embedding base = mock_identity_base(identity, dim, seed);
  KeyedRng rng(mix_key({seed, mock_roles::embed, identity, sample_key}));
  for (auto& v : base.values) v = static_cast<float>(v + noise * rng.normal());
  return normalized(std::move(base));
}

/// Age distribution whose expectation is exactly `age` (mass split between
/// the two neighboring integer classes).
inline AgeDistribution age_distribution_at(double age) {
  age = std::clamp(age, 0.0, 100.0);
  AgeDistribution d;
  d.probs.assign(kAgeClasses, 0.0);
  const double lo = std::floor(age);
  const auto k = static_cast<std::size_t>(lo);
  const double frac = age - lo;
  if (k >= 100 || frac == 0.0) {
    d.probs[k] = 1.0;
  } else {
    d.probs[k] = 1.0 - frac;
    d.probs[k + 1] = frac;
  }
  return d;
}

class MockBase {
 public:
  MockBase(std::shared_ptr<const Scene> scene, MockParams params) : scene_(std::move(scene)), params_(params) {}

  /// Scripted face in the crop's frame that overlaps the crop box most.
  std::optional<SceneFace> scripted_face(const FaceCrop& crop) const {
    std::optional<SceneFace> best;
    double best_iou = 0.0;
    for (const auto& f : scene_->frame(crop.frame_id).faces) {
      const double o = iou(f.box, crop.box);
      if (o > best_iou) {
        best_iou = o;
        best = f;
      }
    }
    return best;
  }

  /// Stable key for a crop with no scripted counterpart.
  static std::uint64_t box_key(const Box& b) {
    return mix_key({static_cast<std::uint64_t>(std::llround(b.x * 16)), static_cast<std::uint64_t>(std::llround(b.y * 16)),
                    static_cast<std::uint64_t>(std::llround(b.w * 16)),
                    static_cast<std::uint64_t>(std::llround(b.h * 16))});
  }

 protected:
  void pause() const {
    if (params_.sleep && params_.latency.count() > 0) std::this_thread::sleep_for(params_.latency);
  }

  double noisy_probability(double p, std::uint64_t role, std::uint64_t frame_id, std::uint64_t identity) const {
    if (params_.prob_noise <= 0.0) return std::clamp(p, 0.0, 1.0);
    KeyedRng rng(mix_key({params_.seed, role, frame_id, identity}));
    return std::clamp(p + params_.prob_noise * rng.normal(), 0.0, 1.0);
  }

  std::shared_ptr<const Scene> scene_;
  MockParams params_;
};

class MockDetector : public Detector, public MockBase {
 public:
  using MockBase::MockBase;

  DetectorOutput detect(std::uint64_t frame_id, const Image& image) override {
    pause();
    DetectorOutput out;
    KeyedRng rng(mix_key({params_.seed, mock_roles::detect, frame_id}));
    for (const auto& f : scene_->frame(frame_id).faces) {
      Box b = f.box;
      double score = 1.0;
      if (params_.jitter > 0.0) {
        b.x += params_.jitter * rng.normal();
        b.y += params_.jitter * rng.normal();
        b.w = std::max(1.0, b.w + params_.jitter * rng.normal());
        b.h = std::max(1.0, b.h + params_.jitter * rng.normal());
        score = 0.5 + 0.5 * rng.uniform();
      }
      b = clamp_to_frame(b, image.width, image.height);
      if (b.positive()) out.boxes.push_back({b, score});
    }
    return validated(std::move(out));
  }

  std::chrono::nanoseconds nominal_latency() const override { return params_.latency; }
};

/// Places the template keypoints inside the box under a small per-identity
/// rotation, so alignment has something non-trivial to undo.
class MockKeypointLocator : public KeypointLocator, public MockBase {
 public:
  MockKeypointLocator(std::shared_ptr<const Scene> scene, MockParams params,
                      KeypointTemplate tmpl = default_template())
      : MockBase(std::move(scene), params), template_(std::move(tmpl)) {}

  KeypointSet locate(const FaceCrop& crop) override {
    pause();
    const auto face = scripted_face(crop);
    const std::uint64_t key = face ? face->identity : box_key(crop.box);
    KeyedRng rng(mix_key({params_.seed, mock_roles::keypoints, crop.frame_id, key}));
    SimilarityTransform to_box;
    to_box.scale = crop.box.w / static_cast<double>(template_.width);
    to_box.theta = rng.uniform(-0.15, 0.15);
    const Point2 c = crop.box.centroid();
    const Point2 tc{template_.width / 2.0, template_.height / 2.0};
    const Point2 rc = SimilarityTransform{to_box.scale, to_box.theta, 0.0, 0.0}.apply(tc);
    to_box.tx = c.x - rc.x;
    to_box.ty = c.y - rc.y;
    return apply_transform(to_box, template_.points);
  }

  std::chrono::nanoseconds nominal_latency() const override { return params_.latency; }

 private:
  KeypointTemplate template_;
};

class MockAgeEstimator : public AgeEstimator, public MockBase {
 public:
  using MockBase::MockBase;

  AgeDistribution estimate_age(const FaceCrop& crop) override {
    pause();
    const auto face = scripted_face(crop);
    if (!face) return age_distribution_at(50.0);
    double age = face->age;
    if (params_.age_noise > 0.0) {
      KeyedRng rng(mix_key({params_.seed, mock_roles::age, crop.frame_id, face->identity}));
      age += params_.age_noise * rng.normal();
    }
    return age_distribution_at(age);
  }

  std::chrono::nanoseconds nominal_latency() const override { return params_.latency; }
};

class MockGenderEstimator : public GenderEstimator, public MockBase {
 public:
  using MockBase::MockBase;

  double estimate_gender(const FaceCrop& crop) override {
    pause();
    const auto face = scripted_face(crop);
    if (!face) return 0.5;
    return noisy_probability(face->gender_p_female, mock_roles::gender, crop.frame_id, face->identity);
  }

  std::chrono::nanoseconds nominal_latency() const override { return params_.latency; }
};

class MockSmileEstimator : public SmileEstimator, public MockBase {
 public:
  using MockBase::MockBase;

  double estimate_smile(const FaceCrop& crop) override {
    pause();
    const auto face = scripted_face(crop);
    if (!face) return 0.0;
    return noisy_probability(face->smile_p, mock_roles::smile, crop.frame_id, face->identity);
  }

  std::chrono::nanoseconds nominal_latency() const override { return params_.latency; }
};

/// One call, three outputs; field-for-field equal to the single-task mocks
/// with the same parameters.
class MockMultitask : public AttributeEstimator, public MockBase {
 public:
  MockMultitask(std::shared_ptr<const Scene> scene, MockParams params)
      : MockBase(scene, params),
        age_(scene, quiet(params)),
        gender_(scene, quiet(params)),
        smile_(scene, quiet(params)) {}

  MultitaskOutput estimate(const FaceCrop& crop) override {
    pause();
    return {age_.estimate_age(crop), gender_.estimate_gender(crop), smile_.estimate_smile(crop)};
  }

  std::chrono::nanoseconds nominal_latency() const override { return params_.latency; }

 private:
  static MockParams quiet(MockParams p) {
    p.latency = std::chrono::nanoseconds{0};
    return p;
  }

  MockAgeEstimator age_;
  MockGenderEstimator gender_;
  MockSmileEstimator smile_;
};

class MockEmbedder : public Embedder, public MockBase {
 public:
  using MockBase::MockBase;

  Embedding embed(const FaceCrop& crop) override {
    pause();
    const auto face = scripted_face(crop);
    const std::uint64_t identity = face ? face->identity : box_key(crop.box);
    return mock_identity_embedding(identity, crop.frame_id, params_.embedding_dim, params_.intra_noise, params_.seed);
  }

  std::size_t dimension() const override { return params_.embedding_dim; }
  std::chrono::nanoseconds nominal_latency() const override { return params_.latency; }
};

}  // namespace faceflow
