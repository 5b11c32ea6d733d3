#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "faceflow/error.hpp"
#include "faceflow/geometry.hpp"

namespace faceflow {

enum class PixelFormat { gray8, rgb8, encoded };

inline std::string to_string(PixelFormat f) {
  switch (f) {
    case PixelFormat::gray8: return "gray8";
    case PixelFormat::rgb8: return "rgb8";
    case PixelFormat::encoded: return "encoded";
  }
  return "encoded";
}

/// Frame payload. Immutable once handed to the frame store.
struct Image {
  int width = 0;
  int height = 0;
  PixelFormat format = PixelFormat::gray8;
  std::vector<std::uint8_t> bytes;
};

using ImageHandle = std::shared_ptr<const Image>;

struct ScoredBox {
  Box box;
  double score = 0.0;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

struct DetectorOutput {
  std::vector<ScoredBox> boxes;  // descending score

  friend bool operator==(const DetectorOutput&, const DetectorOutput&) = default;
};

inline constexpr std::size_t kAgeClasses = 101;

struct AgeDistribution {
  std::vector<double> probs;  // classes 0..100 years

  friend bool operator==(const AgeDistribution&, const AgeDistribution&) = default;
};

struct AttributeEstimate {
  double age = 0.0;
  double gender_p_female = 0.5;
  double smile_p = 0.0;

  friend bool operator==(const AttributeEstimate&, const AttributeEstimate&) = default;
};

struct MultitaskOutput {
  AgeDistribution age;
  double gender_p_female = 0.5;
  double smile_p = 0.0;

  friend bool operator==(const MultitaskOutput&, const MultitaskOutput&) = default;
};

inline constexpr std::size_t kDefaultEmbeddingDim = 128;

struct Embedding {
  std::vector<float> values;
  bool unit_normalized = false;

  friend bool operator==(const Embedding&, const Embedding&) = default;
  std::size_t dim() const { return values.size(); }
};

inline double l2_norm(const Embedding& e) {
  double s = 0.0;
  for (float v : e.values) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

inline Embedding normalized(Embedding e) {
  const double n = l2_norm(e);
  if (!(n > 0.0)) throw Error(ErrorCode::NotNormalized, "cannot normalize a zero vector");
  for (float& v : e.values) v = static_cast<float>(v / n);
  e.unit_normalized = true;
  return e;
}

/// What a backend receives for one face: the source frame, the detected box
/// and, once keypoints are known, the alignment onto the template. Resampling
/// to the network input size is the backend's business.
struct FaceCrop {
  std::uint64_t frame_id = 0;
  ImageHandle image;
  Box box;
  std::optional<SimilarityTransform> transform;
};

// --- validation -------------------------------------------------------------

inline bool is_probability(double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; }

inline void validate(const AgeDistribution& d) {
  if (d.probs.size() != kAgeClasses) {
    throw Error(ErrorCode::InvalidDistribution,
                "age distribution must have 101 classes, got " + std::to_string(d.probs.size()));
  }
  double sum = 0.0;
  for (double p : d.probs) {
    if (!std::isfinite(p) || p < 0.0) throw Error(ErrorCode::InvalidDistribution, "negative or non-finite age probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(ErrorCode::InvalidDistribution, "age probabilities sum to " + std::to_string(sum));
  }
}

inline void validate(const MultitaskOutput& m) {
  validate(m.age);
  if (!is_probability(m.gender_p_female)) throw Error(ErrorCode::ProtocolViolation, "gender probability outside [0,1]");
  if (!is_probability(m.smile_p)) throw Error(ErrorCode::ProtocolViolation, "smile probability outside [0,1]");
}

inline void validate(const Embedding& e, std::optional<std::size_t> expected_dim = std::nullopt) {
  if (e.values.empty()) throw Error(ErrorCode::ProtocolViolation, "empty embedding");
  if (expected_dim && e.dim() != *expected_dim) {
    throw Error(ErrorCode::DimensionMismatch, "embedding dimension " + std::to_string(e.dim()) + " != " +
                                                  std::to_string(*expected_dim));
  }
  for (float v : e.values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::ProtocolViolation, "non-finite embedding value");
  }
  if (e.unit_normalized && std::abs(l2_norm(e) - 1.0) > 1e-6) {
    throw Error(ErrorCode::NotNormalized, "embedding flagged unit-normalized has norm " + std::to_string(l2_norm(e)));
  }
}

/// Checks scores and boxes, then restores descending-score order (stable).
inline DetectorOutput validated(DetectorOutput out) {
  for (const auto& b : out.boxes) {
    if (!is_probability(b.score)) throw Error(ErrorCode::ProtocolViolation, "detection score outside [0,1]");
    if (!std::isfinite(b.box.x) || !std::isfinite(b.box.y) || !b.box.positive() || !std::isfinite(b.box.w) ||
        !std::isfinite(b.box.h)) {
      throw Error(ErrorCode::ProtocolViolation, "detection box is not a finite positive-area box");
    }
  }
  std::stable_sort(out.boxes.begin(), out.boxes.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  return out;
}

inline KeypointSet validated(KeypointSet k) {
  if (k.size() != kCanonicalKeypoints) {
    throw Error(ErrorCode::ProtocolViolation, "keypoint backend must return 5 points");
  }
  for (const auto& p : k.points) {
    if (!p.finite()) throw Error(ErrorCode::ProtocolViolation, "non-finite keypoint");
  }
  return k;
}

/// Expected age in years, sum_k k * p_k.
inline double decode_age(const AgeDistribution& d) {
  validate(d);
  double e = 0.0;
  for (std::size_t k = 0; k < d.probs.size(); ++k) e += static_cast<double>(k) * d.probs[k];
  return e;
}

inline AttributeEstimate to_estimate(const MultitaskOutput& m) {
  return {decode_age(m.age), m.gender_p_female, m.smile_p};
}

// --- backend contracts ------------------------------------------------------

class Backend {
 public:
  virtual ~Backend() = default;
  /// Nominal per-call latency. The deterministic engine advances its virtual
  /// clock by this amount instead of measuring wall time.
  virtual std::chrono::nanoseconds nominal_latency() const { return std::chrono::nanoseconds{0}; }
};

class Detector : public Backend {
 public:
  virtual DetectorOutput detect(std::uint64_t frame_id, const Image& image) = 0;
};

class KeypointLocator : public Backend {
 public:
  virtual KeypointSet locate(const FaceCrop& crop) = 0;
};

class AgeEstimator : public Backend {
 public:
  virtual AgeDistribution estimate_age(const FaceCrop& crop) = 0;
};

class GenderEstimator : public Backend {
 public:
  virtual double estimate_gender(const FaceCrop& crop) = 0;
};

class SmileEstimator : public Backend {
 public:
  virtual double estimate_smile(const FaceCrop& crop) = 0;
};

/// Joint age/gender/smile estimation from one shared call.
class AttributeEstimator : public Backend {
 public:
  virtual MultitaskOutput estimate(const FaceCrop& crop) = 0;
};

class Embedder : public Backend {
 public:
  virtual Embedding embed(const FaceCrop& crop) = 0;
  virtual std::size_t dimension() const = 0;
};

/// Multitask contract realized by three single-task estimators.
class SplitAttributeEstimator : public AttributeEstimator {
 public:
  SplitAttributeEstimator(std::unique_ptr<AgeEstimator> age, std::unique_ptr<GenderEstimator> gender,
                          std::unique_ptr<SmileEstimator> smile)
      : age_(std::move(age)), gender_(std::move(gender)), smile_(std::move(smile)) {}

  MultitaskOutput estimate(const FaceCrop& crop) override {
    return {age_->estimate_age(crop), gender_->estimate_gender(crop), smile_->estimate_smile(crop)};
  }

  std::chrono::nanoseconds nominal_latency() const override {
    return age_->nominal_latency() + gender_->nominal_latency() + smile_->nominal_latency();
  }

 private:
  std::unique_ptr<AgeEstimator> age_;
  std::unique_ptr<GenderEstimator> gender_;
  std::unique_ptr<SmileEstimator> smile_;
};

}  // namespace faceflow
