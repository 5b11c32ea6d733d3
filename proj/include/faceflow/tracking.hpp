#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "faceflow/geometry.hpp"
#include "faceflow/inference.hpp"

namespace faceflow {

struct TrackerConfig {
  /// Attribute estimates averaged per track.
  std::size_t window = 16;
  /// Gate radius as a fraction of the detection box diagonal.
  double gating_factor = 0.5;
  /// Tracks missing for more than this many consecutive updates are dropped.
  int expiry = 10;

  friend bool operator==(const TrackerConfig&, const TrackerConfig&) = default;
};

struct GalleryMatch {
  std::uint64_t identity_id = 0;
  std::string label;
  double distance = 0.0;

  friend bool operator==(const GalleryMatch&, const GalleryMatch&) = default;
};

struct Track {
  std::uint64_t track_id = 0;
  Point2 last_centroid;
  Box last_box;
  double last_score = 0.0;
  std::uint64_t last_seen_frame = 0;
  int frames_missed = 0;
  std::deque<AttributeEstimate> history;
  std::optional<GalleryMatch> match;

  /// Arithmetic mean of the history window; nullopt before the first estimate.
  std::optional<AttributeEstimate> smoothed() const {
    if (history.empty()) return std::nullopt;
    AttributeEstimate m{0.0, 0.0, 0.0};
    for (const auto& e : history) {
      m.age += e.age;
      m.gender_p_female += e.gender_p_female;
      m.smile_p += e.smile_p;
    }
    const double n = static_cast<double>(history.size());
    m.age /= n;
    m.gender_p_female /= n;
    m.smile_p /= n;
    return m;
  }
};

/// Per-detection result of one association step: the track each detection
/// now belongs to, and whether that track was created by this step.
struct Assignment {
  std::vector<std::uint64_t> track_ids;
  std::vector<bool> spawned;
};

/// Greedy nearest-centroid tracker. Owned by a single thread; not internally
/// synchronized.
class Tracker {
 public:
  explicit Tracker(TrackerConfig config = {}) : config_(config) {}

  const TrackerConfig& config() const { return config_; }
  const std::vector<Track>& tracks() const { return tracks_; }
  std::uint64_t next_id() const { return next_id_; }

  const Track* find(std::uint64_t track_id) const {
    for (const auto& t : tracks_) {
      if (t.track_id == track_id) return &t;
    }
    return nullptr;
  }

  Assignment associate(std::span<const Box> detections, std::uint64_t frame_id) {
    struct Pair {
      double dist;
      std::uint64_t track_id;
      std::size_t track_index;
      std::size_t det_index;
    };
    std::vector<Pair> pairs;
    for (std::size_t d = 0; d < detections.size(); ++d) {
      const Point2 c = detections[d].centroid();
      const double gate = config_.gating_factor * detections[d].diagonal();
      for (std::size_t t = 0; t < tracks_.size(); ++t) {
        const double dist = distance(tracks_[t].last_centroid, c);
        if (dist <= gate) pairs.push_back({dist, tracks_[t].track_id, t, d});
      }
    }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      return std::tie(a.dist, a.track_id, a.det_index) < std::tie(b.dist, b.track_id, b.det_index);
    });

    Assignment out;
    out.track_ids.assign(detections.size(), 0);
    out.spawned.assign(detections.size(), false);
    std::vector<bool> track_used(tracks_.size(), false), det_used(detections.size(), false);
    for (const auto& p : pairs) {
      if (track_used[p.track_index] || det_used[p.det_index]) continue;
      track_used[p.track_index] = det_used[p.det_index] = true;
      Track& t = tracks_[p.track_index];
      observe(t, detections[p.det_index], frame_id);
      out.track_ids[p.det_index] = t.track_id;
    }

    for (std::size_t t = 0; t < track_used.size(); ++t) {
      if (!track_used[t]) ++tracks_[t].frames_missed;
    }
    std::erase_if(tracks_, [&](const Track& t) { return t.frames_missed > config_.expiry; });

    for (std::size_t d = 0; d < detections.size(); ++d) {
      if (det_used[d]) continue;
      Track t;
      t.track_id = next_id_++;
      observe(t, detections[d], frame_id);
      out.track_ids[d] = t.track_id;
      out.spawned[d] = true;
      tracks_.push_back(std::move(t));
    }
    return out;
  }

  /// Push an estimate into the track's window and return the new mean.
  /// Returns nullopt if the track has expired.
  std::optional<AttributeEstimate> update_attributes(std::uint64_t track_id, const AttributeEstimate& estimate) {
    Track* t = find_mutable(track_id);
    if (!t) return std::nullopt;
    t->history.push_back(estimate);
    while (t->history.size() > std::max<std::size_t>(config_.window, 1)) t->history.pop_front();
    return t->smoothed();
  }

  bool update_match(std::uint64_t track_id, std::optional<GalleryMatch> match) {
    Track* t = find_mutable(track_id);
    if (!t) return false;
    t->match = std::move(match);
    return true;
  }

  /// Set the score carried into output records for a matched box.
  void set_score(std::uint64_t track_id, double score) {
    if (Track* t = find_mutable(track_id)) t->last_score = score;
  }

 private:
  static void observe(Track& t, const Box& b, std::uint64_t frame_id) {
    t.last_centroid = b.centroid();
    t.last_box = b;
    t.last_seen_frame = frame_id;
    t.frames_missed = 0;
  }

  Track* find_mutable(std::uint64_t track_id) {
    for (auto& t : tracks_) {
      if (t.track_id == track_id) return &t;
    }
    return nullptr;
  }

  TrackerConfig config_;
  std::vector<Track> tracks_;
  std::uint64_t next_id_ = 0;
};

/// Standalone window-mean update on a single track (same rule the tracker applies).
inline AttributeEstimate update_attributes(Track& track, const AttributeEstimate& estimate, std::size_t window) {
  track.history.push_back(estimate);
  while (track.history.size() > std::max<std::size_t>(window, 1)) track.history.pop_front();
  return *track.smoothed();
}

}  // namespace faceflow
