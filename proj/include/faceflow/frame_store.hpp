#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "faceflow/error.hpp"
#include "faceflow/geometry.hpp"
#include "faceflow/inference.hpp"
#include "faceflow/trace.hpp"
#include "faceflow/tracking.hpp"

namespace faceflow {

// --- clocks -----------------------------------------------------------------

class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_ns() const = 0;
};

/// Monotonic clock reading relative to construction.
class SteadyClock : public Clock {
 public:
  SteadyClock() : origin_(std::chrono::steady_clock::now()) {}
  std::int64_t now_ns() const override {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - origin_).count();
  }
  std::chrono::steady_clock::time_point origin() const { return origin_; }

 private:
  std::chrono::steady_clock::time_point origin_;
};

/// Manually advanced clock for the deterministic engine.
class VirtualClock : public Clock {
 public:
  std::int64_t now_ns() const override { return now_.load(); }
  void set(std::int64_t t) { now_.store(t); }

 private:
  std::atomic<std::int64_t> now_{0};
};

// --- stages -----------------------------------------------------------------

enum class Stage : std::uint8_t { detect = 0, attributes = 1, similarity = 2 };
inline constexpr std::size_t kStageCount = 3;
inline constexpr std::array<Stage, kStageCount> kAllStages{Stage::detect, Stage::attributes, Stage::similarity};

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::detect: return "detect";
    case Stage::attributes: return "attributes";
    case Stage::similarity: return "similarity";
  }
  return "detect";
}

inline Stage stage_from_string(std::string_view s) {
  for (Stage st : kAllStages) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown stage '" + std::string(s) + "'");
}

inline std::size_t index_of(Stage s) { return static_cast<std::size_t>(s); }

enum class StageState : std::uint8_t { pending, in_progress, done, skipped, failed };

inline std::string_view to_string(StageState s) {
  switch (s) {
    case StageState::pending: return "pending";
    case StageState::in_progress: return "in_progress";
    case StageState::done: return "done";
    case StageState::skipped: return "skipped";
    case StageState::failed: return "failed";
  }
  return "pending";
}

inline bool is_terminal(StageState s) { return s == StageState::done || s == StageState::skipped || s == StageState::failed; }

struct StageDescriptor {
  Stage stage = Stage::detect;
  /// Higher runs first when stages contend; never overrides prerequisites.
  int priority = 0;
  std::vector<Stage> prerequisites;
  int worker_count = 1;

  friend bool operator==(const StageDescriptor&, const StageDescriptor&) = default;
};

/// The default prerequisite structure: attributes and similarity need detect.
inline std::vector<Stage> default_prerequisites(Stage s) {
  if (s == Stage::detect) return {};
  return {Stage::detect};
}

// --- frames -----------------------------------------------------------------

struct FaceObservation {
  std::uint64_t frame_id = 0;
  Box box;
  double detection_score = 0.0;
  std::optional<KeypointSet> keypoints;
  std::optional<SimilarityTransform> transform;
  std::optional<AttributeEstimate> attributes;
  std::optional<Embedding> embedding;
  std::optional<GalleryMatch> match;
};

using StageFlags = std::array<StageState, kStageCount>;

struct Frame {
  std::uint64_t id = 0;
  std::int64_t timestamp_ns = 0;
  ImageHandle payload;
  StageFlags flags{StageState::pending, StageState::pending, StageState::pending};
  std::vector<FaceObservation> observations;
  std::array<std::uint64_t, kStageCount> lease_token{};
  std::array<std::int64_t, kStageCount> lease_start_ns{};
};

/// A worker's exclusive claim on one (frame, stage). Carries its own copy of
/// the frame's observations; the payload is shared and immutable.
struct FrameLease {
  std::uint64_t frame_id = 0;
  Stage stage = Stage::detect;
  std::uint64_t token = 0;
  std::int64_t started_ns = 0;
  std::int64_t timestamp_ns = 0;
  ImageHandle payload;
  std::vector<FaceObservation> observations;
};

/// Store notification, delivered synchronously under the store lock.
struct StoreEvent {
  TraceEvent trace;
  /// Observations of the frame after the merge (stage_done only).
  std::vector<FaceObservation> observations;
  /// Frame timestamp (grab and saturation drops).
  std::int64_t frame_timestamp_ns = 0;
  /// done - start for stage_done.
  std::int64_t latency_ns = 0;
  StageFlags flags{};
};

struct StageCounters {
  std::uint64_t processed = 0;
  std::uint64_t skipped = 0;
  std::uint64_t dropped = 0;
  std::uint64_t failed = 0;

  friend bool operator==(const StageCounters&, const StageCounters&) = default;
};

/// Bounded, internally synchronized frame buffer with per-stage flags.
///
/// Flags move pending -> in_progress -> done, or end in skipped/failed, and
/// never move backwards. A stage always takes the newest eligible frame;
/// older frames still pending for that stage are marked skipped.
class FrameStore {
 public:
  using Observer = std::function<void(const StoreEvent&)>;

  FrameStore(std::size_t capacity, std::vector<StageDescriptor> stages, const Clock& clock, Observer observer = {})
      : capacity_(capacity), stages_(std::move(stages)), clock_(clock), observer_(std::move(observer)) {
    if (capacity_ == 0) throw Error(ErrorCode::InvalidArgument, "frame store capacity must be positive");
    validate_stage_graph(stages_);
    for (const auto& d : stages_) registered_[index_of(d.stage)] = true;
  }

  FrameStore(const FrameStore&) = delete;
  FrameStore& operator=(const FrameStore&) = delete;

  static void validate_stage_graph(const std::vector<StageDescriptor>& stages) {
    if (stages.empty()) throw Error(ErrorCode::InvalidArgument, "no stages registered");
    std::array<bool, kStageCount> present{};
    for (const auto& d : stages) {
      if (present[index_of(d.stage)]) throw Error(ErrorCode::InvalidArgument, "stage registered twice");
      present[index_of(d.stage)] = true;
      if (d.worker_count < 1) throw Error(ErrorCode::InvalidArgument, "worker_count must be positive");
    }
    for (const auto& d : stages) {
      for (Stage p : d.prerequisites) {
        if (!present[index_of(p)]) {
          throw Error(ErrorCode::InvalidArgument,
                      std::string(to_string(d.stage)) + " requires unregistered stage " + std::string(to_string(p)));
        }
      }
      if (d.stage != Stage::detect) {
        bool needs_detect = false;
        for (Stage p : d.prerequisites) needs_detect = needs_detect || p == Stage::detect;
        if (!needs_detect) {
          throw Error(ErrorCode::InvalidArgument, std::string(to_string(d.stage)) + " must require detect");
        }
      }
    }
    // Cycle check by depth-first search over the prerequisite edges.
    std::array<int, kStageCount> mark{};
    std::function<void(Stage)> visit = [&](Stage s) {
      auto& m = mark[index_of(s)];
      if (m == 2) return;
      if (m == 1) throw Error(ErrorCode::InvalidArgument, "stage prerequisites form a cycle");
      m = 1;
      for (const auto& d : stages) {
        if (d.stage != s) continue;
        for (Stage p : d.prerequisites) visit(p);
      }
      m = 2;
    };
    for (const auto& d : stages) visit(d.stage);
  }

  std::size_t capacity() const { return capacity_; }
  const std::vector<StageDescriptor>& stages() const { return stages_; }
  bool registered(Stage s) const { return registered_[index_of(s)]; }

  /// Append a frame with all flags pending. When full, the oldest frame with
  /// no stage in progress is evicted. Throws StoreSaturated (the new frame is
  /// counted as dropped for every stage) if every buffered frame is leased.
  std::uint64_t submit(ImageHandle payload, std::int64_t timestamp_ns) {
    if (!payload || payload->width <= 0 || payload->height <= 0) {
      throw Error(ErrorCode::InvalidArgument, "frame payload must have positive dimensions");
    }
    std::unique_lock lock(mutex_);
    const std::uint64_t id = next_id_++;
    ++grabbed_;
    if (frames_.size() >= capacity_ && !evict_one_locked()) {
      for (const auto& d : stages_) ++counters_[index_of(d.stage)].dropped;
      StoreEvent ev;
      ev.trace = {TraceKind::drop, id, std::nullopt, clock_.now_ns()};
      ev.frame_timestamp_ns = timestamp_ns;
      emit(ev);
      lock.unlock();
      throw StoreSaturated(id);
    }
    Frame f;
    f.id = id;
    f.timestamp_ns = timestamp_ns;
    f.payload = std::move(payload);
    for (Stage s : kAllStages) f.flags[index_of(s)] = registered(s) ? StageState::pending : StageState::skipped;
    frames_.push_back(std::move(f));
    StoreEvent ev;
    ev.trace = {TraceKind::grab, id, std::nullopt, clock_.now_ns()};
    ev.frame_timestamp_ns = timestamp_ns;
    ev.flags = frames_.back().flags;
    emit(ev);
    lock.unlock();
    notify_stages_ready_after(std::nullopt);
    return id;
  }

  /// Lease the newest frame whose flag for `stage` is pending and whose
  /// prerequisites are all done. Older frames pending for `stage` are marked
  /// skipped.
  std::optional<FrameLease> next_frame_for_stage(Stage stage) {
    std::lock_guard lock(mutex_);
    return lease_locked(stage);
  }

  /// Block until `stage` may have work, `stop` is set, or `timeout` elapses;
  /// then try to lease.
  std::optional<FrameLease> wait_for_frame(Stage stage, const std::atomic<bool>& stop,
                                           std::chrono::nanoseconds timeout) {
    std::unique_lock lock(mutex_);
    auto& cv = stage_cv_[index_of(stage)];
    cv.wait_for(lock, timeout, [&] { return stop.load() || eligible_locked(stage); });
    if (stop.load()) return std::nullopt;
    return lease_locked(stage);
  }

  /// Mark the lease's stage done and merge `results` into the frame's
  /// observations. Detection replaces the observation list; later stages
  /// fill fields of the observation with the identical box.
  void complete_stage(const FrameLease& lease, std::vector<FaceObservation> results) {
    std::unique_lock lock(mutex_);
    Frame* f = held_frame_locked(lease);
    const std::size_t si = index_of(lease.stage);
    const std::int64_t now = clock_.now_ns();
    if (lease.stage == Stage::detect) {
      f->observations = std::move(results);
      for (auto& o : f->observations) o.frame_id = f->id;
    } else {
      for (auto& r : results) {
        for (auto& o : f->observations) {
          if (!(o.box == r.box)) continue;
          if (r.keypoints) o.keypoints = std::move(r.keypoints);
          if (r.transform) o.transform = r.transform;
          if (r.attributes) o.attributes = r.attributes;
          if (r.embedding) o.embedding = std::move(r.embedding);
          if (r.match) o.match = std::move(r.match);
          break;
        }
      }
    }
    f->flags[si] = StageState::done;
    ++counters_[si].processed;
    StoreEvent ev;
    ev.trace = {TraceKind::stage_done, f->id, std::string(to_string(lease.stage)), now};
    ev.observations = f->observations;
    ev.latency_ns = now - f->lease_start_ns[si];
    ev.flags = f->flags;
    emit(ev);
    lock.unlock();
    notify_stages_ready_after(lease.stage);
  }

  /// Terminate a lease without results (backend error).
  void fail_stage(const FrameLease& lease, const std::string& /*reason*/ = {}) {
    std::unique_lock lock(mutex_);
    Frame* f = held_frame_locked(lease);
    fail_locked(*f, lease.stage);
  }

  /// Force-release leases older than `timeout`; their holders' later
  /// completions are rejected as stale. Returns the number released.
  std::size_t reap_expired(std::chrono::nanoseconds timeout) {
    std::unique_lock lock(mutex_);
    const std::int64_t now = clock_.now_ns();
    std::size_t n = 0;
    for (auto& f : frames_) {
      for (Stage s : kAllStages) {
        const std::size_t si = index_of(s);
        if (f.flags[si] == StageState::in_progress && now - f.lease_start_ns[si] > timeout.count()) {
          fail_locked(f, s);
          ++n;
        }
      }
    }
    lock.unlock();
    if (n > 0) notify_all_stages();
    return n;
  }

  /// True when nothing is leased and no stage has an eligible frame.
  bool quiescent() const {
    std::lock_guard lock(mutex_);
    for (const auto& f : frames_) {
      for (StageState st : f.flags) {
        if (st == StageState::in_progress) return false;
      }
    }
    for (const auto& d : stages_) {
      if (eligible_locked(d.stage)) return false;
    }
    return true;
  }

  void notify_all_stages() {
    for (auto& cv : stage_cv_) cv.notify_all();
  }

  std::uint64_t frames_grabbed() const {
    std::lock_guard lock(mutex_);
    return grabbed_;
  }

  StageCounters counters(Stage s) const {
    std::lock_guard lock(mutex_);
    return counters_[index_of(s)];
  }

  /// Frames still buffered whose flag for `s` is pending or in progress.
  std::uint64_t unfinished(Stage s) const {
    std::lock_guard lock(mutex_);
    std::uint64_t n = 0;
    for (const auto& f : frames_) {
      const auto st = f.flags[index_of(s)];
      if (st == StageState::pending || st == StageState::in_progress) ++n;
    }
    return n;
  }

  std::uint64_t stale_completions() const {
    std::lock_guard lock(mutex_);
    return stale_;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return frames_.size();
  }

  std::optional<Frame> snapshot(std::uint64_t frame_id) const {
    std::lock_guard lock(mutex_);
    for (const auto& f : frames_) {
      if (f.id == frame_id) return f;
    }
    return std::nullopt;
  }

  std::vector<std::uint64_t> frame_ids() const {
    std::lock_guard lock(mutex_);
    std::vector<std::uint64_t> ids;
    for (const auto& f : frames_) ids.push_back(f.id);
    return ids;
  }

 private:
  bool prerequisites_done(const Frame& f, Stage s) const {
    for (const auto& d : stages_) {
      if (d.stage != s) continue;
      for (Stage p : d.prerequisites) {
        if (f.flags[index_of(p)] != StageState::done) return false;
      }
    }
    return true;
  }

  bool eligible_locked(Stage s) const {
    if (!registered(s)) return false;
    for (auto it = frames_.rbegin(); it != frames_.rend(); ++it) {
      if (it->flags[index_of(s)] == StageState::pending && prerequisites_done(*it, s)) return true;
    }
    return false;
  }

  std::optional<FrameLease> lease_locked(Stage stage) {
    if (!registered(stage)) throw Error(ErrorCode::InvalidArgument, "stage not registered");
    const std::size_t si = index_of(stage);
    auto chosen = frames_.end();
    for (auto it = frames_.end(); it != frames_.begin();) {
      --it;
      if (it->flags[si] == StageState::pending && prerequisites_done(*it, stage)) {
        chosen = it;
        break;
      }
    }
    if (chosen == frames_.end()) return std::nullopt;

    const std::int64_t now = clock_.now_ns();
    for (auto it = frames_.begin(); it != chosen; ++it) {
      if (it->flags[si] != StageState::pending) continue;
      skip_locked(*it, stage, now);
    }

    Frame& f = *chosen;
    f.flags[si] = StageState::in_progress;
    f.lease_token[si] = ++token_counter_;
    f.lease_start_ns[si] = now;
    StoreEvent ev;
    ev.trace = {TraceKind::stage_start, f.id, std::string(to_string(stage)), now};
    ev.flags = f.flags;
    emit(ev);

    FrameLease lease;
    lease.frame_id = f.id;
    lease.stage = stage;
    lease.token = f.lease_token[si];
    lease.started_ns = now;
    lease.timestamp_ns = f.timestamp_ns;
    lease.payload = f.payload;
    lease.observations = f.observations;
    return lease;
  }

  Frame* held_frame_locked(const FrameLease& lease) {
    const std::size_t si = index_of(lease.stage);
    for (auto& f : frames_) {
      if (f.id != lease.frame_id) continue;
      if (f.flags[si] != StageState::in_progress || f.lease_token[si] != lease.token) break;
      return &f;
    }
    ++stale_;
    throw Error(ErrorCode::StaleLease, "lease on frame " + std::to_string(lease.frame_id) + " for " +
                                           std::string(to_string(lease.stage)) + " is no longer held");
  }

  void fail_locked(Frame& f, Stage s) {
    const std::size_t si = index_of(s);
    const std::int64_t now = clock_.now_ns();
    f.flags[si] = StageState::failed;
    ++counters_[si].failed;
    StoreEvent ev;
    ev.trace = {TraceKind::fail, f.id, std::string(to_string(s)), now};
    ev.flags = f.flags;
    emit(ev);
    skip_dependents_locked(f, s, now);
  }

  void skip_locked(Frame& f, Stage s, std::int64_t now) {
    const std::size_t si = index_of(s);
    f.flags[si] = StageState::skipped;
    ++counters_[si].skipped;
    StoreEvent ev;
    ev.trace = {TraceKind::skip, f.id, std::string(to_string(s)), now};
    ev.flags = f.flags;
    emit(ev);
    skip_dependents_locked(f, s, now);
  }

  // A stage whose prerequisite will never be done can never run on this frame.
  void skip_dependents_locked(Frame& f, Stage s, std::int64_t now) {
    for (const auto& d : stages_) {
      if (f.flags[index_of(d.stage)] != StageState::pending) continue;
      if (std::find(d.prerequisites.begin(), d.prerequisites.end(), s) == d.prerequisites.end()) continue;
      skip_locked(f, d.stage, now);
    }
  }

  // Evicts the oldest frame with nothing in progress. Returns false if none.
  bool evict_one_locked() {
    for (auto it = frames_.begin(); it != frames_.end(); ++it) {
      bool leased = false;
      for (StageState st : it->flags) leased = leased || st == StageState::in_progress;
      if (leased) continue;
      const std::int64_t now = clock_.now_ns();
      for (const auto& d : stages_) {
        const std::size_t si = index_of(d.stage);
        if (it->flags[si] != StageState::pending) continue;
        ++counters_[si].dropped;
        StoreEvent ev;
        ev.trace = {TraceKind::drop, it->id, std::string(to_string(d.stage)), now};
        ev.flags = it->flags;
        emit(ev);
      }
      StoreEvent ev;
      ev.trace = {TraceKind::evict, it->id, std::nullopt, now};
      ev.flags = it->flags;
      emit(ev);
      frames_.erase(it);
      return true;
    }
    return false;
  }

  void emit(const StoreEvent& ev) {
    if (observer_) observer_(ev);
  }

  // Wake the stages that may have become eligible: those whose prerequisites
  // include `finished` (or have none, on submit), in descending priority.
  void notify_stages_ready_after(std::optional<Stage> finished) {
    std::vector<const StageDescriptor*> order;
    for (const auto& d : stages_) {
      const bool affected = finished ? std::find(d.prerequisites.begin(), d.prerequisites.end(), *finished) !=
                                           d.prerequisites.end()
                                     : d.prerequisites.empty();
      if (affected) order.push_back(&d);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const StageDescriptor* a, const StageDescriptor* b) { return a->priority > b->priority; });
    for (const auto* d : order) stage_cv_[index_of(d->stage)].notify_all();
  }

  std::size_t capacity_;
  std::vector<StageDescriptor> stages_;
  std::array<bool, kStageCount> registered_{};
  const Clock& clock_;
  Observer observer_;

  mutable std::mutex mutex_;
  std::array<std::condition_variable, kStageCount> stage_cv_;
  std::deque<Frame> frames_;
  std::uint64_t next_id_ = 0;
  std::uint64_t grabbed_ = 0;
  std::uint64_t token_counter_ = 0;
  std::uint64_t stale_ = 0;
  std::array<StageCounters, kStageCount> counters_{};
};

}  // namespace faceflow
