#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "faceflow/detail/pnm.hpp"
#include "faceflow/error.hpp"
#include "faceflow/frame_store.hpp"
#include "faceflow/geometry.hpp"
#include "faceflow/inference.hpp"
#include "faceflow/keypoint_template.hpp"
#include "faceflow/metrics.hpp"
#include "faceflow/scene.hpp"
#include "faceflow/simindex.hpp"
#include "faceflow/trace.hpp"
#include "faceflow/tracking.hpp"

namespace faceflow {

// --- sources ----------------------------------------------------------------

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  /// Next frame, or null when exhausted.
  virtual ImageHandle next() = 0;
};

/// Renders a scripted scene. Produces `count` frames, wrapping around the
/// script; count 0 means unbounded.
class SceneSource : public FrameSource {
 public:
  SceneSource(std::shared_ptr<const Scene> scene, std::uint64_t count)
      : scene_(std::move(scene)), count_(count), cache_(scene_->frames.size()) {}

  ImageHandle next() override {
    if (scene_->frames.empty() || (count_ > 0 && produced_ >= count_)) return nullptr;
    const std::size_t i = produced_++ % scene_->frames.size();
    if (!cache_[i]) cache_[i] = render_frame(*scene_, i);
    return cache_[i];
  }

 private:
  std::shared_ptr<const Scene> scene_;
  std::uint64_t count_;
  std::uint64_t produced_ = 0;
  std::vector<ImageHandle> cache_;
};

/// Binary PGM/PPM files of a directory in lexicographic order.
class ImageDirectorySource : public FrameSource {
 public:
  explicit ImageDirectorySource(const std::string& dir, std::uint64_t count = 0) : count_(count) {
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) throw Error(ErrorCode::ConfigError, "image directory not found: " + dir);
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files_.push_back(e.path().string());
    }
    std::sort(files_.begin(), files_.end());
  }

  std::size_t size() const { return files_.size(); }

  ImageHandle next() override {
    if (files_.empty()) return nullptr;
    if (count_ == 0 ? produced_ >= files_.size() : produced_ >= count_) return nullptr;
    return detail::read_pnm(files_[produced_++ % files_.size()]);
  }

 private:
  std::vector<std::string> files_;
  std::uint64_t count_;
  std::uint64_t produced_ = 0;
};

// --- stage execution --------------------------------------------------------

/// One worker's backends. Only those its stage uses need to be set.
struct WorkerBackends {
  std::unique_ptr<Detector> detector;
  std::unique_ptr<KeypointLocator> keypoints;
  std::unique_ptr<AttributeEstimator> attributes;
  std::unique_ptr<Embedder> embedder;
};

using BackendFactory = std::function<WorkerBackends(Stage, int worker_index)>;

struct StageContext {
  KeypointTemplate face_template = default_template();
  std::shared_ptr<const EmbeddingGallery> gallery;
};

struct StageResult {
  std::vector<FaceObservation> observations;
  /// Sum of the backends' nominal latencies over the calls made.
  std::chrono::nanoseconds nominal{0};
};

namespace detail {

inline void require(const void* backend, Stage s) {
  if (!backend) throw Error(ErrorCode::InvalidArgument, "no backend configured for stage " + std::string(to_string(s)));
}

// Identity fields only; a later stage reports just what it computed.
inline FaceObservation bare_copy(const FaceObservation& o) {
  FaceObservation out;
  out.frame_id = o.frame_id;
  out.box = o.box;
  out.detection_score = o.detection_score;
  return out;
}

inline FaceCrop crop_of(const FrameLease& lease, const FaceObservation& o) {
  return {lease.frame_id, lease.payload, o.box, o.transform};
}

}  // namespace detail

/// Run the lease's stage on its frame. Every backend output is validated
/// before it is attached to an observation.
inline StageResult execute_stage(const FrameLease& lease, WorkerBackends& b, const StageContext& ctx) {
  StageResult r;
  switch (lease.stage) {
    case Stage::detect: {
      detail::require(b.detector.get(), lease.stage);
      const Image& img = *lease.payload;
      const DetectorOutput det = validated(b.detector->detect(lease.frame_id, img));
      r.nominal += b.detector->nominal_latency();
      for (const auto& sb : det.boxes) {
        FaceObservation o;
        o.frame_id = lease.frame_id;
        o.box = clamp_to_frame(sb.box, img.width, img.height);
        o.detection_score = sb.score;
        if (!o.box.positive()) continue;
        if (b.keypoints) {
          o.keypoints = validated(b.keypoints->locate(detail::crop_of(lease, o)));
          r.nominal += b.keypoints->nominal_latency();
          try {
            o.transform = solve_similarity(*o.keypoints, ctx.face_template.points);
          } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateInput) throw;
          }
        }
        r.observations.push_back(std::move(o));
      }
      break;
    }
    case Stage::attributes: {
      detail::require(b.attributes.get(), lease.stage);
      for (const auto& o : lease.observations) {
        const MultitaskOutput m = b.attributes->estimate(detail::crop_of(lease, o));
        r.nominal += b.attributes->nominal_latency();
        validate(m);
        FaceObservation out = detail::bare_copy(o);
        out.attributes = to_estimate(m);
        r.observations.push_back(std::move(out));
      }
      break;
    }
    case Stage::similarity: {
      detail::require(b.embedder.get(), lease.stage);
      for (const auto& o : lease.observations) {
        Embedding e = b.embedder->embed(detail::crop_of(lease, o));
        r.nominal += b.embedder->nominal_latency();
        const std::size_t dim = b.embedder->dimension();
        validate(e, dim > 0 ? std::optional<std::size_t>(dim) : std::nullopt);
        FaceObservation out = detail::bare_copy(o);
        if (ctx.gallery && !ctx.gallery->empty()) {
          const Embedding q =
              ctx.gallery->metric() == DistanceMetric::cosine && !e.unit_normalized ? normalized(e) : e;
          const auto hits = ctx.gallery->search(q, 1);
          out.match = GalleryMatch{hits[0].identity_id, hits[0].label, hits[0].distance};
        }
        out.embedding = std::move(e);
        r.observations.push_back(std::move(out));
      }
      break;
    }
  }
  return r;
}

// --- output records ---------------------------------------------------------

struct FaceRecord {
  Box box;
  double score = 0.0;
  std::optional<std::uint64_t> track_id;
  std::optional<AttributeEstimate> attributes;
  std::optional<GalleryMatch> match;
};

struct OutputRecord {
  std::uint64_t frame_id = 0;
  std::int64_t timestamp_ns = 0;
  std::vector<FaceRecord> faces;
  /// Whether detection completed for this frame. Not serialized.
  bool detected = false;
  /// Engine clock at emission. Not serialized.
  std::int64_t emitted_ns = 0;
};

inline nlohmann::ordered_json to_json(const FaceRecord& f) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["box"] = {f.box.x, f.box.y, f.box.w, f.box.h};
  j["score"] = f.score;
  j["track_id"] = f.track_id ? ordered_json(*f.track_id) : ordered_json(nullptr);
  if (f.attributes) {
    j["age"] = f.attributes->age;
    j["gender"] = f.attributes->gender_p_female >= 0.5 ? "female" : "male";
    j["smile"] = f.attributes->smile_p;
  } else {
    j["age"] = nullptr;
    j["gender"] = nullptr;
    j["smile"] = nullptr;
  }
  j["match_identity"] = f.match ? ordered_json(f.match->identity_id) : ordered_json(nullptr);
  j["match_distance"] = f.match ? ordered_json(f.match->distance) : ordered_json(nullptr);
  return j;
}

inline nlohmann::ordered_json to_json(const OutputRecord& r) {
  nlohmann::ordered_json j;
  j["frame_id"] = r.frame_id;
  j["timestamp_ns"] = r.timestamp_ns;
  j["faces"] = nlohmann::ordered_json::array();
  for (const auto& f : r.faces) j["faces"].push_back(to_json(f));
  return j;
}

// --- run report -------------------------------------------------------------

struct StageReport {
  Stage stage = Stage::detect;
  int workers = 1;
  int priority = 0;
  StageCounters counters;
  /// Still pending or in progress at shutdown.
  std::uint64_t pending = 0;
  StageTiming timing;
  LatencyHistogram histogram;
};

struct RunReport {
  std::uint64_t frames_grabbed = 0;
  std::uint64_t records_emitted = 0;
  double duration_s = 0.0;
  /// Records per second between the first and last emission.
  double record_fps = 0.0;
  bool deterministic = false;
  bool stopped_early = false;
  std::uint64_t worker_failures = 0;
  std::uint64_t stale_completions = 0;
  std::vector<StageReport> stages;
  std::vector<std::string> errors;  // first few worker failure messages

  const StageReport* stage(Stage s) const {
    for (const auto& r : stages) {
      if (r.stage == s) return &r;
    }
    return nullptr;
  }
};

inline nlohmann::ordered_json to_json(const StageTiming& t) {
  return {{"count", t.count}, {"mean_ms", t.mean_ms}, {"p50_ms", t.p50_ms}, {"p95_ms", t.p95_ms},
          {"p99_ms", t.p99_ms}, {"span_s", t.span_s},   {"fps", t.fps}};
}

inline nlohmann::ordered_json to_json(const LatencyHistogram& h) {
  nlohmann::ordered_json j;
  j["bounds_ms"] = h.bounds_ms;
  j["counts"] = h.counts;
  return j;
}

inline nlohmann::ordered_json to_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["frames_grabbed"] = r.frames_grabbed;
  j["records_emitted"] = r.records_emitted;
  j["duration_s"] = r.duration_s;
  j["record_fps"] = r.record_fps;
  j["deterministic"] = r.deterministic;
  j["stopped_early"] = r.stopped_early;
  j["worker_failures"] = r.worker_failures;
  j["stale_completions"] = r.stale_completions;
  auto stages = nlohmann::ordered_json::object();
  for (const auto& s : r.stages) {
    nlohmann::ordered_json sj;
    sj["workers"] = s.workers;
    sj["priority"] = s.priority;
    sj["processed"] = s.counters.processed;
    sj["skipped"] = s.counters.skipped;
    sj["dropped"] = s.counters.dropped;
    sj["failed"] = s.counters.failed;
    sj["pending"] = s.pending;
    sj["latency"] = to_json(s.timing);
    sj["histogram"] = to_json(s.histogram);
    stages[std::string(to_string(s.stage))] = std::move(sj);
  }
  j["stages"] = std::move(stages);
  j["errors"] = r.errors;
  return j;
}

// --- controller -------------------------------------------------------------

/// Single-threaded consumer of store events: feeds the tracker, emits one
/// record per grabbed frame in id order, and gathers latency statistics.
///
/// A record is emitted once detection for its frame is settled (done,
/// skipped, dropped or failed); it never waits for the slower stages.
/// Attribute and match fields come from the tracks' latest smoothed values.
class Controller {
 public:
  using RecordSink = std::function<void(const OutputRecord&)>;

  Controller(TrackerConfig tracker, const Clock& clock, RecordSink sink)
      : tracker_(tracker), clock_(clock), sink_(std::move(sink)) {}

  const Tracker& tracker() const { return tracker_; }
  std::uint64_t records_emitted() const { return emitted_; }
  std::int64_t first_emit_ns() const { return first_emit_ns_; }
  std::int64_t last_emit_ns() const { return last_emit_ns_; }

  void on_event(const StoreEvent& ev) {
    const auto& t = ev.trace;
    switch (t.kind) {
      case TraceKind::grab:
        pending_[t.frame_id].timestamp_ns = ev.frame_timestamp_ns;
        break;
      case TraceKind::drop:
        if (!t.stage) {
          auto& p = pending_[t.frame_id];
          p.timestamp_ns = ev.frame_timestamp_ns;
          p.settled = true;
        } else if (*t.stage == to_string(Stage::detect)) {
          settle(t.frame_id);
        }
        break;
      case TraceKind::evict:
        assoc_.erase(t.frame_id);
        break;
      case TraceKind::skip:
      case TraceKind::fail:
        if (t.stage && *t.stage == to_string(Stage::detect)) settle(t.frame_id);
        if (t.stage) open_[*t.stage].erase(t.frame_id);
        break;
      case TraceKind::stage_start:
        if (t.stage) open_[*t.stage][t.frame_id] = t.t_ns;
        break;
      case TraceKind::stage_done:
        if (t.stage) on_done(stage_from_string(*t.stage), ev);
        break;
    }
    emit_ready();
  }

  /// Emit every outstanding record in id order (shutdown).
  void flush() {
    for (auto& [id, p] : pending_) emit(id, p);
    pending_.clear();
  }

  struct StageStats {
    std::vector<double> latencies_ms;
    LatencyHistogram histogram;
    std::int64_t first_start_ns = std::numeric_limits<std::int64_t>::max();
    std::int64_t last_done_ns = std::numeric_limits<std::int64_t>::min();
  };

  const std::map<Stage, StageStats>& stage_stats() const { return stats_; }

 private:
  struct Pending {
    std::int64_t timestamp_ns = 0;
    bool settled = false;
    bool detected = false;
    std::vector<FaceObservation> faces;
    std::vector<std::optional<std::uint64_t>> track_ids;
  };

  void settle(std::uint64_t frame_id) {
    if (auto it = pending_.find(frame_id); it != pending_.end()) it->second.settled = true;
  }

  std::optional<std::uint64_t> track_of(std::uint64_t frame_id, const Box& box) const {
    auto it = assoc_.find(frame_id);
    if (it == assoc_.end()) return std::nullopt;
    for (const auto& [b, id] : it->second) {
      if (b == box) return id;
    }
    return std::nullopt;
  }

  void on_done(Stage stage, const StoreEvent& ev) {
    const auto& t = ev.trace;
    auto& st = stats_[stage];
    const double ms = static_cast<double>(ev.latency_ns) / 1e6;
    st.latencies_ms.push_back(ms);
    st.histogram.add(ms);
    auto& open = open_[*t.stage];
    if (auto it = open.find(t.frame_id); it != open.end()) {
      st.first_start_ns = std::min(st.first_start_ns, it->second);
      open.erase(it);
    }
    st.last_done_ns = std::max(st.last_done_ns, t.t_ns);

    if (stage == Stage::detect) {
      auto it = pending_.find(t.frame_id);
      std::vector<std::optional<std::uint64_t>> ids(ev.observations.size());
      // A detection older than one already associated would move tracks
      // backwards in time; it is reported but not associated.
      if (!last_associated_ || t.frame_id > *last_associated_) {
        std::vector<Box> boxes;
        for (const auto& o : ev.observations) boxes.push_back(o.box);
        const Assignment a = tracker_.associate(boxes, t.frame_id);
        auto& links = assoc_[t.frame_id];
        for (std::size_t i = 0; i < boxes.size(); ++i) {
          ids[i] = a.track_ids[i];
          tracker_.set_score(a.track_ids[i], ev.observations[i].detection_score);
          links.emplace_back(boxes[i], a.track_ids[i]);
        }
        last_associated_ = t.frame_id;
      }
      if (it != pending_.end()) {
        it->second.settled = true;
        it->second.detected = true;
        it->second.faces = ev.observations;
        it->second.track_ids = std::move(ids);
      }
      return;
    }

    for (const auto& o : ev.observations) {
      const auto id = track_of(t.frame_id, o.box);
      if (!id) continue;
      if (stage == Stage::attributes && o.attributes) tracker_.update_attributes(*id, *o.attributes);
      if (stage == Stage::similarity && o.match) tracker_.update_match(*id, o.match);
    }
  }

  void emit_ready() {
    while (!pending_.empty()) {
      auto it = pending_.begin();
      if (it->first != next_emit_ || !it->second.settled) break;
      emit(it->first, it->second);
      pending_.erase(it);
    }
  }

  void emit(std::uint64_t frame_id, const Pending& p) {
    OutputRecord r;
    r.frame_id = frame_id;
    r.timestamp_ns = p.timestamp_ns;
    r.detected = p.detected;
    if (p.detected) {
      for (std::size_t i = 0; i < p.faces.size(); ++i) {
        FaceRecord f;
        f.box = p.faces[i].box;
        f.score = p.faces[i].detection_score;
        f.track_id = p.track_ids[i];
        if (f.track_id) {
          if (const Track* tr = tracker_.find(*f.track_id)) {
            f.attributes = tr->smoothed();
            f.match = tr->match;
          }
        }
        r.faces.push_back(std::move(f));
      }
    }
    r.emitted_ns = clock_.now_ns();
    if (emitted_ == 0) first_emit_ns_ = r.emitted_ns;
    last_emit_ns_ = r.emitted_ns;
    ++emitted_;
    next_emit_ = frame_id + 1;
    if (sink_) sink_(r);
  }

  Tracker tracker_;
  const Clock& clock_;
  RecordSink sink_;
  std::map<std::uint64_t, Pending> pending_;
  std::map<std::uint64_t, std::vector<std::pair<Box, std::uint64_t>>> assoc_;
  std::map<std::string, std::map<std::uint64_t, std::int64_t>> open_;
  std::map<Stage, StageStats> stats_;
  std::optional<std::uint64_t> last_associated_;
  std::uint64_t next_emit_ = 0;
  std::uint64_t emitted_ = 0;
  std::int64_t first_emit_ns_ = 0;
  std::int64_t last_emit_ns_ = 0;
};

// --- engine -----------------------------------------------------------------

inline std::vector<StageDescriptor> default_stages() {
  return {{Stage::detect, 2, {}, 1}, {Stage::attributes, 1, {Stage::detect}, 1}, {Stage::similarity, 0, {Stage::detect}, 1}};
}

struct EngineOptions {
  std::size_t capacity = 32;
  std::vector<StageDescriptor> stages = default_stages();
  TrackerConfig tracker;
  /// Inter-frame pacing; zero is free-run.
  std::chrono::nanoseconds frame_interval = std::chrono::milliseconds(33);
  std::chrono::nanoseconds lease_timeout = std::chrono::seconds(5);
  /// Stop grabbing after this much engine time; zero waits for the source.
  std::chrono::nanoseconds max_duration{0};
  bool deterministic = false;
  /// Free-run grabber waits while this many store events are unconsumed.
  std::size_t max_event_backlog = 4096;
};

struct RunSinks {
  std::function<void(const OutputRecord&)> record;
  std::function<void(const TraceEvent&)> trace;
  /// Every store event, on the controller's thread, before the controller sees it.
  std::function<void(const StoreEvent&)> store_event;
};

namespace detail {

class EventQueue {
 public:
  void push(StoreEvent ev) {
    {
      std::lock_guard lock(mutex_);
      events_.push_back(std::move(ev));
    }
    cv_.notify_one();
  }

  std::deque<StoreEvent> take(std::chrono::nanoseconds wait) {
    std::unique_lock lock(mutex_);
    if (wait.count() > 0) cv_.wait_for(lock, wait, [&] { return !events_.empty(); });
    std::deque<StoreEvent> out;
    out.swap(events_);
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return events_.size();
  }

  void wake() { cv_.notify_all(); }

 private:
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<StoreEvent> events_;
};

struct WorkerSlot {
  const StageDescriptor* desc = nullptr;
  int index = 0;
  WorkerBackends backends;
};

inline std::vector<WorkerSlot> make_workers(const std::vector<StageDescriptor>& stages, const BackendFactory& factory) {
  std::vector<const StageDescriptor*> order;
  for (const auto& d : stages) order.push_back(&d);
  // Highest priority first; ties by stage order.
  std::stable_sort(order.begin(), order.end(), [](const StageDescriptor* a, const StageDescriptor* b) {
    return a->priority != b->priority ? a->priority > b->priority : index_of(a->stage) < index_of(b->stage);
  });
  std::vector<WorkerSlot> out;
  for (const auto* d : order) {
    for (int i = 0; i < d->worker_count; ++i) out.push_back({d, i, factory(d->stage, i)});
  }
  return out;
}

class FailureLog {
 public:
  void add(const std::string& what) {
    std::lock_guard lock(mutex_);
    ++count_;
    if (messages_.size() < 10) messages_.push_back(what);
  }
  std::uint64_t count() const {
    std::lock_guard lock(mutex_);
    return count_;
  }
  std::vector<std::string> messages() const {
    std::lock_guard lock(mutex_);
    return messages_;
  }

 private:
  mutable std::mutex mutex_;
  std::uint64_t count_ = 0;
  std::vector<std::string> messages_;
};

inline RunReport build_report(const EngineOptions& opt, const FrameStore& store, const Controller& ctl,
                              const FailureLog& failures, double duration_s, bool stopped) {
  RunReport r;
  r.frames_grabbed = store.frames_grabbed();
  r.records_emitted = ctl.records_emitted();
  r.duration_s = duration_s;
  if (r.records_emitted >= 2 && ctl.last_emit_ns() > ctl.first_emit_ns()) {
    r.record_fps = static_cast<double>(r.records_emitted - 1) / (static_cast<double>(ctl.last_emit_ns() - ctl.first_emit_ns()) / 1e9);
  }
  r.deterministic = opt.deterministic;
  r.stopped_early = stopped;
  r.worker_failures = failures.count();
  r.stale_completions = store.stale_completions();
  r.errors = failures.messages();
  for (Stage s : kAllStages) {
    const StageDescriptor* d = nullptr;
    for (const auto& x : opt.stages) {
      if (x.stage == s) d = &x;
    }
    if (!d) continue;
    StageReport sr;
    sr.stage = s;
    sr.workers = d->worker_count;
    sr.priority = d->priority;
    sr.counters = store.counters(s);
    sr.pending = store.unfinished(s);
    const auto& stats = ctl.stage_stats();
    if (auto it = stats.find(s); it != stats.end()) {
      const auto& st = it->second;
      const double span = st.latencies_ms.empty() || st.first_start_ns > st.last_done_ns
                              ? 0.0
                              : static_cast<double>(st.last_done_ns - st.first_start_ns) / 1e9;
      sr.timing = summarize_latencies(st.latencies_ms, span);
      sr.histogram = st.histogram;
    }
    r.stages.push_back(std::move(sr));
  }
  return r;
}

inline RunReport run_deterministic(const EngineOptions& opt, FrameSource& source, std::vector<WorkerSlot>& slots,
                                   const StageContext& ctx, const RunSinks& sinks, const std::atomic<bool>* stop) {
  VirtualClock clock;
  std::vector<StoreEvent> events;
  FrameStore store(opt.capacity, opt.stages, clock, [&](const StoreEvent& e) { events.push_back(e); });
  Controller ctl(opt.tracker, clock, sinks.record);
  FailureLog failures;

  auto drain = [&] {
    for (std::size_t i = 0; i < events.size(); ++i) {
      if (sinks.store_event) sinks.store_event(events[i]);
      if (sinks.trace) sinks.trace(events[i].trace);
      ctl.on_event(events[i]);
    }
    events.clear();
  };

  struct Job {
    std::optional<FrameLease> lease;
    StageResult result;
    std::optional<std::string> error;
    std::int64_t done_at = 0;
  };
  std::vector<Job> jobs(slots.size());

  const std::int64_t interval = opt.frame_interval.count();
  const std::int64_t timeout = opt.lease_timeout.count();
  std::int64_t t = 0;
  std::int64_t next_grab = 0;
  bool source_done = false;
  bool stopped = false;

  for (;;) {
    bool progress = true;
    while (progress) {
      progress = false;

      std::vector<std::size_t> due;
      for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (jobs[i].lease && jobs[i].done_at <= t) due.push_back(i);
      }
      std::stable_sort(due.begin(), due.end(), [&](std::size_t a, std::size_t b) { return jobs[a].done_at < jobs[b].done_at; });
      for (std::size_t i : due) {
        Job& j = jobs[i];
        try {
          if (j.error) {
            failures.add(*j.error);
            store.fail_stage(*j.lease, *j.error);
          } else {
            store.complete_stage(*j.lease, std::move(j.result.observations));
          }
        } catch (const Error& e) {
          if (e.code() != ErrorCode::StaleLease) throw;
        }
        j.lease.reset();
        progress = true;
        drain();
      }

      if (store.reap_expired(opt.lease_timeout) > 0) progress = true;
      drain();

      if (stop && stop->load()) {
        stopped = true;
        source_done = true;
      }
      if (!source_done && next_grab <= t) {
        ImageHandle img;
        if (opt.max_duration.count() == 0 || t < opt.max_duration.count()) img = source.next();
        if (!img) {
          source_done = true;
        } else {
          try {
            store.submit(std::move(img), t);
          } catch (const StoreSaturated&) {
          }
          next_grab = t + interval;
          progress = true;
        }
        drain();
      }

      if (!stopped) {
        for (std::size_t i = 0; i < slots.size(); ++i) {
          if (jobs[i].lease) continue;
          auto lease = store.next_frame_for_stage(slots[i].desc->stage);
          drain();
          if (!lease) continue;
          Job& j = jobs[i];
          j.error.reset();
          try {
            j.result = execute_stage(*lease, slots[i].backends, ctx);
          } catch (const std::exception& e) {
            j.error = e.what();
          }
          j.done_at = t + (j.error ? 0 : j.result.nominal.count());
          j.lease = std::move(lease);
          progress = true;
        }
      }
    }

    std::optional<std::int64_t> next;
    auto consider = [&](std::int64_t v) { next = next ? std::min(*next, v) : v; };
    for (const auto& j : jobs) {
      if (!j.lease) continue;
      consider(j.done_at);
      consider(j.lease->started_ns + timeout + 1);
    }
    if (!source_done) consider(next_grab);
    if (!next) break;
    t = std::max(t + 1, *next);
    clock.set(t);
  }
  ctl.flush();
  return build_report(opt, store, ctl, failures, static_cast<double>(t) / 1e9, stopped);
}

inline RunReport run_threaded(const EngineOptions& opt, FrameSource& source, std::vector<WorkerSlot>& slots,
                              const StageContext& ctx, const RunSinks& sinks, const std::atomic<bool>* stop) {
  SteadyClock clock;
  EventQueue queue;
  FrameStore store(opt.capacity, opt.stages, clock, [&](const StoreEvent& e) { queue.push(e); });
  Controller ctl(opt.tracker, clock, sinks.record);
  FailureLog failures;

  std::atomic<bool> halt_grab{false}, halt_workers{false}, source_done{false};

  std::thread grabber([&] {
    const auto origin = std::chrono::steady_clock::now();
    std::uint64_t n = 0;
    while (!halt_grab.load()) {
      if (opt.frame_interval.count() > 0) {
        const auto due = origin + opt.frame_interval * static_cast<std::int64_t>(n);
        while (!halt_grab.load() && std::chrono::steady_clock::now() < due) {
          std::this_thread::sleep_until(std::min(due, std::chrono::steady_clock::now() + std::chrono::milliseconds(50)));
        }
      } else {
        while (!halt_grab.load() && queue.size() > opt.max_event_backlog) {
          std::this_thread::sleep_for(std::chrono::microseconds(200));
        }
      }
      if (halt_grab.load()) break;
      if (opt.max_duration.count() > 0 && clock.now_ns() >= opt.max_duration.count()) break;
      ImageHandle img = source.next();
      if (!img) break;
      try {
        store.submit(std::move(img), clock.now_ns());
      } catch (const StoreSaturated&) {
      }
      ++n;
      if (opt.frame_interval.count() == 0) std::this_thread::yield();
    }
    source_done.store(true);
    queue.wake();
  });

  std::vector<std::thread> workers;
  for (auto& slot : slots) {
    workers.emplace_back([&, s = &slot] {
      const Stage stage = s->desc->stage;
      while (!halt_workers.load()) {
        auto lease = store.wait_for_frame(stage, halt_workers, std::chrono::milliseconds(20));
        if (!lease) continue;
        try {
          StageResult r = execute_stage(*lease, s->backends, ctx);
          try {
            store.complete_stage(*lease, std::move(r.observations));
          } catch (const Error& e) {
            if (e.code() != ErrorCode::StaleLease) throw;
          }
        } catch (const std::exception& e) {
          failures.add(std::string(to_string(stage)) + " worker " + std::to_string(s->index) + ": " + e.what());
          try {
            store.fail_stage(*lease, e.what());
          } catch (const Error&) {
          }
        }
      }
    });
  }

  auto drain = [&](std::chrono::nanoseconds wait) {
    for (auto& ev : queue.take(wait)) {
      if (sinks.store_event) sinks.store_event(ev);
      if (sinks.trace) sinks.trace(ev.trace);
      ctl.on_event(ev);
    }
  };

  bool stopped = false;
  for (;;) {
    drain(std::chrono::milliseconds(10));
    store.reap_expired(opt.lease_timeout);
    if (stop && stop->load() && !stopped) {
      stopped = true;
      halt_grab.store(true);
    }
    if (source_done.load() && (stopped || store.quiescent())) break;
  }
  halt_grab.store(true);
  grabber.join();
  halt_workers.store(true);
  store.notify_all_stages();
  for (auto& w : workers) w.join();
  drain(std::chrono::nanoseconds{0});
  ctl.flush();
  return build_report(opt, store, ctl, failures, static_cast<double>(clock.now_ns()) / 1e9, stopped);
}

}  // namespace detail

/// Drive the source through the configured stages until the source is
/// exhausted, `max_duration` passes, or `stop` is set. Backends for every
/// worker are created before any frame is grabbed, so startup failures
/// propagate from here.
inline RunReport run_pipeline(const EngineOptions& opt, FrameSource& source, const BackendFactory& factory,
                              const StageContext& ctx = {}, const RunSinks& sinks = {},
                              const std::atomic<bool>* stop = nullptr) {
  FrameStore::validate_stage_graph(opt.stages);
  auto slots = detail::make_workers(opt.stages, factory);
  return opt.deterministic ? detail::run_deterministic(opt, source, slots, ctx, sinks, stop)
                           : detail::run_threaded(opt, source, slots, ctx, sinks, stop);
}

}  // namespace faceflow
