#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "faceflow/error.hpp"
#include "faceflow/geometry.hpp"
#include "faceflow/inference.hpp"
#include "faceflow/trace.hpp"

namespace faceflow {

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// --- detection AP -----------------------------------------------------------

/// Ground truth of the single "face" class, keyed by image id.
using GroundTruthSet = std::map<std::string, std::vector<Box>>;

struct ImageDetections {
  std::string image_id;
  std::vector<ScoredBox> detections;
};

/// Area under the all-points interpolated precision/recall curve.
///
/// Detections are ranked by descending score over all images (ties keep
/// input order). Each detection claims the unmatched ground-truth box of its
/// image with the highest IoU, if that IoU reaches `iou_threshold`.
inline double average_precision(std::span<const ImageDetections> detections, const GroundTruthSet& gt,
                                 double iou_threshold) {
  std::size_t total_gt = 0;
  for (const auto& [_, boxes] : gt) total_gt += boxes.size();

  struct Ranked {
    const std::string* image;
    const ScoredBox* det;
  };
  std::vector<Ranked> ranked;
  for (const auto& img : detections) {
    for (const auto& d : img.detections) ranked.push_back({&img.image_id, &d});
  }
  if (total_gt == 0) return ranked.empty() ? 1.0 : 0.0;
  if (ranked.empty()) return 0.0;

  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.det->score > b.det->score; });

  std::map<std::string, std::vector<bool>> matched;
  for (const auto& [id, boxes] : gt) matched[id].assign(boxes.size(), false);

  std::vector<double> precision, recall;
  precision.reserve(ranked.size());
  recall.reserve(ranked.size());
  std::size_t tp = 0, fp = 0;
  for (const auto& r : ranked) {
    bool hit = false;
    if (auto it = gt.find(*r.image); it != gt.end()) {
      auto& used = matched[*r.image];
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < it->second.size(); ++j) {
        if (used[j]) continue;
        const double o = iou(r.det->box, it->second[j]);
        if (o > best) {
          best = o;
          best_j = j;
        }
      }
      if (best >= iou_threshold) {
        used[best_j] = true;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  for (std::size_t i = precision.size() - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct CocoAp {
  double ap_50_95 = 0.0;
  double ap_50 = 0.0;
};

/// IoU thresholds 0.50, 0.55, ..., 0.95, each formed as k/100 so that the
/// boundary values compare equal to their decimal literals.
inline std::array<double, 10> coco_iou_thresholds() {
  std::array<double, 10> t{};
  for (int i = 0; i < 10; ++i) t[i] = static_cast<double>(50 + 5 * i) / 100.0;
  return t;
}

inline CocoAp coco_style_ap(std::span<const ImageDetections> detections, const GroundTruthSet& gt) {
  CocoAp out;
  double sum = 0.0;
  for (double thr : coco_iou_thresholds()) {
    const double ap = average_precision(detections, gt, thr);
    if (thr == 0.5) out.ap_50 = ap;
    sum += ap;
  }
  out.ap_50_95 = sum / 10.0;
  return out;
}

/// Mean of per-class AP values.
inline double mean_average_precision(std::span<const double> per_class_ap) {
  if (per_class_ap.empty()) throw Error(ErrorCode::InvalidArgument, "mAP over an empty class list");
  double s = 0.0;
  for (double v : per_class_ap) s += v;
  return s / static_cast<double>(per_class_ap.size());
}

// --- regression / classification --------------------------------------------

inline double mae(std::span<const double> predictions, std::span<const double> truths) {
  if (predictions.size() != truths.size()) throw Error(ErrorCode::MismatchedSize, "mae: length mismatch");
  if (predictions.empty()) throw Error(ErrorCode::InvalidArgument, "mae: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) s += std::abs(predictions[i] - truths[i]);
  return s / static_cast<double>(predictions.size());
}

template <typename Label>
double accuracy(std::span<const Label> predicted, std::span<const Label> truth) {
  if (predicted.size() != truth.size()) throw Error(ErrorCode::MismatchedSize, "accuracy: length mismatch");
  if (predicted.empty()) throw Error(ErrorCode::InvalidArgument, "accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += (predicted[i] == truth[i]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

template <typename Label>
double accuracy(const std::vector<Label>& predicted, const std::vector<Label>& truth) {
  return accuracy(std::span<const Label>(predicted), std::span<const Label>(truth));
}

// --- timing -----------------------------------------------------------------

/// Nearest-rank percentile of an ascending sample: the ceil(q/100 * n)-th value.
inline double nearest_rank(std::span<const double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(sorted.size())));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

struct StageTiming {
  std::size_t count = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double p99_ms = 0.0;
  double span_s = 0.0;
  double fps = 0.0;
};

struct TimingStats {
  std::map<std::string, StageTiming> stages;
  std::size_t orphan_events = 0;
};

inline StageTiming summarize_latencies(std::vector<double> latencies_ms, double span_s) {
  StageTiming t;
  t.count = latencies_ms.size();
  t.span_s = span_s;
  if (latencies_ms.empty()) return t;
  std::sort(latencies_ms.begin(), latencies_ms.end());
  double sum = 0.0;
  for (double v : latencies_ms) sum += v;
  t.mean_ms = sum / static_cast<double>(t.count);
  t.p50_ms = nearest_rank(latencies_ms, 50.0);
  t.p95_ms = nearest_rank(latencies_ms, 95.0);
  t.p99_ms = nearest_rank(latencies_ms, 99.0);
  t.fps = span_s > 0.0 ? static_cast<double>(t.count) / span_s : 0.0;
  return t;
}

/// Per-stage latency (done - start) and throughput (completions over the
/// span from first start to last done). Starts without a done, dones without
/// a start, and duplicate starts are counted as orphans.
inline TimingStats timing_stats(std::span<const TraceEvent> events) {
  struct Acc {
    std::map<std::uint64_t, std::int64_t> open;
    std::vector<double> latencies_ms;
    std::int64_t first_start = std::numeric_limits<std::int64_t>::max();
    std::int64_t last_done = std::numeric_limits<std::int64_t>::min();
  };
  std::map<std::string, Acc> acc;
  TimingStats out;
  for (const auto& e : events) {
    if (!e.stage) continue;
    if (e.kind == TraceKind::stage_start) {
      auto& a = acc[*e.stage];
      if (!a.open.emplace(e.frame_id, e.t_ns).second) ++out.orphan_events;
    } else if (e.kind == TraceKind::stage_done) {
      auto& a = acc[*e.stage];
      auto it = a.open.find(e.frame_id);
      if (it == a.open.end()) {
        ++out.orphan_events;
        continue;
      }
      a.latencies_ms.push_back(static_cast<double>(e.t_ns - it->second) / 1e6);
      a.first_start = std::min(a.first_start, it->second);
      a.last_done = std::max(a.last_done, e.t_ns);
      a.open.erase(it);
    } else if (e.kind == TraceKind::fail) {
      // A failed lease closes its start without producing a completion.
      auto& a = acc[*e.stage];
      a.open.erase(e.frame_id);
    }
  }
  for (auto& [stage, a] : acc) {
    out.orphan_events += a.open.size();
    const double span = a.latencies_ms.empty() ? 0.0 : static_cast<double>(a.last_done - a.first_start) / 1e9;
    out.stages[stage] = summarize_latencies(std::move(a.latencies_ms), span);
  }
  return out;
}

/// Fixed-bucket latency histogram; bucket i counts values <= bounds[i] and
/// above bounds[i-1], with a final overflow bucket.
struct LatencyHistogram {
  static constexpr std::array<double, 12> bounds_ms{1, 2, 5, 10, 20, 33, 50, 100, 200, 500, 1000, 5000};
  std::array<std::uint64_t, bounds_ms.size() + 1> counts{};

  void add(double ms) {
    auto it = std::lower_bound(bounds_ms.begin(), bounds_ms.end(), ms);
    ++counts[static_cast<std::size_t>(it - bounds_ms.begin())];
  }
};

}  // namespace faceflow
