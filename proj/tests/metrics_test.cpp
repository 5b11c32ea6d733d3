#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "faceflow/metrics.hpp"

using namespace faceflow;

namespace {

// Reference AP: greedy matching per score rank, then for every recall level
// take the best precision at any recall at or beyond it.
double oracle_ap(const std::vector<ImageDetections>& dets, const GroundTruthSet& gt, double thr) {
  std::size_t n_gt = 0;
  for (const auto& [_, v] : gt) n_gt += v.size();
  std::vector<std::tuple<double, std::size_t, std::size_t>> order;  // score, image index, det index
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = 0; j < dets[i].detections.size(); ++j) order.emplace_back(dets[i].detections[j].score, i, j);
  }
  if (n_gt == 0) return order.empty() ? 1.0 : 0.0;
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  std::map<std::string, std::set<std::size_t>> taken;
  std::vector<std::pair<double, double>> pr;  // recall, precision
  std::size_t tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& img = dets[std::get<1>(order[r])];
    const Box& b = img.detections[std::get<2>(order[r])].box;
    const auto it = gt.find(img.image_id);
    if (it != gt.end()) {
      std::optional<std::size_t> best;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (taken[img.image_id].count(g)) continue;
        if (!best || iou(b, it->second[g]) > iou(b, it->second[*best])) best = g;
      }
      if (best && iou(b, it->second[*best]) >= thr) {
        taken[img.image_id].insert(*best);
        ++tp;
      }
    }
    pr.emplace_back(static_cast<double>(tp) / n_gt, static_cast<double>(tp) / (r + 1));
  }
  double ap = 0, prev = 0;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    if (pr[i].first == prev) continue;
    double best = 0;
    for (std::size_t j = i; j < pr.size(); ++j) best = std::max(best, pr[j].second);
    ap += (pr[i].first - prev) * best;
    prev = pr[i].first;
  }
  return ap;
}

struct Fixture {
  std::vector<ImageDetections> dets;
  GroundTruthSet gt;
};

Fixture random_fixture(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0, 200), size(10, 60), jit(-8, 8), score(0, 1);
  Fixture f;
  const int images = 1 + static_cast<int>(rng() % 4);
  for (int i = 0; i < images; ++i) {
    const std::string id = "img" + std::to_string(i);
    auto& boxes = f.gt[id];
    ImageDetections d{id, {}};
    const int n = static_cast<int>(rng() % 5);
    for (int k = 0; k < n; ++k) {
      const Box g{pos(rng), pos(rng), size(rng), size(rng)};
      boxes.push_back(g);
      if (rng() % 4) d.detections.push_back({{g.x + jit(rng), g.y + jit(rng), g.w + jit(rng) / 2, g.h + jit(rng) / 2}, score(rng)});
    }
    const int fps = static_cast<int>(rng() % 3);
    for (int k = 0; k < fps; ++k) d.detections.push_back({{pos(rng), pos(rng), size(rng), size(rng)}, score(rng)});
    f.dets.push_back(d);
  }
  return f;
}

TraceEvent ev(TraceKind k, std::uint64_t frame, const char* stage, double t_s) {
  return {k, frame, stage ? std::optional<std::string>(stage) : std::nullopt, static_cast<std::int64_t>(t_s * 1e9)};
}

}  // namespace

TEST(Iou, Examples) {
  EXPECT_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0);
  EXPECT_EQ(iou({0, 0, 10, 10}, {20, 20, 5, 5}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {5, 0, 10, 10}), 50.0 / 150.0);
  EXPECT_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 6}), 0.6);
}

TEST(AveragePrecision, Fixtures) {
  const GroundTruthSet one{{"a", {{0, 0, 10, 10}}}};
  const std::vector<ImageDetections> perfect{{"a", {{{0, 0, 10, 10}, 0.9}}}};
  EXPECT_EQ(average_precision(perfect, one, 0.5), 1.0);
  EXPECT_EQ(coco_style_ap(perfect, one).ap_50_95, 1.0);

  const std::vector<ImageDetections> tp_then_fp{{"a", {{{0, 0, 10, 10}, 0.9}, {{50, 50, 10, 10}, 0.5}}}};
  EXPECT_EQ(average_precision(tp_then_fp, one, 0.5), 1.0);

  const GroundTruthSet two{{"a", {{0, 0, 10, 10}, {100, 100, 10, 10}}}};
  const std::vector<ImageDetections> fp_tp_tp{
      {"a", {{{50, 50, 10, 10}, 0.9}, {{0, 0, 10, 10}, 0.8}, {{100, 100, 10, 10}, 0.7}}}};
  EXPECT_DOUBLE_EQ(average_precision(fp_tp_tp, two, 0.5), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(oracle_ap(fp_tp_tp, two, 0.5), 2.0 / 3.0);

  const std::vector<ImageDetections> iou_06{{"a", {{{0, 0, 10, 6}, 0.9}}}};
  const auto c = coco_style_ap(iou_06, one);
  EXPECT_EQ(c.ap_50, 1.0);
  EXPECT_DOUBLE_EQ(c.ap_50_95, 0.3);

  const std::vector<ImageDetections> none;
  const auto z = coco_style_ap(none, one);
  EXPECT_EQ(z.ap_50, 0.0);
  EXPECT_EQ(z.ap_50_95, 0.0);

  // duplicate detection of one face: the second is a false positive
  const std::vector<ImageDetections> dup{{"a", {{{0, 0, 10, 10}, 0.9}, {{0, 0, 10, 10}, 0.8}}}};
  EXPECT_EQ(average_precision(dup, one, 0.5), 1.0);
  EXPECT_EQ(average_precision(dup, two, 0.5), 0.5);
}

TEST(AveragePrecision, MatchesOracle) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 500; ++trial) {
    const auto f = random_fixture(rng);
    for (double thr : coco_iou_thresholds()) {
      EXPECT_NEAR(average_precision(f.dets, f.gt, thr), oracle_ap(f.dets, f.gt, thr), 1e-12);
    }
  }
}

TEST(AveragePrecision, Properties) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 300; ++trial) {
    auto f = random_fixture(rng);
    const auto c = coco_style_ap(f.dets, f.gt);
    EXPECT_GE(c.ap_50, c.ap_50_95);
    EXPECT_GE(c.ap_50_95, 0.0);
    EXPECT_LE(c.ap_50, 1.0);

    double prev = 2.0;
    for (double thr : coco_iou_thresholds()) {
      const double ap = average_precision(f.dets, f.gt, thr);
      EXPECT_LE(ap, prev + 1e-15);
      prev = ap;
    }

    // a strictly monotone rescoring leaves the ranking and AP unchanged
    auto rescored = f.dets;
    for (auto& img : rescored) {
      for (auto& d : img.detections) d.score = 0.1 + 0.5 * d.score * d.score;
    }
    EXPECT_EQ(average_precision(rescored, f.gt, 0.5), average_precision(f.dets, f.gt, 0.5));

    // a lowest-scored false positive cannot raise AP
    auto extra = f.dets;
    extra[0].detections.push_back({{1000, 1000, 5, 5}, -1.0});
    EXPECT_LE(average_precision(extra, f.gt, 0.5), average_precision(f.dets, f.gt, 0.5) + 1e-15);
  }
}

TEST(MeanAveragePrecision, AveragesClasses) {
  const std::vector<double> aps{1.0, 0.5, 0.0};
  EXPECT_EQ(mean_average_precision(aps), 0.5);
  EXPECT_THROW(mean_average_precision(std::vector<double>{}), Error);
}

TEST(Regression, MaeAndAccuracy) {
  const std::vector<double> p{30, 40}, t{32, 36};
  EXPECT_EQ(mae(p, t), 3.0);
  EXPECT_THROW(mae(p, std::vector<double>{1.0}), Error);

  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(0, 100);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(1 + rng() % 50), b(a.size());
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) diffs.push_back(std::max(a[i], b[i]) - std::min(a[i], b[i]));
    double mean = 0;
    for (double d : diffs) mean += d / static_cast<double>(diffs.size());
    EXPECT_NEAR(mae(a, b), mean, 1e-9);
  }

  const std::vector<int> pred{1, 0, 1, 1}, truth{1, 0, 0, 1};
  EXPECT_EQ(accuracy(pred, truth), 0.75);
  EXPECT_THROW(accuracy(pred, std::vector<int>{1}), Error);
}

TEST(Timing, ThroughputExample) {
  std::vector<TraceEvent> events;
  for (int i = 0; i < 10; ++i) {
    events.push_back(ev(TraceKind::stage_start, i, "detect", 0.1 * i));
    events.push_back(ev(TraceKind::stage_done, i, "detect", 0.1 * (i + 1)));
  }
  const auto s = timing_stats(events);
  const auto& d = s.stages.at("detect");
  EXPECT_EQ(d.count, 10u);
  EXPECT_NEAR(d.span_s, 1.0, 1e-9);
  EXPECT_NEAR(d.fps, 10.0, 1e-6);
  EXPECT_NEAR(d.mean_ms, 100.0, 1e-6);
  EXPECT_EQ(s.orphan_events, 0u);
}

TEST(Timing, EqualLatencies) {
  std::vector<TraceEvent> events;
  for (int i = 0; i < 7; ++i) {
    events.push_back(ev(TraceKind::stage_start, i, "attributes", 0.05 * i));
    events.push_back(ev(TraceKind::stage_done, i, "attributes", 0.05 * i + 0.020));
  }
  const auto stats = timing_stats(events);
  const auto& a = stats.stages.at("attributes");
  EXPECT_NEAR(a.mean_ms, 20.0, 1e-6);
  EXPECT_NEAR(a.p50_ms, 20.0, 1e-6);
  EXPECT_NEAR(a.p95_ms, 20.0, 1e-6);
  EXPECT_NEAR(a.p99_ms, 20.0, 1e-6);
}

TEST(Timing, PercentilesMatchOracle) {
  std::mt19937_64 rng(44);
  std::exponential_distribution<double> lat(1.0 / 30.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TraceEvent> events;
    std::vector<double> ms;
    double t = 0;
    const int n = 1 + static_cast<int>(rng() % 300);
    for (int i = 0; i < n; ++i) {
      const auto start = static_cast<std::int64_t>(t * 1e9);
      const auto done = start + static_cast<std::int64_t>(lat(rng) * 1e6) + 1;
      events.push_back({TraceKind::stage_start, static_cast<std::uint64_t>(i), "similarity", start});
      events.push_back({TraceKind::stage_done, static_cast<std::uint64_t>(i), "similarity", done});
      ms.push_back(static_cast<double>(done - start) / 1e6);
      t += 0.01;
    }
    std::shuffle(events.begin(), events.end(), rng);
    std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.t_ns < b.t_ns; });
    const auto stats = timing_stats(events);
    const auto& s = stats.stages.at("similarity");

    // smallest sample v with at least q% of samples <= v
    auto pct = [&](double q) {
      std::vector<double> sorted = ms;
      std::sort(sorted.begin(), sorted.end());
      for (double v : sorted) {
        const auto le = std::count_if(ms.begin(), ms.end(), [&](double x) { return x <= v; });
        if (100.0 * static_cast<double>(le) >= q * static_cast<double>(n) - 1e-9) return v;
      }
      return sorted.back();
    };
    EXPECT_EQ(s.p50_ms, pct(50));
    EXPECT_EQ(s.p95_ms, pct(95));
    EXPECT_EQ(s.p99_ms, pct(99));
    EXPECT_LE(s.p50_ms, s.p95_ms);
    EXPECT_LE(s.p95_ms, s.p99_ms);
    EXPECT_NEAR(s.fps * s.span_s, static_cast<double>(s.count), 1e-6);
    EXPECT_EQ(s.count, static_cast<std::size_t>(n));
  }
}

TEST(Timing, OrphansAndFailures) {
  const std::vector<TraceEvent> events{
      ev(TraceKind::grab, 0, nullptr, 0.0),
      ev(TraceKind::stage_start, 0, "detect", 0.0),
      ev(TraceKind::stage_start, 0, "detect", 0.001),  // duplicate
      ev(TraceKind::stage_done, 0, "detect", 0.01),
      ev(TraceKind::stage_done, 5, "detect", 0.02),     // no start
      ev(TraceKind::stage_start, 1, "detect", 0.03),    // never finishes
      ev(TraceKind::stage_start, 2, "attributes", 0.04),
      ev(TraceKind::fail, 2, "attributes", 0.05),
  };
  const auto s = timing_stats(events);
  EXPECT_EQ(s.orphan_events, 3u);
  EXPECT_EQ(s.stages.at("detect").count, 1u);
  EXPECT_EQ(s.stages.at("attributes").count, 0u);
  EXPECT_EQ(s.stages.at("attributes").fps, 0.0);
}

TEST(Timing, HistogramBuckets) {
  LatencyHistogram h;
  for (double v : {0.5, 1.0, 1.5, 33.0, 34.0, 6000.0}) h.add(v);
  EXPECT_EQ(h.counts[0], 2u);
  EXPECT_EQ(h.counts[1], 1u);
  EXPECT_EQ(h.counts[5], 1u);
  EXPECT_EQ(h.counts[6], 1u);
  EXPECT_EQ(h.counts.back(), 1u);
}
