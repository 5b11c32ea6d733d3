#include <gtest/gtest.h>

#include <map>
#include <random>
#include <thread>

#include "faceflow/frame_store.hpp"

using namespace faceflow;
using namespace std::chrono_literals;

namespace {

ImageHandle tiny_image() {
  auto img = std::make_shared<Image>();
  img->width = 4;
  img->height = 4;
  img->bytes.assign(16, 0);
  return img;
}

std::vector<StageDescriptor> three_stages() {
  return {{Stage::detect, 2, {}, 1}, {Stage::attributes, 1, {Stage::detect}, 1}, {Stage::similarity, 0, {Stage::detect}, 1}};
}

FaceObservation obs(double x) {
  FaceObservation o;
  o.box = {x, 0, 10, 10};
  o.detection_score = 0.9;
  return o;
}

struct Recorder {
  std::vector<StoreEvent> events;
  FrameStore::Observer fn() {
    return [this](const StoreEvent& e) { events.push_back(e); };
  }
  std::vector<std::uint64_t> ids(TraceKind k, std::optional<std::string> stage = std::nullopt) const {
    std::vector<std::uint64_t> out;
    for (const auto& e : events) {
      if (e.trace.kind == k && e.trace.stage == stage) out.push_back(e.trace.frame_id);
    }
    return out;
  }
};

}  // namespace

TEST(FrameStore, SubmitIntoEmptyStore) {
  VirtualClock clock;
  FrameStore store(4, three_stages(), clock);
  EXPECT_EQ(store.submit(tiny_image(), 0), 0u);
  const auto f = store.snapshot(0);
  ASSERT_TRUE(f);
  for (auto st : f->flags) EXPECT_EQ(st, StageState::pending);
}

TEST(FrameStore, FullStoreEvictsOldestIdleFrame) {
  VirtualClock clock;
  Recorder rec;
  FrameStore store(2, three_stages(), clock, rec.fn());
  store.submit(tiny_image(), 0);
  store.submit(tiny_image(), 1);
  EXPECT_EQ(store.submit(tiny_image(), 2), 2u);
  EXPECT_EQ(store.frame_ids(), (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(rec.ids(TraceKind::evict), (std::vector<std::uint64_t>{0}));
  for (Stage s : kAllStages) EXPECT_EQ(store.counters(s).dropped, 1u);
}

TEST(FrameStore, SaturatedWhenEveryFrameLeased) {
  VirtualClock clock;
  Recorder rec;
  FrameStore store(2, three_stages(), clock, rec.fn());
  store.submit(tiny_image(), 0);
  ASSERT_EQ(store.next_frame_for_stage(Stage::detect)->frame_id, 0u);
  store.submit(tiny_image(), 1);
  ASSERT_EQ(store.next_frame_for_stage(Stage::detect)->frame_id, 1u);
  try {
    store.submit(tiny_image(), 2);
    FAIL();
  } catch (const StoreSaturated& e) {
    EXPECT_EQ(e.frame_id(), 2u);
    EXPECT_EQ(e.code(), ErrorCode::StoreSaturated);
  }
  EXPECT_EQ(store.frame_ids(), (std::vector<std::uint64_t>{0, 1}));
  EXPECT_EQ(store.frames_grabbed(), 3u);
  EXPECT_EQ(store.counters(Stage::detect).dropped, 1u);
  EXPECT_EQ(rec.ids(TraceKind::drop), (std::vector<std::uint64_t>{2}));
}

TEST(FrameStore, EvictionSkipsLeasedFrames) {
  VirtualClock clock;
  Recorder rec;
  FrameStore store(2, three_stages(), clock, rec.fn());
  store.submit(tiny_image(), 0);
  auto lease = store.next_frame_for_stage(Stage::detect);
  store.submit(tiny_image(), 1);
  store.submit(tiny_image(), 2);
  EXPECT_EQ(store.frame_ids(), (std::vector<std::uint64_t>{0, 2}));
  store.complete_stage(*lease, {});
  store.submit(tiny_image(), 3);
  EXPECT_EQ(store.frame_ids(), (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(rec.ids(TraceKind::evict), (std::vector<std::uint64_t>{1, 0}));
}

TEST(FrameStore, NewestFirstSkipsOlderFrames) {
  VirtualClock clock;
  FrameStore store(8, three_stages(), clock);
  for (int i = 0; i < 3; ++i) store.submit(tiny_image(), i);
  const auto lease = store.next_frame_for_stage(Stage::detect);
  ASSERT_TRUE(lease);
  EXPECT_EQ(lease->frame_id, 2u);
  EXPECT_EQ(store.counters(Stage::detect).skipped, 2u);
  EXPECT_EQ(store.snapshot(0)->flags[index_of(Stage::detect)], StageState::skipped);
  // a frame detection will never see cannot reach the dependent stages either
  EXPECT_EQ(store.snapshot(0)->flags[index_of(Stage::attributes)], StageState::skipped);
  EXPECT_EQ(store.counters(Stage::attributes).skipped, 2u);
}

TEST(FrameStore, PrerequisiteFilter) {
  VirtualClock clock;
  FrameStore store(8, three_stages(), clock);
  store.submit(tiny_image(), 0);
  auto d0 = store.next_frame_for_stage(Stage::detect);
  store.complete_stage(*d0, {obs(1)});
  store.submit(tiny_image(), 1);
  const auto a = store.next_frame_for_stage(Stage::attributes);
  ASSERT_TRUE(a);
  EXPECT_EQ(a->frame_id, 0u);
  EXPECT_EQ(a->observations.size(), 1u);
  EXPECT_FALSE(store.next_frame_for_stage(Stage::attributes));
}

TEST(FrameStore, NothingEligible) {
  VirtualClock clock;
  FrameStore store(8, three_stages(), clock);
  EXPECT_FALSE(store.next_frame_for_stage(Stage::detect));
  store.submit(tiny_image(), 0);
  store.complete_stage(*store.next_frame_for_stage(Stage::detect), {});
  EXPECT_FALSE(store.next_frame_for_stage(Stage::detect));
}

TEST(FrameStore, CompleteMergesObservations) {
  VirtualClock clock;
  FrameStore store(8, three_stages(), clock);
  store.submit(tiny_image(), 0);
  auto d = store.next_frame_for_stage(Stage::detect);
  store.complete_stage(*d, {obs(1), obs(50)});
  auto f = store.snapshot(0);
  EXPECT_EQ(f->observations.size(), 2u);
  EXPECT_EQ(f->flags[index_of(Stage::detect)], StageState::done);

  auto a = store.next_frame_for_stage(Stage::attributes);
  std::vector<FaceObservation> results;
  for (const auto& o : a->observations) {
    FaceObservation r;
    r.box = o.box;
    r.attributes = AttributeEstimate{30, 0.2, 0.7};
    results.push_back(r);
  }
  store.complete_stage(*a, results);
  f = store.snapshot(0);
  for (const auto& o : f->observations) {
    ASSERT_TRUE(o.attributes);
    EXPECT_EQ(o.attributes->age, 30);
    EXPECT_EQ(o.detection_score, 0.9);
  }

  try {
    store.complete_stage(*a, results);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::StaleLease);
  }
  EXPECT_EQ(store.stale_completions(), 1u);
}

TEST(FrameStore, ReapedLeaseIsStale) {
  VirtualClock clock;
  FrameStore store(8, three_stages(), clock);
  store.submit(tiny_image(), 0);
  auto d = store.next_frame_for_stage(Stage::detect);
  clock.set(100);
  EXPECT_EQ(store.reap_expired(std::chrono::nanoseconds(100)), 0u);
  clock.set(101);
  EXPECT_EQ(store.reap_expired(std::chrono::nanoseconds(100)), 1u);
  EXPECT_THROW(store.complete_stage(*d, {}), Error);
  EXPECT_EQ(store.counters(Stage::detect).failed, 1u);
  EXPECT_EQ(store.snapshot(0)->flags[index_of(Stage::attributes)], StageState::skipped);
}

TEST(FrameStore, StageGraphValidation) {
  VirtualClock clock;
  EXPECT_THROW(FrameStore(0, three_stages(), clock), Error);
  EXPECT_THROW(FrameStore(4, {}, clock), Error);
  EXPECT_THROW(FrameStore(4, {{Stage::attributes, 0, {}, 1}}, clock), Error);
  EXPECT_THROW(FrameStore(4, {{Stage::detect, 0, {Stage::attributes}, 1}, {Stage::attributes, 0, {Stage::detect}, 1}}, clock),
               Error);
  EXPECT_THROW(FrameStore(4, {{Stage::detect, 0, {}, 0}}, clock), Error);
  FrameStore only_detect(4, {{Stage::detect, 0, {}, 1}}, clock);
  EXPECT_THROW(only_detect.next_frame_for_stage(Stage::attributes), Error);
}

TEST(FrameStore, WaitForFrameWakesOnSubmit) {
  SteadyClock clock;
  FrameStore store(4, three_stages(), clock);
  std::atomic<bool> stop{false};
  EXPECT_FALSE(store.wait_for_frame(Stage::detect, stop, 5ms));
  std::thread producer([&] {
    std::this_thread::sleep_for(20ms);
    store.submit(tiny_image(), 0);
  });
  std::optional<FrameLease> lease;
  for (int i = 0; i < 100 && !lease; ++i) lease = store.wait_for_frame(Stage::detect, stop, 1s);
  producer.join();
  ASSERT_TRUE(lease);
  EXPECT_EQ(lease->frame_id, 0u);
}

// Random interleavings of submit / lease / complete / fail / reap.
TEST(FrameStore, RandomOperationsKeepInvariants) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    VirtualClock clock;
    Recorder rec;
    const std::size_t capacity = 1 + rng() % 6;
    FrameStore store(capacity, three_stages(), clock, rec.fn());
    std::vector<FrameLease> held;
    std::map<Stage, std::vector<std::uint64_t>> leased_ids;
    std::int64_t t = 0;
    for (int step = 0; step < 200; ++step) {
      clock.set(++t);
      switch (rng() % 5) {
        case 0:
          try {
            store.submit(tiny_image(), t);
          } catch (const StoreSaturated&) {
          }
          break;
        case 1:
        case 2: {
          const Stage s = kAllStages[rng() % 3];
          if (auto l = store.next_frame_for_stage(s)) {
            if (s != Stage::detect) {
              ASSERT_EQ(store.snapshot(l->frame_id)->flags[index_of(Stage::detect)], StageState::done);
            }
            leased_ids[s].push_back(l->frame_id);
            held.push_back(*l);
          }
          break;
        }
        case 3:
          if (!held.empty()) {
            const std::size_t i = rng() % held.size();
            try {
              if (rng() % 8 == 0) {
                store.fail_stage(held[i]);
              } else {
                store.complete_stage(held[i], held[i].stage == Stage::detect ? std::vector{obs(1)} : held[i].observations);
              }
            } catch (const Error& e) {
              ASSERT_EQ(e.code(), ErrorCode::StaleLease);
            }
            held.erase(held.begin() + static_cast<std::ptrdiff_t>(i));
          }
          break;
        case 4:
          store.reap_expired(std::chrono::nanoseconds(40));
          break;
      }
      ASSERT_LE(store.size(), capacity);
    }

    for (Stage s : kAllStages) {
      const auto c = store.counters(s);
      EXPECT_EQ(c.processed + c.skipped + c.dropped + c.failed + store.unfinished(s), store.frames_grabbed());
      const auto& ids = leased_ids[s];
      for (std::size_t i = 1; i < ids.size(); ++i) EXPECT_LT(ids[i - 1], ids[i]);
    }

    // flags never move backwards
    auto rank = [](StageState st) { return st == StageState::pending ? 0 : st == StageState::in_progress ? 1 : 2; };
    std::map<std::uint64_t, StageFlags> last;
    for (const auto& e : rec.events) {
      if (e.trace.kind == TraceKind::drop && !e.trace.stage) continue;
      if (e.trace.kind == TraceKind::evict) continue;
      auto [it, fresh] = last.try_emplace(e.trace.frame_id, e.flags);
      if (fresh) continue;
      for (std::size_t k = 0; k < kStageCount; ++k) {
        EXPECT_LE(rank(it->second[k]), rank(e.flags[k]));
        if (is_terminal(it->second[k])) {
          EXPECT_EQ(it->second[k], e.flags[k]);
        }
      }
      it->second = e.flags;
    }
  }
}
