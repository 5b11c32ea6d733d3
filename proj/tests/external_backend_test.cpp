#include <gtest/gtest.h>

#include <chrono>

#include "faceflow/engine.hpp"
#include "faceflow/external_backend.hpp"
#include "support.hpp"

using namespace faceflow;
using namespace std::chrono_literals;
using testsupport::quote;

namespace {

std::string fake(const std::string& role, const std::string& mode, const std::string& log = {}) {
  std::string cmd = quote(FAKE_BACKEND) + " " + role + " " + mode;
  if (!log.empty()) cmd += " --log " + quote(log);
  return cmd;
}

Image tiny_image() {
  Image img;
  img.width = 2;
  img.height = 2;
  img.bytes = {0x00, 0x40, 0x80, 0xff};
  return img;
}

FaceCrop tiny_crop() {
  return {3, std::make_shared<Image>(tiny_image()), {0.5, 0.5, 1.0, 1.5}, SimilarityTransform{2.0, 0.25, -1.0, 3.0}};
}

std::string golden(const std::string& name) { return testsupport::read_file(testsupport::test_data("protocol/" + name)); }

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(Protocol, MessageBuilders) {
  EXPECT_EQ(protocol::hello(BackendRole::embed), R"({"hello":{"role":"embed","version":1}})");
  EXPECT_EQ(protocol::request(0, protocol::image_input(7, tiny_image())) + "\n", golden("request_detect.jsonl"));
  EXPECT_EQ(protocol::request(0, protocol::crop_input(tiny_crop())) + "\n", golden("request_multitask.jsonl"));
}

TEST(Protocol, DetectorGoldenExchange) {
  testsupport::TempDir tmp("proto");
  const auto log = tmp / "wire.jsonl";
  ExternalDetector det(fake("detect", "golden", log), 2000ms);
  const auto out = det.detect(7, tiny_image());

  const DetectorOutput fixture{{{{50, 60, 70, 80}, 0.9}, {{10, 20, 30, 40}, 0.5}}};
  EXPECT_EQ(out, fixture);
  EXPECT_EQ(testsupport::read_file(log), golden("hello_detect.jsonl") + golden("request_detect.jsonl"));

  // The golden response parses to the same fixture.
  const auto lines = testsupport::read_lines(testsupport::test_data("protocol/response_detect.jsonl"));
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(protocol::parse_detections(nlohmann::json::parse(lines[1]).at("output")), fixture);
}

TEST(Protocol, FakeBackendEmitsGoldenResponses) {
  const auto hello = golden("hello_detect.jsonl");
  const auto req = golden("request_detect.jsonl");
  auto r = testsupport::run_command("printf '%s%s' " + quote(hello) + " " + quote(req) + " | " + fake("detect", "golden"));
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.output, golden("response_detect.jsonl"));

  r = testsupport::run_command("printf '%s%s' " + quote(R"({"hello":{"role":"embed","version":1}})" "\n") + " " +
                               quote(req) + " | " + fake("embed", "golden"));
  EXPECT_EQ(r.output, golden("response_embed.jsonl"));
}

TEST(Protocol, MultitaskGoldenExchange) {
  testsupport::TempDir tmp("proto");
  const auto log = tmp / "wire.jsonl";
  ExternalAttributeEstimator est(fake("multitask", "golden", log), 2000ms);
  const auto m = est.estimate(tiny_crop());
  EXPECT_EQ(decode_age(m.age), 30.0);
  EXPECT_EQ(m.gender_p_female, 0.25);
  EXPECT_EQ(m.smile_p, 0.75);
  EXPECT_EQ(testsupport::read_file(log), golden("hello_multitask.jsonl") + golden("request_multitask.jsonl"));
}

TEST(Protocol, SingleTaskRolesMatchMultitask) {
  SplitAttributeEstimator split(std::make_unique<ExternalAgeEstimator>(fake("age", "golden"), 2000ms),
                                std::make_unique<ExternalGenderEstimator>(fake("gender", "golden"), 2000ms),
                                std::make_unique<ExternalSmileEstimator>(fake("smile", "golden"), 2000ms));
  ExternalAttributeEstimator multi(fake("multitask", "golden"), 2000ms);
  EXPECT_EQ(split.estimate(tiny_crop()), multi.estimate(tiny_crop()));
}

TEST(Protocol, KeypointsAndEmbedding) {
  ExternalKeypointLocator loc(fake("keypoints", "golden"), 2000ms);
  const auto k = loc.locate(tiny_crop());
  ASSERT_EQ(k.size(), 5u);
  EXPECT_EQ(k[2], (Point2{2.0, 3.0}));

  ExternalEmbedder emb(fake("embed", "golden"), 2000ms);
  EXPECT_EQ(emb.dimension(), 4u);
  const auto e = emb.embed(tiny_crop());
  EXPECT_EQ(e.values, (std::vector<float>{0, 1, 0, 0}));
  EXPECT_TRUE(e.unit_normalized);
}

TEST(ExternalBackend, HundredClassAgeIsInvalidDistribution) {
  ExternalAttributeEstimator est(fake("multitask", "bad_age"), 2000ms);
  EXPECT_EQ(code_of([&] { est.estimate(tiny_crop()); }), ErrorCode::InvalidDistribution);
  ExternalAgeEstimator age(fake("age", "bad_age"), 2000ms);
  EXPECT_EQ(code_of([&] { age.estimate_age(tiny_crop()); }), ErrorCode::InvalidDistribution);
}

TEST(ExternalBackend, WrongEmbeddingDimension) {
  ExternalEmbedder emb(fake("embed", "bad_dim"), 2000ms);
  EXPECT_EQ(code_of([&] { emb.embed(tiny_crop()); }), ErrorCode::DimensionMismatch);
}

TEST(ExternalBackend, ProtocolViolations) {
  for (const char* mode : {"malformed", "wrong_id", "error"}) {
    ExternalDetector det(fake("detect", mode), 2000ms);
    EXPECT_EQ(code_of([&] { det.detect(0, tiny_image()); }), ErrorCode::ProtocolViolation) << mode;
  }
}

TEST(ExternalBackend, HangAndCrashAreTimeouts) {
  ExternalDetector hang(fake("detect", "hang"), 200ms);
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_EQ(code_of([&] { hang.detect(0, tiny_image()); }), ErrorCode::Timeout);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, 3s);

  ExternalDetector crash(fake("detect", "crash"), 2000ms);
  EXPECT_EQ(code_of([&] { crash.detect(0, tiny_image()); }), ErrorCode::Timeout);
}

TEST(ExternalBackend, SpawnFailures) {
  EXPECT_EQ(code_of([] { ExternalDetector d(fake("detect", "no_ready"), 2000ms); }), ErrorCode::SpawnFailure);
  EXPECT_EQ(code_of([] { ExternalDetector d("/nonexistent/backend-binary", 2000ms); }), ErrorCode::SpawnFailure);
}

TEST(ExternalBackend, RespawnsAfterFailure) {
  ExternalProcess proc(fake("detect", "crash_at_1"), BackendRole::detect, 2000ms);
  const pid_t first = proc.pid();
  EXPECT_NO_THROW(proc.call(protocol::image_input(0, tiny_image())));
  EXPECT_EQ(code_of([&] { proc.call(protocol::image_input(1, tiny_image())); }), ErrorCode::Timeout);
  EXPECT_NO_THROW(proc.call(protocol::image_input(2, tiny_image())));
  EXPECT_NE(proc.pid(), first);
}

// A backend dying mid-request costs one failed frame; the run carries on.
TEST(ExternalBackend, PipelineContainsBackendCrash) {
  auto scene = std::make_shared<Scene>();
  scene->width = 200;
  scene->height = 200;
  scene->frames.resize(1);
  SceneSource source(scene, 6);
  EngineOptions opt;
  opt.deterministic = true;
  opt.stages = {{Stage::detect, 0, {}, 1}};
  const std::string cmd = fake("detect", "crash_at_1");
  auto factory = [&](Stage, int) {
    WorkerBackends b;
    b.detector = std::make_unique<ExternalDetector>(cmd, 2000ms);
    return b;
  };
  std::vector<OutputRecord> records;
  RunSinks sinks;
  sinks.record = [&](const OutputRecord& r) { records.push_back(r); };
  const auto report = run_pipeline(opt, source, factory, {}, sinks);
  const auto* d = report.stage(Stage::detect);
  ASSERT_TRUE(d);
  EXPECT_EQ(d->counters.failed, 1u);
  EXPECT_EQ(d->counters.processed, 5u);
  EXPECT_EQ(report.worker_failures, 1u);
  EXPECT_EQ(records.size(), 6u);
  EXPECT_EQ(records[1].faces.size(), 0u);
  EXPECT_EQ(records[2].faces.size(), 2u);
}
