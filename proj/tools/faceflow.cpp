#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "faceflow/faceflow.hpp"
#include "faceflow/io.hpp"

namespace fs = std::filesystem;
using namespace faceflow;
using nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kConfig = 2, kSpawn = 3, kRuntime = 4 };

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

int fail(int code, const std::string& msg) {
  std::cerr << "faceflow: " << msg << "\n";
  return code;
}

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::ConfigError:
    case ErrorCode::FormatError:
    case ErrorCode::InvalidArgument:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::NotNormalized:
    case ErrorCode::EmptyGallery:
    case ErrorCode::UnknownIdentity:
    case ErrorCode::MismatchedSize:
      return kConfig;
    case ErrorCode::SpawnFailure:
      return kSpawn;
    default:
      return kRuntime;
  }
}

RunConfig load_config(const Globals& g) {
  if (g.config.empty()) throw Error(ErrorCode::ConfigError, "--config is required");
  RunConfig c = load_run_config(g.config);
  if (g.seed) c.seed = g.seed;
  if (g.deterministic) c.deterministic = true;
  if (!g.out.empty()) c.out_dir = g.out;
  return c;
}

// Everything a run needs besides the engine options, loaded and checked.
struct Prepared {
  std::shared_ptr<const Scene> scene;
  KeypointTemplate tmpl;
  StageContext ctx;
};

Prepared prepare(const RunConfig& c) {
  validate(c);
  Prepared p;
  p.tmpl = c.template_path.empty() ? default_template() : load_template(c.resolve(c.template_path));
  if (c.source_kind == "scene") {
    p.scene = std::make_shared<const Scene>(load_scene(c.resolve(c.scene_path)));
  } else {
    p.scene = std::make_shared<const Scene>();
  }
  p.ctx.face_template = p.tmpl;
  if (!c.gallery_path.empty()) {
    auto g = std::make_shared<EmbeddingGallery>(load_gallery(c.resolve(c.gallery_path)));
    g->freeze();
    if (c.similarity.enabled && c.embedder.kind == BackendKind::mock &&
        static_cast<std::size_t>(c.embedder.embedding_dim) != g->dimension()) {
      throw Error(ErrorCode::ConfigError, "gallery " + c.resolve(c.gallery_path) + " has dimension " +
                                              std::to_string(g->dimension()) + " but the embedder produces " +
                                              std::to_string(c.embedder.embedding_dim));
    }
    p.ctx.gallery = std::move(g);
  }
  return p;
}

std::unique_ptr<FrameSource> make_source(const RunConfig& c, const Prepared& p) {
  if (c.source_kind == "scene") {
    std::uint64_t n = static_cast<std::uint64_t>(c.frames);
    if (n == 0 && c.duration_ms == 0) n = p.scene->frames.size();
    return std::make_unique<SceneSource>(p.scene, n);
  }
  return std::make_unique<ImageDirectorySource>(c.resolve(c.directory), static_cast<std::uint64_t>(c.frames));
}

int with_errors(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    return fail(exit_code_for(e), e.what());
  } catch (const std::exception& e) {
    return fail(kRuntime, e.what());
  }
}

int cmd_run(const Globals& g) {
  RunConfig c;
  Prepared p;
  try {
    c = load_config(g);
    p = prepare(c);
  } catch (const Error& e) {
    return fail(e.code() == ErrorCode::SpawnFailure ? kSpawn : kConfig, e.what());
  }
  fs::create_directories(c.out_dir);
  std::ofstream records(fs::path(c.out_dir) / "records.jsonl");
  std::ofstream trace;
  if (c.write_trace) trace.open(fs::path(c.out_dir) / "trace.jsonl");
  if (!records || (c.write_trace && !trace)) return fail(kConfig, "cannot write to output directory " + c.out_dir);

  RunSinks sinks;
  sinks.record = [&](const OutputRecord& r) { records << to_json(r).dump() << "\n"; };
  if (c.write_trace) sinks.trace = [&](const TraceEvent& e) { trace << to_json(e).dump() << "\n"; };

  auto source = make_source(c, p);
  RunReport report;
  int code = kOk;
  try {
    report = run_pipeline(engine_options(c), *source, make_backend_factory(c, p.scene, p.tmpl), p.ctx, sinks, &g_stop);
  } catch (const Error& e) {
    code = e.code() == ErrorCode::SpawnFailure || e.code() == ErrorCode::ProtocolViolation ? kSpawn : kRuntime;
    std::cerr << "faceflow: " << e.what() << "\n";
  } catch (const std::exception& e) {
    code = kRuntime;
    std::cerr << "faceflow: " << e.what() << "\n";
  }
  std::ofstream(fs::path(c.out_dir) / "report.json") << to_json(report).dump(2) << "\n";
  if (code == kOk) {
    std::cerr << "faceflow: " << report.frames_grabbed << " frames, " << report.records_emitted << " records -> "
              << c.out_dir << "\n";
  }
  return code;
}

int cmd_bench(const Globals& g) {
  RunConfig base;
  Prepared p;
  try {
    base = load_config(g);
    p = prepare(base);
  } catch (const Error& e) {
    return fail(kConfig, e.what());
  }
  const Stage varied = stage_from_string(base.bench.stage);
  ordered_json rows = ordered_json::array();
  std::printf("%-8s %-10s %-11s %10s %9s %9s %9s %9s\n", "workers", "latency_ms", "stage", "processed", "fps", "p50_ms",
              "p95_ms", "p99_ms");
  for (std::int64_t w : base.bench.workers) {
    for (double lat : base.bench.latency_ms) {
      RunConfig c = base;
      c.stage(varied).enabled = true;
      c.stage(varied).workers = w;
      c.backend_for(varied).latency_ms = lat;
      if (!base.bench.paced) c.interval_ms = 0;
      c.duration_ms = base.bench.duration_ms;
      c.frames = 0;
      c.deterministic = false;
      validate(c);
      auto source = make_source(c, p);
      const RunReport r =
          run_pipeline(engine_options(c), *source, make_backend_factory(c, p.scene, p.tmpl), p.ctx, {}, &g_stop);
      ordered_json row;
      row["workers"] = w;
      row["latency_ms"] = lat;
      row["paced"] = base.bench.paced;
      row["frames_grabbed"] = r.frames_grabbed;
      row["record_fps"] = r.record_fps;
      ordered_json stages = ordered_json::object();
      for (const auto& s : r.stages) {
        stages[std::string(to_string(s.stage))] = {{"processed", s.counters.processed}, {"fps", s.timing.fps},
                                                   {"p50_ms", s.timing.p50_ms},          {"p95_ms", s.timing.p95_ms},
                                                   {"p99_ms", s.timing.p99_ms}};
        std::printf("%-8lld %-10g %-11s %10llu %9.2f %9.2f %9.2f %9.2f\n", static_cast<long long>(w), lat,
                    std::string(to_string(s.stage)).c_str(), static_cast<unsigned long long>(s.counters.processed),
                    s.timing.fps, s.timing.p50_ms, s.timing.p95_ms, s.timing.p99_ms);
      }
      row["stages"] = std::move(stages);
      rows.push_back(std::move(row));
      if (g_stop.load()) break;
    }
  }
  ordered_json out;
  out["stage"] = base.bench.stage;
  out["duration_ms"] = base.bench.duration_ms;
  out["rows"] = std::move(rows);
  fs::create_directories(base.out_dir);
  std::ofstream(fs::path(base.out_dir) / "bench.json") << out.dump(2) << "\n";
  return kOk;
}

struct GalleryBuildArgs {
  std::string input;
  std::string output;
  std::string metric = "cosine";
  bool normalize = false;
  std::size_t mock_identities = 0;
  std::size_t samples = 5;
  std::size_t dim = kDefaultEmbeddingDim;
  double noise = 0.01;
};

int cmd_gallery_build(const Globals& g, const GalleryBuildArgs& a) {
  const DistanceMetric metric = metric_from_string(a.metric);
  std::vector<EmbeddingRecord> recs;
  if (a.mock_identities > 0) {
    const std::uint64_t seed = g.seed.value_or(0);
    for (std::size_t i = 0; i < a.mock_identities; ++i) {
      for (std::size_t s = 0; s < a.samples; ++s) {
        recs.push_back({i, "identity_" + std::to_string(i), mock_identity_embedding(i, s, a.dim, a.noise, seed), {}});
      }
    }
  } else {
    if (a.input.empty()) return fail(kConfig, "gallery build needs --input or --mock-identities");
    recs = read_embeddings(a.input);
  }
  if (recs.empty()) return fail(kConfig, "no embeddings to add");
  EmbeddingGallery gallery(metric, recs.front().embedding.dim());
  for (auto& r : recs) {
    Embedding e = r.embedding;
    if (a.normalize) e = normalized(std::move(e));
    gallery.add(r.identity_id, r.label, std::move(e));
  }
  save_gallery(gallery, a.output);
  std::cerr << "faceflow: wrote " << gallery.size() << " entries to " << a.output << "\n";
  return kOk;
}

struct GalleryQueryArgs {
  std::string gallery;
  std::string queries;
  std::size_t k = 5;
};

int cmd_gallery_query(const GalleryQueryArgs& a) {
  EmbeddingGallery gallery = load_gallery(a.gallery);
  gallery.freeze();
  const auto queries = read_embeddings(a.queries);
  if (queries.empty()) return fail(kConfig, "no queries in " + a.queries);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    Embedding q = queries[i].embedding;
    if (gallery.metric() == DistanceMetric::cosine && !q.unit_normalized) q = normalized(std::move(q));
    ordered_json j;
    j["query"] = i;
    j["hits"] = ordered_json::array();
    for (const auto& h : gallery.search(q, a.k, queries[i].self_index)) j["hits"].push_back(to_json(h));
    std::cout << j.dump() << "\n";
  }
  return kOk;
}

struct EvalArgs {
  std::string detections, gt, predictions, truths, gallery, queries, trace;
  std::vector<std::size_t> k{1, 5};
};

int cmd_eval(const EvalArgs& a) {
  ordered_json report;
  report["ap_50"] = nullptr;
  report["ap_50_95"] = nullptr;
  report["mae"] = nullptr;
  report["accuracy"] = nullptr;
  report["cmc"] = nullptr;
  report["map"] = nullptr;
  report["timing"] = nullptr;
  bool any = false;

  if (!a.detections.empty() || !a.gt.empty()) {
    if (a.detections.empty() || a.gt.empty()) return fail(kConfig, "--detections and --gt go together");
    const auto dets = read_detections(a.detections);
    const auto gt = read_ground_truth(a.gt);
    if (dets.empty() && gt.empty()) return fail(kConfig, "detection and ground-truth inputs are empty");
    const CocoAp ap = coco_style_ap(dets, gt);
    report["ap_50"] = ap.ap_50;
    report["ap_50_95"] = ap.ap_50_95;
    any = true;
  }
  if (!a.predictions.empty() || !a.truths.empty()) {
    if (a.predictions.empty() || a.truths.empty()) return fail(kConfig, "--predictions and --truths go together");
    const auto pred = read_labeled_values(a.predictions);
    const auto truth = read_labeled_values(a.truths);
    if (pred.empty() || truth.empty()) return fail(kConfig, "prediction or truth input is empty");
    std::vector<double> pa, ta;
    std::vector<std::string> pl, tl;
    for (const auto& [id, t] : truth) {
      auto it = pred.find(id);
      if (it == pred.end()) return fail(kConfig, "no prediction for id " + id);
      if (t.age && it->second.age) {
        pa.push_back(*it->second.age);
        ta.push_back(*t.age);
      }
      if (t.label && it->second.label) {
        pl.push_back(it->second.label->dump());
        tl.push_back(t.label->dump());
      }
    }
    if (!pa.empty()) report["mae"] = mae(pa, ta);
    if (!pl.empty()) report["accuracy"] = accuracy(pl, tl);
    if (pa.empty() && pl.empty()) return fail(kConfig, "no comparable age or label fields");
    any = true;
  }
  if (!a.gallery.empty() || !a.queries.empty()) {
    if (a.gallery.empty() || a.queries.empty()) return fail(kConfig, "--gallery and --queries go together");
    const EmbeddingGallery gallery = load_gallery(a.gallery);
    std::vector<Query> qs;
    for (auto& r : read_embeddings(a.queries)) {
      Embedding e = r.embedding;
      if (gallery.metric() == DistanceMetric::cosine && !e.unit_normalized) e = normalized(std::move(e));
      qs.push_back({r.identity_id, std::move(e), r.self_index});
    }
    if (qs.empty()) return fail(kConfig, "no queries in " + a.queries);
    ordered_json cmc = ordered_json::object();
    for (const auto& [k, acc] : evaluate_cmc(gallery, qs, a.k)) cmc["rank_" + std::to_string(k)] = acc;
    report["cmc"] = std::move(cmc);
    report["map"] = evaluate_retrieval_map(gallery, qs);
    any = true;
  }
  if (!a.trace.empty()) {
    const auto events = read_trace(a.trace);
    if (events.empty()) return fail(kConfig, "trace " + a.trace + " is empty");
    const TimingStats ts = timing_stats(events);
    ordered_json t;
    for (const auto& [stage, st] : ts.stages) t[stage] = to_json(st);
    t["orphan_events"] = ts.orphan_events;
    report["timing"] = std::move(t);
    any = true;
  }
  if (!any) return fail(kConfig, "eval needs at least one input pair");
  std::cout << report.dump(2) << "\n";
  return kOk;
}

struct TemplateArgs {
  std::string raw;
  std::string output;
  int width = 224;
  int height = 224;
};

int cmd_template(const TemplateArgs& a) {
  KeypointSet raw = canonical_raw_keypoints();
  if (!a.raw.empty()) raw = load_template(a.raw).points;
  const KeypointTemplate t = build_template(raw, a.width, a.height);
  if (a.output.empty()) {
    std::cout << format_template(t);
  } else {
    save_template(t, a.output);
  }
  return kOk;
}

struct SceneArgs {
  SceneSpec spec;
  std::string output;
};

int cmd_scene(const Globals& g, const SceneArgs& a) {
  const Scene s = generate_scene(a.spec, g.seed.value_or(0));
  const std::string text = to_json(s).dump() + "\n";
  if (a.output.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(a.output);
    if (!(out << text)) return fail(kConfig, "cannot write " + a.output);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Real-time multi-stage face analysis pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Run configuration file");
  auto* seed_opt = app.add_option("--seed", seed, "Seed for mock backends");
  app.add_flag("--deterministic", g.deterministic, "Single-threaded reproducible scheduling");
  app.add_option("--out", g.out, "Output directory");

  auto* run = app.add_subcommand("run", "Run the pipeline and write records, trace and report");
  auto* bench = app.add_subcommand("bench", "Throughput matrix over worker counts and latencies");

  auto* gallery = app.add_subcommand("gallery", "Build or query an embedding gallery");
  gallery->require_subcommand(1);
  GalleryBuildArgs gb;
  auto* build = gallery->add_subcommand("build", "Write an FGAL gallery");
  build->add_option("--input", gb.input, "Embeddings, one JSON object per line");
  build->add_option("--output", gb.output, "Gallery file")->required();
  build->add_option("--metric", gb.metric, "l2 or cosine")->check(CLI::IsMember({"l2", "cosine"}));
  build->add_flag("--normalize", gb.normalize, "Unit-normalize inputs before adding");
  build->add_option("--mock-identities", gb.mock_identities, "Generate mock identities instead of reading input");
  build->add_option("--samples", gb.samples, "Samples per mock identity");
  build->add_option("--dim", gb.dim, "Mock embedding dimension");
  build->add_option("--noise", gb.noise, "Mock intra-class noise");
  GalleryQueryArgs gq;
  auto* query = gallery->add_subcommand("query", "Print top-k hits per query");
  query->add_option("--gallery", gq.gallery, "Gallery file")->required();
  query->add_option("--query", gq.queries, "Query embeddings, one JSON object per line")->required();
  query->add_option("-k", gq.k, "Hits per query")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate detections, attributes, retrieval or timing");
  eval->add_option("--detections", ev.detections, "Detection results");
  eval->add_option("--gt", ev.gt, "Ground-truth boxes");
  eval->add_option("--predictions", ev.predictions, "Predicted ages/labels");
  eval->add_option("--truths", ev.truths, "True ages/labels");
  eval->add_option("--gallery", ev.gallery, "Gallery file");
  eval->add_option("--queries", ev.queries, "Query embeddings with identities");
  eval->add_option("--k", ev.k, "CMC ranks")->delimiter(',');
  eval->add_option("--trace", ev.trace, "Timing trace");

  TemplateArgs ta;
  auto* tmpl = app.add_subcommand("template", "Build a keypoint template");
  tmpl->add_option("--raw", ta.raw, "Raw keypoints in template file format");
  tmpl->add_option("--width", ta.width, "Output width")->check(CLI::PositiveNumber);
  tmpl->add_option("--height", ta.height, "Output height")->check(CLI::PositiveNumber);
  tmpl->add_option("--output", ta.output, "Template file (stdout if omitted)");

  SceneArgs sa;
  auto* scene = app.add_subcommand("scene", "Generate a synthetic scripted scene");
  scene->add_option("--faces", sa.spec.faces, "Number of faces")->check(CLI::NonNegativeNumber);
  scene->add_option("--frames", sa.spec.frames, "Number of frames")->check(CLI::PositiveNumber);
  scene->add_option("--width", sa.spec.width, "Minimum frame width");
  scene->add_option("--height", sa.spec.height, "Minimum frame height");
  scene->add_option("--face-size", sa.spec.face_size, "Face box side in pixels");
  scene->add_option("--motion", sa.spec.motion, "Maximum per-frame displacement");
  scene->add_option("--separation", sa.spec.min_separation, "Minimum distance between faces");
  scene->add_option("--output", sa.output, "Scene file (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  if (*seed_opt) g.seed = seed;

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  if (*run) return with_errors([&] { return cmd_run(g); });
  if (*bench) return with_errors([&] { return cmd_bench(g); });
  if (*build) return with_errors([&] { return cmd_gallery_build(g, gb); });
  if (*query) return with_errors([&] { return cmd_gallery_query(gq); });
  if (*eval) return with_errors([&] { return cmd_eval(ev); });
  if (*tmpl) return with_errors([&] { return cmd_template(ta); });
  if (*scene) return with_errors([&] { return cmd_scene(g, sa); });
  return kConfig;
}
