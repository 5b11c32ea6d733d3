#pragma once

#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "faceflow/engine.hpp"
#include "faceflow/error.hpp"
#include "faceflow/external_backend.hpp"
#include "faceflow/frame_store.hpp"
#include "faceflow/keypoint_template.hpp"
#include "faceflow/mock_backend.hpp"
#include "faceflow/scene.hpp"
#include "faceflow/simindex.hpp"

namespace faceflow {

// --- document model ---------------------------------------------------------
//
// Grammar (one construct per line, '#' starts a comment outside strings):
//
//   [table]              table header; dotted names allowed: [stage.detect]
//   key = value          bare key of [A-Za-z0-9_-]
//
//   value  := string | integer | float | bool | array
//   string := "..." with escapes \" \\ \n \t
//   bool   := true | false
//   array  := [ value, value, ... ]   (single line, trailing comma allowed)
//
// Keys before the first header belong to the root table "".

struct ConfigValue {
  using Array = std::vector<ConfigValue>;
  std::variant<bool, std::int64_t, double, std::string, Array> v;

  friend bool operator==(const ConfigValue&, const ConfigValue&) = default;
};

using ConfigTable = std::map<std::string, ConfigValue>;
using ConfigDocument = std::map<std::string, ConfigTable>;

namespace detail {

class ConfigLexer {
 public:
  ConfigLexer(std::string_view line, int lineno) : s_(line), lineno_(lineno) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorCode::ConfigError, "config line " + std::to_string(lineno_) + ": " + what);
  }

  void skip_ws() {
    while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t' || s_[i_] == '\r')) ++i_;
  }

  bool at_end() {
    skip_ws();
    return i_ >= s_.size() || s_[i_] == '#';
  }

  bool accept(char c) {
    skip_ws();
    if (i_ < s_.size() && s_[i_] == c) {
      ++i_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) fail(std::string("expected '") + c + "'");
  }

  std::string key() {
    skip_ws();
    const std::size_t start = i_;
    while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_' || s_[i_] == '-')) ++i_;
    if (i_ == start) fail("expected a key");
    return std::string(s_.substr(start, i_ - start));
  }

  std::string table_name() {
    std::string name = key();
    while (accept('.')) name += "." + key();
    return name;
  }

  ConfigValue value() {
    skip_ws();
    if (i_ >= s_.size()) fail("missing value");
    const char c = s_[i_];
    if (c == '"') return {string()};
    if (c == '[') {
      ++i_;
      ConfigValue::Array arr;
      for (;;) {
        if (accept(']')) break;
        arr.push_back(value());
        if (accept(',')) continue;
        expect(']');
        break;
      }
      return {std::move(arr)};
    }
    const std::size_t start = i_;
    while (i_ < s_.size() && !std::isspace(static_cast<unsigned char>(s_[i_])) && s_[i_] != ',' && s_[i_] != ']' &&
           s_[i_] != '#') {
      ++i_;
    }
    const std::string tok(s_.substr(start, i_ - start));
    if (tok == "true") return {true};
    if (tok == "false") return {false};
    std::int64_t n = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), n);
    if (ec == std::errc() && p == tok.data() + tok.size()) return {n};
    double d = 0.0;
    auto [pd, ecd] = std::from_chars(tok.data(), tok.data() + tok.size(), d);
    if (ecd == std::errc() && pd == tok.data() + tok.size() && std::isfinite(d)) return {d};
    fail("cannot parse value '" + tok + "'");
  }

 private:
  std::string string() {
    ++i_;
    std::string out;
    while (i_ < s_.size() && s_[i_] != '"') {
      char c = s_[i_++];
      if (c == '\\') {
        if (i_ >= s_.size()) fail("unterminated escape");
        const char e = s_[i_++];
        switch (e) {
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          default: fail(std::string("unknown escape \\") + e);
        }
      }
      out += c;
    }
    if (i_ >= s_.size()) fail("unterminated string");
    ++i_;
    return out;
  }

  std::string_view s_;
  std::size_t i_ = 0;
  int lineno_;
};

inline std::string format_double(double d) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d);
  std::string s(buf, p);
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

inline std::string format_value(const ConfigValue& v) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, bool>) {
          return x ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
          return std::to_string(x);
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(x);
        } else if constexpr (std::is_same_v<T, std::string>) {
          std::string out = "\"";
          for (char c : x) {
            switch (c) {
              case '"': out += "\\\""; break;
              case '\\': out += "\\\\"; break;
              case '\n': out += "\\n"; break;
              case '\t': out += "\\t"; break;
              default: out += c;
            }
          }
          return out + "\"";
        } else {
          std::string out = "[";
          for (std::size_t i = 0; i < x.size(); ++i) out += (i ? ", " : "") + format_value(x[i]);
          return out + "]";
        }
      },
      v.v);
}

}  // namespace detail

inline ConfigDocument parse_config_document(std::string_view text) {
  ConfigDocument doc;
  std::string table;
  doc[table];
  int lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    detail::ConfigLexer lx(line, lineno);
    if (lx.at_end()) continue;
    if (lx.accept('[')) {
      table = lx.table_name();
      lx.expect(']');
      if (!lx.at_end()) lx.fail("trailing characters after table header");
      if (doc.contains(table) && !doc[table].empty()) lx.fail("table [" + table + "] defined twice");
      doc[table];
      continue;
    }
    const std::string key = lx.key();
    lx.expect('=');
    ConfigValue v = lx.value();
    if (!lx.at_end()) lx.fail("trailing characters after value");
    if (!doc[table].emplace(key, std::move(v)).second) lx.fail("duplicate key '" + key + "'");
  }
  if (doc[""].empty()) doc.erase("");
  return doc;
}

inline std::string format_config_document(const ConfigDocument& doc) {
  std::ostringstream out;
  bool first = true;
  for (const auto& [name, table] : doc) {
    if (!name.empty()) {
      if (!first) out << "\n";
      out << "[" << name << "]\n";
    }
    for (const auto& [k, v] : table) out << k << " = " << detail::format_value(v) << "\n";
    first = false;
  }
  return out.str();
}

// --- run configuration ------------------------------------------------------

enum class BackendKind { none, mock, external };

inline std::string to_string(BackendKind k) {
  switch (k) {
    case BackendKind::none: return "none";
    case BackendKind::mock: return "mock";
    case BackendKind::external: return "external";
  }
  return "none";
}

/// One backend slot. For split attribute estimation the three single-task
/// commands are used instead of `command`.
struct BackendSpec {
  BackendKind kind = BackendKind::mock;
  std::string command;
  bool split = false;
  std::string age_command;
  std::string gender_command;
  std::string smile_command;
  double latency_ms = 0.0;
  double jitter = 0.0;
  double age_noise = 0.0;
  double prob_noise = 0.0;
  double intra_noise = 0.01;
  std::int64_t embedding_dim = static_cast<std::int64_t>(kDefaultEmbeddingDim);

  friend bool operator==(const BackendSpec&, const BackendSpec&) = default;
};

inline BackendSpec disabled_backend() {
  BackendSpec b;
  b.kind = BackendKind::none;
  return b;
}

struct StageSpec {
  bool enabled = true;
  std::int64_t workers = 1;
  std::int64_t priority = 0;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct BenchSpec {
  std::string stage = "detect";
  std::vector<std::int64_t> workers{1};
  std::vector<double> latency_ms{10.0};
  double duration_ms = 2000.0;
  /// Keep the source interval instead of free-running.
  bool paced = false;

  friend bool operator==(const BenchSpec&, const BenchSpec&) = default;
};

struct RunConfig {
  // [source]
  std::string source_kind = "scene";  // scene | directory
  std::string scene_path;
  std::string directory;
  std::int64_t frames = 0;  // 0: scene length, or unbounded when duration_ms > 0
  double interval_ms = 33.0;
  double duration_ms = 0.0;
  // [store]
  std::int64_t capacity = 32;
  double lease_timeout_ms = 5000.0;
  // [tracker]
  TrackerConfig tracker;
  // [stage.*]
  StageSpec detect{true, 1, 2};
  StageSpec attributes{true, 1, 1};
  StageSpec similarity{true, 1, 0};
  // [backend.*]
  BackendSpec detector;
  BackendSpec keypoints = disabled_backend();
  BackendSpec attribute_backend;
  BackendSpec embedder;
  // [geometry]
  std::string template_path;
  // [gallery]
  std::string gallery_path;
  // [output]
  std::string out_dir = "out";
  bool write_trace = true;
  // [run]
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  // [bench]
  BenchSpec bench;

  /// Directory relative paths are resolved against. Not serialized.
  std::string base_dir;

  bool operator==(const RunConfig& o) const {
    return source_kind == o.source_kind && scene_path == o.scene_path && directory == o.directory &&
           frames == o.frames && interval_ms == o.interval_ms && duration_ms == o.duration_ms &&
           capacity == o.capacity && lease_timeout_ms == o.lease_timeout_ms && tracker == o.tracker &&
           detect == o.detect && attributes == o.attributes && similarity == o.similarity &&
           detector == o.detector && keypoints == o.keypoints && attribute_backend == o.attribute_backend &&
           embedder == o.embedder && template_path == o.template_path && gallery_path == o.gallery_path &&
           out_dir == o.out_dir && write_trace == o.write_trace && seed == o.seed &&
           deterministic == o.deterministic && bench == o.bench;
  }

  std::string resolve(const std::string& path) const {
    if (path.empty() || base_dir.empty() || std::filesystem::path(path).is_absolute()) return path;
    return (std::filesystem::path(base_dir) / path).string();
  }

  const StageSpec& stage(Stage s) const {
    switch (s) {
      case Stage::detect: return detect;
      case Stage::attributes: return attributes;
      case Stage::similarity: return similarity;
    }
    return detect;
  }
  StageSpec& stage(Stage s) { return const_cast<StageSpec&>(std::as_const(*this).stage(s)); }

  /// The backend whose latency a benchmark row varies for `s`.
  BackendSpec& backend_for(Stage s) {
    switch (s) {
      case Stage::detect: return detector;
      case Stage::attributes: return attribute_backend;
      case Stage::similarity: return embedder;
    }
    return detector;
  }
};

namespace detail {

class TableReader {
 public:
  TableReader(const ConfigDocument& doc, const std::string& name) : name_(name) {
    if (auto it = doc.find(name); it != doc.end()) table_ = &it->second;
  }

  ~TableReader() noexcept(false) {
    if (!table_ || std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : *table_) {
      if (!used_.contains(k)) throw Error(ErrorCode::ConfigError, "unknown key '" + k + "' in [" + name_ + "]");
    }
  }

  void get(const char* key, std::string& out) { read(key, out, "a string"); }
  void get(const char* key, bool& out) { read(key, out, "a boolean"); }
  void get(const char* key, std::int64_t& out) { read(key, out, "an integer"); }

  void get(const char* key, double& out) {
    const ConfigValue* v = find(key);
    if (!v) return;
    if (auto* i = std::get_if<std::int64_t>(&v->v)) {
      out = static_cast<double>(*i);
    } else if (auto* d = std::get_if<double>(&v->v)) {
      out = *d;
    } else {
      bad(key, "a number");
    }
  }

  void get(const char* key, int& out) {
    std::int64_t v = out;
    get(key, v);
    out = static_cast<int>(v);
  }

  void get(const char* key, std::size_t& out) {
    std::int64_t v = static_cast<std::int64_t>(out);
    get(key, v);
    if (v < 0) bad(key, "a non-negative integer");
    out = static_cast<std::size_t>(v);
  }

  void get(const char* key, std::optional<std::uint64_t>& out) {
    const ConfigValue* v = find(key);
    if (!v) return;
    auto* i = std::get_if<std::int64_t>(&v->v);
    if (!i || *i < 0) bad(key, "a non-negative integer");
    out = static_cast<std::uint64_t>(*i);
  }

  void get(const char* key, std::vector<std::int64_t>& out) {
    const ConfigValue* v = find(key);
    if (!v) return;
    auto* arr = std::get_if<ConfigValue::Array>(&v->v);
    if (!arr) bad(key, "an array of integers");
    out.clear();
    for (const auto& e : *arr) {
      auto* i = std::get_if<std::int64_t>(&e.v);
      if (!i) bad(key, "an array of integers");
      out.push_back(*i);
    }
  }

  void get(const char* key, std::vector<double>& out) {
    const ConfigValue* v = find(key);
    if (!v) return;
    auto* arr = std::get_if<ConfigValue::Array>(&v->v);
    if (!arr) bad(key, "an array of numbers");
    out.clear();
    for (const auto& e : *arr) {
      if (auto* i = std::get_if<std::int64_t>(&e.v)) {
        out.push_back(static_cast<double>(*i));
      } else if (auto* d = std::get_if<double>(&e.v)) {
        out.push_back(*d);
      } else {
        bad(key, "an array of numbers");
      }
    }
  }

 private:
  const ConfigValue* find(const char* key) {
    if (!table_) return nullptr;
    auto it = table_->find(key);
    if (it == table_->end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }

  template <typename T>
  void read(const char* key, T& out, const char* what) {
    const ConfigValue* v = find(key);
    if (!v) return;
    auto* x = std::get_if<T>(&v->v);
    if (!x) bad(key, what);
    out = *x;
  }

  [[noreturn]] void bad(const char* key, const char* what) const {
    throw Error(ErrorCode::ConfigError, "[" + name_ + "] " + key + " must be " + what);
  }

  std::string name_;
  const ConfigTable* table_ = nullptr;
  std::set<std::string> used_;
};

inline void read_backend(const ConfigDocument& doc, const std::string& name, BackendSpec& b) {
  TableReader t(doc, name);
  std::string kind = to_string(b.kind);
  t.get("kind", kind);
  if (kind == "none") {
    b.kind = BackendKind::none;
  } else if (kind == "mock") {
    b.kind = BackendKind::mock;
  } else if (kind == "external") {
    b.kind = BackendKind::external;
  } else {
    throw Error(ErrorCode::ConfigError, "[" + name + "] kind must be none, mock or external");
  }
  t.get("command", b.command);
  t.get("split", b.split);
  t.get("age_command", b.age_command);
  t.get("gender_command", b.gender_command);
  t.get("smile_command", b.smile_command);
  t.get("latency_ms", b.latency_ms);
  t.get("jitter", b.jitter);
  t.get("age_noise", b.age_noise);
  t.get("prob_noise", b.prob_noise);
  t.get("intra_noise", b.intra_noise);
  t.get("embedding_dim", b.embedding_dim);
}

inline void read_stage(const ConfigDocument& doc, const std::string& name, StageSpec& s) {
  TableReader t(doc, name);
  t.get("enabled", s.enabled);
  t.get("workers", s.workers);
  t.get("priority", s.priority);
}

inline ConfigTable backend_table(const BackendSpec& b) {
  ConfigTable t;
  t["kind"] = {to_string(b.kind)};
  t["command"] = {b.command};
  t["split"] = {b.split};
  t["age_command"] = {b.age_command};
  t["gender_command"] = {b.gender_command};
  t["smile_command"] = {b.smile_command};
  t["latency_ms"] = {b.latency_ms};
  t["jitter"] = {b.jitter};
  t["age_noise"] = {b.age_noise};
  t["prob_noise"] = {b.prob_noise};
  t["intra_noise"] = {b.intra_noise};
  t["embedding_dim"] = {b.embedding_dim};
  return t;
}

inline ConfigTable stage_table(const StageSpec& s) {
  return {{"enabled", {s.enabled}}, {"workers", {s.workers}}, {"priority", {s.priority}}};
}

}  // namespace detail

inline RunConfig run_config_from_document(const ConfigDocument& doc) {
  static const std::set<std::string> known{"source",          "store",           "tracker",
                                           "stage.detect",    "stage.attributes", "stage.similarity",
                                           "backend.detect",  "backend.keypoints", "backend.attributes",
                                           "backend.embed",   "geometry",        "gallery",
                                           "output",          "run",             "bench"};
  for (const auto& [name, table] : doc) {
    if (!known.contains(name)) throw Error(ErrorCode::ConfigError, "unknown table [" + name + "]");
  }
  RunConfig c;
  {
    detail::TableReader t(doc, "source");
    t.get("kind", c.source_kind);
    t.get("scene", c.scene_path);
    t.get("directory", c.directory);
    t.get("frames", c.frames);
    t.get("interval_ms", c.interval_ms);
    t.get("duration_ms", c.duration_ms);
  }
  {
    detail::TableReader t(doc, "store");
    t.get("capacity", c.capacity);
    t.get("lease_timeout_ms", c.lease_timeout_ms);
  }
  {
    detail::TableReader t(doc, "tracker");
    t.get("window", c.tracker.window);
    t.get("gating", c.tracker.gating_factor);
    t.get("expiry", c.tracker.expiry);
  }
  detail::read_stage(doc, "stage.detect", c.detect);
  detail::read_stage(doc, "stage.attributes", c.attributes);
  detail::read_stage(doc, "stage.similarity", c.similarity);
  detail::read_backend(doc, "backend.detect", c.detector);
  detail::read_backend(doc, "backend.keypoints", c.keypoints);
  detail::read_backend(doc, "backend.attributes", c.attribute_backend);
  detail::read_backend(doc, "backend.embed", c.embedder);
  {
    detail::TableReader t(doc, "geometry");
    t.get("template", c.template_path);
  }
  {
    detail::TableReader t(doc, "gallery");
    t.get("path", c.gallery_path);
  }
  {
    detail::TableReader t(doc, "output");
    t.get("dir", c.out_dir);
    t.get("trace", c.write_trace);
  }
  {
    detail::TableReader t(doc, "run");
    t.get("seed", c.seed);
    t.get("deterministic", c.deterministic);
  }
  {
    detail::TableReader t(doc, "bench");
    t.get("stage", c.bench.stage);
    t.get("workers", c.bench.workers);
    t.get("latency_ms", c.bench.latency_ms);
    t.get("duration_ms", c.bench.duration_ms);
    t.get("paced", c.bench.paced);
  }
  return c;
}

inline ConfigDocument to_document(const RunConfig& c) {
  ConfigDocument d;
  d["source"] = {{"kind", {c.source_kind}},         {"scene", {c.scene_path}},
                 {"directory", {c.directory}},      {"frames", {c.frames}},
                 {"interval_ms", {c.interval_ms}},  {"duration_ms", {c.duration_ms}}};
  d["store"] = {{"capacity", {c.capacity}}, {"lease_timeout_ms", {c.lease_timeout_ms}}};
  d["tracker"] = {{"window", {static_cast<std::int64_t>(c.tracker.window)}},
                  {"gating", {c.tracker.gating_factor}},
                  {"expiry", {static_cast<std::int64_t>(c.tracker.expiry)}}};
  d["stage.detect"] = detail::stage_table(c.detect);
  d["stage.attributes"] = detail::stage_table(c.attributes);
  d["stage.similarity"] = detail::stage_table(c.similarity);
  d["backend.detect"] = detail::backend_table(c.detector);
  d["backend.keypoints"] = detail::backend_table(c.keypoints);
  d["backend.attributes"] = detail::backend_table(c.attribute_backend);
  d["backend.embed"] = detail::backend_table(c.embedder);
  d["geometry"] = {{"template", {c.template_path}}};
  d["gallery"] = {{"path", {c.gallery_path}}};
  d["output"] = {{"dir", {c.out_dir}}, {"trace", {c.write_trace}}};
  d["run"] = {{"deterministic", {c.deterministic}}};
  if (c.seed) d["run"]["seed"] = {static_cast<std::int64_t>(*c.seed)};
  ConfigValue::Array workers, latencies;
  for (auto w : c.bench.workers) workers.push_back({w});
  for (auto l : c.bench.latency_ms) latencies.push_back({l});
  d["bench"] = {{"stage", {c.bench.stage}},
                {"workers", {std::move(workers)}},
                {"latency_ms", {std::move(latencies)}},
                {"duration_ms", {c.bench.duration_ms}},
                {"paced", {c.bench.paced}}};
  return d;
}

inline RunConfig parse_run_config(std::string_view text) { return run_config_from_document(parse_config_document(text)); }

inline std::string format_run_config(const RunConfig& c) { return format_config_document(to_document(c)); }

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = parse_run_config(ss.str());
  c.base_dir = std::filesystem::path(path).parent_path().string();
  return c;
}

inline bool uses_mock(const RunConfig& c) {
  auto mock = [](const BackendSpec& b) { return b.kind == BackendKind::mock; };
  return (c.detect.enabled && (mock(c.detector) || mock(c.keypoints))) ||
         (c.attributes.enabled && mock(c.attribute_backend)) || (c.similarity.enabled && mock(c.embedder));
}

/// Semantic checks: referenced files exist, stage table is usable, seed is
/// present when any mock runs. Throws ConfigError naming the offending item.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigError, m); };
  auto must_exist = [&](const std::string& what, const std::string& path) {
    if (path.empty()) fail(what + " path is empty");
    std::error_code ec;
    if (!std::filesystem::exists(c.resolve(path), ec)) fail(what + " not found: " + c.resolve(path));
  };
  if (c.source_kind == "scene") {
    must_exist("scene file", c.scene_path);
  } else if (c.source_kind == "directory") {
    must_exist("image directory", c.directory);
  } else {
    fail("[source] kind must be scene or directory");
  }
  if (c.frames < 0) fail("[source] frames must be >= 0");
  if (c.interval_ms < 0 || c.duration_ms < 0) fail("[source] interval_ms and duration_ms must be >= 0");
  if (c.capacity < 1) fail("[store] capacity must be >= 1");
  if (!(c.lease_timeout_ms > 0)) fail("[store] lease_timeout_ms must be positive");
  if (c.tracker.window < 1 || c.tracker.expiry < 0 || !(c.tracker.gating_factor > 0)) fail("[tracker] invalid parameters");
  if (!c.detect.enabled) fail("[stage.detect] must be enabled");
  for (Stage s : kAllStages) {
    const auto& st = c.stage(s);
    if (st.enabled && st.workers < 1) fail("[stage." + std::string(to_string(s)) + "] workers must be >= 1");
  }
  auto check_backend = [&](const std::string& table, const BackendSpec& b, bool required) {
    if (b.kind == BackendKind::none) {
      if (required) fail("[" + table + "] kind must be mock or external");
      return;
    }
    if (b.latency_ms < 0) fail("[" + table + "] latency_ms must be >= 0");
    if (b.embedding_dim < 1) fail("[" + table + "] embedding_dim must be >= 1");
    if (b.kind == BackendKind::external) {
      if (b.split) {
        if (b.age_command.empty() || b.gender_command.empty() || b.smile_command.empty()) {
          fail("[" + table + "] split mode needs age_command, gender_command and smile_command");
        }
      } else if (b.command.empty()) {
        fail("[" + table + "] command is empty");
      }
    }
  };
  check_backend("backend.detect", c.detector, true);
  check_backend("backend.keypoints", c.keypoints, false);
  if (c.attributes.enabled) check_backend("backend.attributes", c.attribute_backend, true);
  if (c.similarity.enabled) check_backend("backend.embed", c.embedder, true);
  if (!c.template_path.empty()) must_exist("template file", c.template_path);
  if (!c.gallery_path.empty()) must_exist("gallery file", c.gallery_path);
  if (uses_mock(c)) {
    if (!c.seed) fail("[run] seed is required when a mock backend is used");
    if (c.source_kind != "scene") fail("mock backends need a scripted scene source");
  }
  if (c.deterministic && c.interval_ms == 0 && c.frames == 0 && c.source_kind == "scene" && c.duration_ms > 0) {
    fail("deterministic free-run needs a finite frame count");
  }
}

// --- wiring -----------------------------------------------------------------

inline MockParams mock_params(const BackendSpec& b, std::uint64_t seed, bool deterministic) {
  MockParams p;
  p.latency = std::chrono::nanoseconds(static_cast<std::int64_t>(std::llround(b.latency_ms * 1e6)));
  p.jitter = b.jitter;
  p.age_noise = b.age_noise;
  p.prob_noise = b.prob_noise;
  p.intra_noise = b.intra_noise;
  p.embedding_dim = static_cast<std::size_t>(b.embedding_dim);
  p.seed = seed;
  p.sleep = !deterministic;
  return p;
}

inline std::vector<StageDescriptor> stage_descriptors(const RunConfig& c) {
  std::vector<StageDescriptor> out;
  for (Stage s : kAllStages) {
    const auto& st = c.stage(s);
    if (!st.enabled) continue;
    out.push_back({s, static_cast<int>(st.priority), default_prerequisites(s), static_cast<int>(st.workers)});
  }
  return out;
}

inline EngineOptions engine_options(const RunConfig& c) {
  EngineOptions o;
  o.capacity = static_cast<std::size_t>(c.capacity);
  o.stages = stage_descriptors(c);
  o.tracker = c.tracker;
  auto ns = [](double ms) { return std::chrono::nanoseconds(static_cast<std::int64_t>(std::llround(ms * 1e6))); };
  o.frame_interval = ns(c.interval_ms);
  o.lease_timeout = ns(c.lease_timeout_ms);
  o.max_duration = ns(c.duration_ms);
  o.deterministic = c.deterministic;
  return o;
}

/// Backends per worker as configured. External backends get one child
/// process per worker.
inline BackendFactory make_backend_factory(const RunConfig& c, std::shared_ptr<const Scene> scene,
                                           KeypointTemplate tmpl) {
  const std::uint64_t seed = c.seed.value_or(0);
  const auto timeout = std::chrono::milliseconds(static_cast<std::int64_t>(std::llround(c.lease_timeout_ms)));
  return [c, scene, tmpl, seed, timeout](Stage stage, int) {
    WorkerBackends b;
    auto params = [&](const BackendSpec& s) { return mock_params(s, seed, c.deterministic); };
    switch (stage) {
      case Stage::detect:
        if (c.detector.kind == BackendKind::mock) {
          b.detector = std::make_unique<MockDetector>(scene, params(c.detector));
        } else {
          b.detector = std::make_unique<ExternalDetector>(c.detector.command, timeout);
        }
        if (c.keypoints.kind == BackendKind::mock) {
          b.keypoints = std::make_unique<MockKeypointLocator>(scene, params(c.keypoints), tmpl);
        } else if (c.keypoints.kind == BackendKind::external) {
          b.keypoints = std::make_unique<ExternalKeypointLocator>(c.keypoints.command, timeout);
        }
        break;
      case Stage::attributes: {
        const auto& s = c.attribute_backend;
        if (s.kind == BackendKind::mock) {
          if (s.split) {
            b.attributes = std::make_unique<SplitAttributeEstimator>(std::make_unique<MockAgeEstimator>(scene, params(s)),
                                                                     std::make_unique<MockGenderEstimator>(scene, params(s)),
                                                                     std::make_unique<MockSmileEstimator>(scene, params(s)));
          } else {
            b.attributes = std::make_unique<MockMultitask>(scene, params(s));
          }
        } else if (s.split) {
          b.attributes = std::make_unique<SplitAttributeEstimator>(
              std::make_unique<ExternalAgeEstimator>(s.age_command, timeout),
              std::make_unique<ExternalGenderEstimator>(s.gender_command, timeout),
              std::make_unique<ExternalSmileEstimator>(s.smile_command, timeout));
        } else {
          b.attributes = std::make_unique<ExternalAttributeEstimator>(s.command, timeout);
        }
        break;
      }
      case Stage::similarity:
        if (c.embedder.kind == BackendKind::mock) {
          b.embedder = std::make_unique<MockEmbedder>(scene, params(c.embedder));
        } else {
          b.embedder = std::make_unique<ExternalEmbedder>(c.embedder.command, timeout);
        }
        break;
    }
    return b;
  };
}

}  // namespace faceflow
