#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "faceflow/error.hpp"
#include "faceflow/metrics.hpp"
#include "faceflow/simindex.hpp"
#include "faceflow/trace.hpp"

namespace faceflow {

// Newline-delimited JSON readers for the evaluation and gallery tools. Blank
// lines are ignored; any malformed line is a FormatError naming file and line.

inline void for_each_json_line(const std::string& path, const std::function<void(const nlohmann::json&)>& fn) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::FormatError, "cannot open " + path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::FormatError, path + ":" + std::to_string(n) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::FormatError, path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw Error(ErrorCode::FormatError, "box must be [x,y,w,h]");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.positive()) throw Error(ErrorCode::FormatError, "box must have positive area");
  return b;
}

/// {image_id, boxes: [[x,y,w,h], ...]} per line.
inline GroundTruthSet read_ground_truth(const std::string& path) {
  GroundTruthSet gt;
  for_each_json_line(path, [&](const nlohmann::json& j) {
    auto& boxes = gt[j.at("image_id").get<std::string>()];
    for (const auto& b : j.at("boxes")) boxes.push_back(box_from_json(b));
  });
  return gt;
}

/// {image_id, detections: [{box, score}, ...]} per line.
inline std::vector<ImageDetections> read_detections(const std::string& path) {
  std::vector<ImageDetections> out;
  for_each_json_line(path, [&](const nlohmann::json& j) {
    ImageDetections d;
    d.image_id = j.at("image_id").get<std::string>();
    for (const auto& e : j.at("detections")) {
      const double s = e.at("score").get<double>();
      if (!is_probability(s)) throw Error(ErrorCode::FormatError, "score outside [0,1]");
      d.detections.push_back({box_from_json(e.at("box")), s});
    }
    out.push_back(std::move(d));
  });
  return out;
}

/// {id, age?, label?} per line, keyed by id.
struct LabeledValue {
  std::optional<double> age;
  std::optional<nlohmann::json> label;
};

inline std::map<std::string, LabeledValue> read_labeled_values(const std::string& path) {
  std::map<std::string, LabeledValue> out;
  for_each_json_line(path, [&](const nlohmann::json& j) {
    const auto& idj = j.at("id");
    const std::string id = idj.is_string() ? idj.get<std::string>() : idj.dump();
    LabeledValue v;
    if (j.contains("age") && !j.at("age").is_null()) v.age = j.at("age").get<double>();
    if (j.contains("label") && !j.at("label").is_null()) v.label = j.at("label");
    if (!out.emplace(id, std::move(v)).second) throw Error(ErrorCode::FormatError, "duplicate id " + id);
  });
  return out;
}

/// {identity, label?, embedding: [...], normalized?} per line.
struct EmbeddingRecord {
  std::uint64_t identity_id = 0;
  std::string label;
  Embedding embedding;
  std::optional<std::size_t> self_index;
};

inline std::vector<EmbeddingRecord> read_embeddings(const std::string& path) {
  std::vector<EmbeddingRecord> out;
  for_each_json_line(path, [&](const nlohmann::json& j) {
    EmbeddingRecord r;
    if (j.contains("identity")) r.identity_id = j.at("identity").get<std::uint64_t>();
    r.label = j.value("label", std::string{});
    r.embedding.values = j.at("embedding").get<std::vector<float>>();
    r.embedding.unit_normalized = j.value("normalized", false);
    if (j.contains("self_index") && !j.at("self_index").is_null()) r.self_index = j.at("self_index").get<std::size_t>();
    out.push_back(std::move(r));
  });
  return out;
}

inline nlohmann::ordered_json to_json(const EmbeddingRecord& r) {
  nlohmann::ordered_json j;
  j["identity"] = r.identity_id;
  j["label"] = r.label;
  j["embedding"] = r.embedding.values;
  j["normalized"] = r.embedding.unit_normalized;
  return j;
}

inline std::vector<TraceEvent> read_trace(const std::string& path) {
  std::vector<TraceEvent> out;
  for_each_json_line(path, [&](const nlohmann::json& j) { out.push_back(trace_event_from_json(j)); });
  return out;
}

inline nlohmann::ordered_json to_json(const SearchHit& h) {
  nlohmann::ordered_json j;
  j["identity_id"] = h.identity_id;
  j["label"] = h.label;
  j["distance"] = h.distance;
  j["gallery_index"] = h.gallery_index;
  return j;
}

}  // namespace faceflow
