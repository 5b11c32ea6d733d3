#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

#include "faceflow/error.hpp"

namespace faceflow {

enum class TraceKind { grab, stage_start, stage_done, skip, drop, evict, fail };

inline std::string_view to_string(TraceKind k) {
  switch (k) {
    case TraceKind::grab: return "grab";
    case TraceKind::stage_start: return "stage_start";
    case TraceKind::stage_done: return "stage_done";
    case TraceKind::skip: return "skip";
    case TraceKind::drop: return "drop";
    case TraceKind::evict: return "evict";
    case TraceKind::fail: return "fail";
  }
  return "grab";
}

inline TraceKind trace_kind_from_string(std::string_view s) {
  for (auto k : {TraceKind::grab, TraceKind::stage_start, TraceKind::stage_done, TraceKind::skip, TraceKind::drop,
                 TraceKind::evict, TraceKind::fail}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::FormatError, "unknown trace event '" + std::string(s) + "'");
}

struct TraceEvent {
  TraceKind kind = TraceKind::grab;
  std::uint64_t frame_id = 0;
  std::optional<std::string> stage;
  std::int64_t t_ns = 0;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

/// {event, frame_id, stage, t_ns}; stage is null for frame-level events.
inline nlohmann::ordered_json to_json(const TraceEvent& e) {
  nlohmann::ordered_json j;
  j["event"] = to_string(e.kind);
  j["frame_id"] = e.frame_id;
  j["stage"] = e.stage ? nlohmann::ordered_json(*e.stage) : nlohmann::ordered_json(nullptr);
  j["t_ns"] = e.t_ns;
  return j;
}

inline TraceEvent trace_event_from_json(const nlohmann::json& j) {
  try {
    TraceEvent e;
    e.kind = trace_kind_from_string(j.at("event").get<std::string>());
    e.frame_id = j.at("frame_id").get<std::uint64_t>();
    if (j.contains("stage") && !j.at("stage").is_null()) e.stage = j.at("stage").get<std::string>();
    e.t_ns = j.at("t_ns").get<std::int64_t>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::FormatError, std::string("malformed trace event: ") + ex.what());
  }
}

}  // namespace faceflow
