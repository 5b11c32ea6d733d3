#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "faceflow/error.hpp"
#include "faceflow/geometry.hpp"
#include "faceflow/inference.hpp"
#include "faceflow/rng.hpp"

namespace faceflow {

/// One scripted face: ground truth for every mock backend.
struct SceneFace {
  std::uint64_t identity = 0;
  Box box;
  double age = 30.0;
  double gender_p_female = 0.5;
  double smile_p = 0.0;

  friend bool operator==(const SceneFace&, const SceneFace&) = default;
};

struct SceneFrame {
  std::vector<SceneFace> faces;

  friend bool operator==(const SceneFrame&, const SceneFrame&) = default;
};

/// Scripted scene: {width, height, frames: [{faces: [{identity, box, age, gender, smile}]}]}.
/// Frame ids beyond the script wrap around.
struct Scene {
  int width = 320;
  int height = 240;
  std::vector<SceneFrame> frames;

  friend bool operator==(const Scene&, const Scene&) = default;

  const SceneFrame& frame(std::uint64_t frame_id) const {
    if (frames.empty()) throw Error(ErrorCode::InvalidArgument, "scene has no frames");
    return frames[frame_id % frames.size()];
  }
};

inline nlohmann::ordered_json to_json(const Scene& s) {
  nlohmann::ordered_json j;
  j["width"] = s.width;
  j["height"] = s.height;
  auto frames = nlohmann::ordered_json::array();
  for (const auto& f : s.frames) {
    auto faces = nlohmann::ordered_json::array();
    for (const auto& face : f.faces) {
      nlohmann::ordered_json fj;
      fj["identity"] = face.identity;
      fj["box"] = {face.box.x, face.box.y, face.box.w, face.box.h};
      fj["age"] = face.age;
      fj["gender"] = face.gender_p_female;
      fj["smile"] = face.smile_p;
      faces.push_back(std::move(fj));
    }
    frames.push_back({{"faces", std::move(faces)}});
  }
  j["frames"] = std::move(frames);
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  try {
    Scene s;
    s.width = j.value("width", 320);
    s.height = j.value("height", 240);
    if (s.width <= 0 || s.height <= 0) throw Error(ErrorCode::FormatError, "scene dimensions must be positive");
    for (const auto& fj : j.at("frames")) {
      SceneFrame f;
      for (const auto& face : fj.at("faces")) {
        SceneFace sf;
        sf.identity = face.at("identity").get<std::uint64_t>();
        const auto& b = face.at("box");
        if (!b.is_array() || b.size() != 4) throw Error(ErrorCode::FormatError, "scene box must be [x,y,w,h]");
        sf.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        if (!sf.box.positive()) throw Error(ErrorCode::FormatError, "scene box must have positive area");
        sf.age = face.value("age", 30.0);
        // gender accepts p(female) or the strings "female"/"male"
        if (face.contains("gender") && face.at("gender").is_string()) {
          sf.gender_p_female = face.at("gender").get<std::string>() == "female" ? 1.0 : 0.0;
        } else {
          sf.gender_p_female = face.value("gender", 0.5);
        }
        if (face.contains("smile") && face.at("smile").is_boolean()) {
          sf.smile_p = face.at("smile").get<bool>() ? 1.0 : 0.0;
        } else {
          sf.smile_p = face.value("smile", 0.0);
        }
        if (sf.age < 0.0 || sf.age > 100.0 || !is_probability(sf.gender_p_female) || !is_probability(sf.smile_p)) {
          throw Error(ErrorCode::FormatError, "scene attribute out of range");
        }
        f.faces.push_back(sf);
      }
      s.frames.push_back(std::move(f));
    }
    return s;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::FormatError, std::string("malformed scene: ") + ex.what());
  }
}

inline Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::FormatError, "cannot open scene file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::FormatError, "scene " + path + ": " + ex.what());
  }
  return scene_from_json(j);
}

/// Gray image with each scripted face painted as a filled rectangle.
inline ImageHandle render_frame(const Scene& scene, std::uint64_t frame_id) {
  auto img = std::make_shared<Image>();
  img->width = scene.width;
  img->height = scene.height;
  img->format = PixelFormat::gray8;
  img->bytes.assign(static_cast<std::size_t>(scene.width) * scene.height, 16);
  for (const auto& f : scene.frame(frame_id).faces) {
    const Box b = clamp_to_frame(f.box, scene.width, scene.height);
    const auto shade = static_cast<std::uint8_t>(64 + (f.identity * 37) % 180);
    const int x0 = static_cast<int>(b.x), y0 = static_cast<int>(b.y);
    const int x1 = static_cast<int>(b.x + b.w), y1 = static_cast<int>(b.y + b.h);
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) img->bytes[static_cast<std::size_t>(y) * scene.width + x] = shade;
    }
  }
  return img;
}

struct SceneSpec {
  int faces = 3;
  int frames = 100;
  int width = 640;
  int height = 480;
  double face_size = 48.0;
  /// Maximum per-frame centroid displacement.
  double motion = 2.0;
  /// Minimum centroid distance between any two faces at any time.
  double min_separation = 120.0;
};

/// Faces orbit fixed anchors on a grid. Anchor spacing is chosen so the
/// minimum separation holds at every frame and each face moves at most
/// `motion` pixels per frame.
inline Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.faces < 0 || spec.frames <= 0) throw Error(ErrorCode::InvalidArgument, "scene needs frames");
  KeyedRng rng(mix_key({seed, 0x5ce7e}));
  const double omega = 0.05;  // radians per frame
  const double radius = spec.motion / omega * 0.5;  // chord per frame ~ radius * omega <= motion / 2
  const double spacing = spec.min_separation + 2.0 * radius + spec.face_size * 0.1;

  const int cols = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.faces)))));
  Scene s;
  s.width = std::max(spec.width, static_cast<int>(spacing * (cols + 1)));
  s.height = std::max(spec.height, static_cast<int>(spacing * (cols + 1)));

  struct Actor {
    SceneFace face;
    Point2 anchor;
    double phase;
  };
  std::vector<Actor> actors;
  for (int i = 0; i < spec.faces; ++i) {
    Actor a;
    a.face.identity = static_cast<std::uint64_t>(i);
    a.face.age = std::round(rng.uniform(5.0, 85.0));
    a.face.gender_p_female = rng.uniform() < 0.5 ? 0.9 : 0.1;
    a.face.smile_p = rng.uniform();
    a.anchor = {spacing * (i % cols + 1), spacing * (i / cols + 1)};
    a.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    actors.push_back(a);
  }
  for (int t = 0; t < spec.frames; ++t) {
    SceneFrame f;
    for (const auto& a : actors) {
      SceneFace face = a.face;
      const double ang = a.phase + omega * t;
      const Point2 c{a.anchor.x + radius * std::cos(ang), a.anchor.y + radius * std::sin(ang)};
      face.box = {c.x - spec.face_size / 2, c.y - spec.face_size / 2, spec.face_size, spec.face_size};
      f.faces.push_back(face);
    }
    s.frames.push_back(std::move(f));
  }
  return s;
}

}  // namespace faceflow
