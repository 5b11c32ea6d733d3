#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

#include "faceflow/detail/base64.hpp"
#include "faceflow/error.hpp"
#include "faceflow/inference.hpp"

namespace faceflow {

// Newline-delimited JSON over the child's stdin/stdout.
//
//   engine  -> {"hello": {"role": R, "version": 1}}
//   backend -> {"ready": {"embedding_dim": D}}         (embedding_dim optional)
//   engine  -> {"id": n, "input": {...}}
//   backend -> {"id": n, "output": {...}} | {"id": n, "error": "..."}
//
// One request in flight per handle.

inline constexpr int kProtocolVersion = 1;

enum class BackendRole { detect, keypoints, multitask, age, gender, smile, embed };

inline std::string_view to_string(BackendRole r) {
  switch (r) {
    case BackendRole::detect: return "detect";
    case BackendRole::keypoints: return "keypoints";
    case BackendRole::multitask: return "multitask";
    case BackendRole::age: return "age";
    case BackendRole::gender: return "gender";
    case BackendRole::smile: return "smile";
    case BackendRole::embed: return "embed";
  }
  return "detect";
}

namespace protocol {

using json = nlohmann::ordered_json;

inline std::string hello(BackendRole role) {
  json j;
  j["hello"] = {{"role", to_string(role)}, {"version", kProtocolVersion}};
  return j.dump();
}

inline json image_input(std::uint64_t frame_id, const Image& img) {
  json j;
  j["frame_id"] = frame_id;
  j["image"] = {{"width", img.width},
                {"height", img.height},
                {"format", to_string(img.format)},
                {"data", detail::base64_encode(img.bytes)}};
  return j;
}

inline json crop_input(const FaceCrop& crop) {
  static const Image empty{};
  json j = image_input(crop.frame_id, crop.image ? *crop.image : empty);
  j["box"] = {crop.box.x, crop.box.y, crop.box.w, crop.box.h};
  if (crop.transform) {
    j["transform"] = {{"scale", crop.transform->scale},
                      {"theta", crop.transform->theta},
                      {"tx", crop.transform->tx},
                      {"ty", crop.transform->ty}};
  } else {
    j["transform"] = nullptr;
  }
  return j;
}

inline std::string request(std::uint64_t id, const json& input) {
  json j;
  j["id"] = id;
  j["input"] = input;
  return j.dump();
}

inline Box parse_box(const nlohmann::json& b) {
  if (!b.is_array() || b.size() != 4) throw Error(ErrorCode::ProtocolViolation, "box must be [x,y,w,h]");
  return {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
}

inline DetectorOutput parse_detections(const nlohmann::json& out) {
  DetectorOutput d;
  for (const auto& e : out.at("boxes")) d.boxes.push_back({parse_box(e.at("box")), e.at("score").get<double>()});
  return validated(std::move(d));
}

inline KeypointSet parse_keypoints(const nlohmann::json& out) {
  KeypointSet k;
  for (const auto& p : out.at("points")) {
    if (!p.is_array() || p.size() != 2) throw Error(ErrorCode::ProtocolViolation, "keypoint must be [x,y]");
    k.points.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return validated(std::move(k));
}

inline AgeDistribution parse_age(const nlohmann::json& out) {
  AgeDistribution d;
  d.probs = out.at("age").get<std::vector<double>>();
  validate(d);
  return d;
}

inline double parse_probability(const nlohmann::json& out, const char* key) {
  const double p = out.at(key).get<double>();
  if (!is_probability(p)) throw Error(ErrorCode::ProtocolViolation, std::string(key) + " outside [0,1]");
  return p;
}

inline MultitaskOutput parse_multitask(const nlohmann::json& out) {
  MultitaskOutput m{parse_age(out), parse_probability(out, "gender_p_female"), parse_probability(out, "smile_p")};
  validate(m);
  return m;
}

inline Embedding parse_embedding(const nlohmann::json& out, std::optional<std::size_t> dim) {
  Embedding e;
  e.values = out.at("embedding").get<std::vector<float>>();
  e.unit_normalized = out.value("normalized", false);
  validate(e, dim);
  return e;
}

}  // namespace protocol

/// A child process speaking the backend protocol. Respawns lazily after a
/// failed request; each instance serves one worker.
class ExternalProcess {
 public:
  ExternalProcess(std::string command, BackendRole role, std::chrono::milliseconds timeout)
      : command_(std::move(command)), role_(role), timeout_(timeout) {
    start();
  }

  ~ExternalProcess() { stop(); }

  ExternalProcess(const ExternalProcess&) = delete;
  ExternalProcess& operator=(const ExternalProcess&) = delete;

  BackendRole role() const { return role_; }
  std::optional<std::size_t> embedding_dim() const { return embedding_dim_; }
  pid_t pid() const { return pid_; }

  /// Send one request and return its "output" object. Any failure leaves the
  /// handle ready to respawn on the next call.
  nlohmann::json call(const protocol::json& input) {
    if (pid_ <= 0) start();
    const std::uint64_t id = next_id_++;
    try {
      write_line(protocol::request(id, input));
      const auto reply = read_json_line("response");
      if (!reply.is_object() || !reply.contains("id") || reply.at("id") != id) {
        throw Error(ErrorCode::ProtocolViolation, "response id does not match request " + std::to_string(id));
      }
      if (reply.contains("error")) {
        throw Error(ErrorCode::ProtocolViolation, "backend reported: " + reply.at("error").dump());
      }
      if (!reply.contains("output") || !reply.at("output").is_object()) {
        throw Error(ErrorCode::ProtocolViolation, "response lacks an output object");
      }
      return reply.at("output");
    } catch (...) {
      stop();
      throw;
    }
  }

 private:
  void start() {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0) {
      throw Error(ErrorCode::SpawnFailure, std::string("socketpair: ") + std::strerror(errno));
    }
    const pid_t pid = ::fork();
    if (pid < 0) {
      ::close(fds[0]);
      ::close(fds[1]);
      throw Error(ErrorCode::SpawnFailure, std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
      ::setpgid(0, 0);
      ::dup2(fds[1], STDIN_FILENO);
      ::dup2(fds[1], STDOUT_FILENO);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(fds[1]);
    fd_ = fds[0];
    pid_ = pid;
    buffer_.clear();
    try {
      write_line(protocol::hello(role_));
      const auto ready = read_json_line("handshake");
      if (!ready.is_object() || !ready.contains("ready") || !ready.at("ready").is_object()) {
        throw Error(ErrorCode::ProtocolViolation, "handshake reply lacks a ready object");
      }
      const auto& r = ready.at("ready");
      if (r.contains("embedding_dim") && !r.at("embedding_dim").is_null()) {
        embedding_dim_ = r.at("embedding_dim").get<std::size_t>();
      }
    } catch (const Error& e) {
      stop();
      if (e.code() == ErrorCode::ProtocolViolation) throw;
      throw Error(ErrorCode::SpawnFailure, "backend '" + command_ + "' failed to start: " + e.what());
    } catch (const nlohmann::json::exception& e) {
      stop();
      throw Error(ErrorCode::ProtocolViolation, std::string("bad handshake: ") + e.what());
    }
  }

  void stop() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
    if (pid_ > 0) {
      // Give a well-behaved child a moment to exit on EOF, then kill it.
      for (int i = 0; i < 20; ++i) {
        int status = 0;
        if (::waitpid(pid_, &status, WNOHANG) == pid_) {
          ::kill(-pid_, SIGKILL);
          pid_ = -1;
          return;
        }
        ::usleep(1000);
      }
      // The shell may have forked the backend; take down the whole group.
      ::kill(-pid_, SIGKILL);
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
      pid_ = -1;
    }
  }

  void write_line(const std::string& line) {
    std::string data = line + "\n";
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorCode::Timeout, std::string("backend not accepting input: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  // A child that dies or stalls yields no answer within the lease; both
  // surface as Timeout.
  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
      if (auto pos = buffer_.find('\n'); pos != std::string::npos) {
        std::string line = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw Error(ErrorCode::Timeout, "backend did not answer within " +
                                                               std::to_string(timeout_.count()) + " ms");
      pollfd p{fd_, POLLIN, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(left.count()));
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorCode::Timeout, std::string("poll: ") + std::strerror(errno));
      }
      if (rc == 0) continue;
      char chunk[65536];
      const ssize_t n = ::read(fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw Error(ErrorCode::Timeout, std::string("read: ") + std::strerror(errno));
      }
      if (n == 0) throw Error(ErrorCode::Timeout, "backend exited before answering");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  nlohmann::json read_json_line(const char* what) {
    const std::string line = read_line();
    try {
      return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::ProtocolViolation, std::string("malformed ") + what + " line: " + line.substr(0, 200));
    }
  }

  std::string command_;
  BackendRole role_;
  std::chrono::milliseconds timeout_;
  int fd_ = -1;
  pid_t pid_ = -1;
  std::string buffer_;
  std::uint64_t next_id_ = 0;
  std::optional<std::size_t> embedding_dim_;
};

namespace detail {

// Wrap parse errors from the JSON library as protocol violations.
template <typename F>
auto parse_output(F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ProtocolViolation, std::string("malformed output: ") + e.what());
  }
}

}  // namespace detail

class ExternalDetector : public Detector {
 public:
  ExternalDetector(const std::string& command, std::chrono::milliseconds timeout)
      : proc_(command, BackendRole::detect, timeout) {}

  DetectorOutput detect(std::uint64_t frame_id, const Image& image) override {
    auto out = proc_.call(protocol::image_input(frame_id, image));
    return detail::parse_output([&] { return protocol::parse_detections(out); });
  }

 private:
  ExternalProcess proc_;
};

class ExternalKeypointLocator : public KeypointLocator {
 public:
  ExternalKeypointLocator(const std::string& command, std::chrono::milliseconds timeout)
      : proc_(command, BackendRole::keypoints, timeout) {}

  KeypointSet locate(const FaceCrop& crop) override {
    auto out = proc_.call(protocol::crop_input(crop));
    return detail::parse_output([&] { return protocol::parse_keypoints(out); });
  }

 private:
  ExternalProcess proc_;
};

class ExternalAttributeEstimator : public AttributeEstimator {
 public:
  ExternalAttributeEstimator(const std::string& command, std::chrono::milliseconds timeout)
      : proc_(command, BackendRole::multitask, timeout) {}

  MultitaskOutput estimate(const FaceCrop& crop) override {
    auto out = proc_.call(protocol::crop_input(crop));
    return detail::parse_output([&] { return protocol::parse_multitask(out); });
  }

 private:
  ExternalProcess proc_;
};

class ExternalAgeEstimator : public AgeEstimator {
 public:
  ExternalAgeEstimator(const std::string& command, std::chrono::milliseconds timeout)
      : proc_(command, BackendRole::age, timeout) {}

  AgeDistribution estimate_age(const FaceCrop& crop) override {
    auto out = proc_.call(protocol::crop_input(crop));
    return detail::parse_output([&] { return protocol::parse_age(out); });
  }

 private:
  ExternalProcess proc_;
};

class ExternalGenderEstimator : public GenderEstimator {
 public:
  ExternalGenderEstimator(const std::string& command, std::chrono::milliseconds timeout)
      : proc_(command, BackendRole::gender, timeout) {}

  double estimate_gender(const FaceCrop& crop) override {
    auto out = proc_.call(protocol::crop_input(crop));
    return detail::parse_output([&] { return protocol::parse_probability(out, "gender_p_female"); });
  }

 private:
  ExternalProcess proc_;
};

class ExternalSmileEstimator : public SmileEstimator {
 public:
  ExternalSmileEstimator(const std::string& command, std::chrono::milliseconds timeout)
      : proc_(command, BackendRole::smile, timeout) {}

  double estimate_smile(const FaceCrop& crop) override {
    auto out = proc_.call(protocol::crop_input(crop));
    return detail::parse_output([&] { return protocol::parse_probability(out, "smile_p"); });
  }

 private:
  ExternalProcess proc_;
};

class ExternalEmbedder : public Embedder {
 public:
  ExternalEmbedder(const std::string& command, std::chrono::milliseconds timeout)
      : proc_(command, BackendRole::embed, timeout) {}

  Embedding embed(const FaceCrop& crop) override {
    auto out = proc_.call(protocol::crop_input(crop));
    auto e = detail::parse_output([&] { return protocol::parse_embedding(out, proc_.embedding_dim()); });
    if (!dim_) dim_ = e.dim();
    return e;
  }

  std::size_t dimension() const override { return proc_.embedding_dim().value_or(dim_.value_or(0)); }

 private:
  ExternalProcess proc_;
  std::optional<std::size_t> dim_;
};

}  // namespace faceflow
