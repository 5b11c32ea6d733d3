#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "faceflow/error.hpp"
#include "faceflow/inference.hpp"

namespace faceflow {

enum class DistanceMetric : std::uint8_t { l2 = 0, cosine = 1 };

inline std::string to_string(DistanceMetric m) { return m == DistanceMetric::l2 ? "l2" : "cosine"; }

inline DistanceMetric metric_from_string(const std::string& s) {
  if (s == "l2" || s == "L2") return DistanceMetric::l2;
  if (s == "cosine") return DistanceMetric::cosine;
  throw Error(ErrorCode::InvalidArgument, "unknown metric '" + s + "' (expected l2 or cosine)");
}

struct GalleryEntry {
  std::uint64_t identity_id = 0;
  std::string label;
  Embedding embedding;

  friend bool operator==(const GalleryEntry&, const GalleryEntry&) = default;
};

struct SearchHit {
  std::uint64_t identity_id = 0;
  std::string label;
  double distance = 0.0;
  std::size_t gallery_index = 0;

  friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

/// Distance used for ranking. L2 is the Euclidean norm of the difference;
/// cosine distance is 1 - <a, b> (inputs are unit vectors), clamped at 0.
inline double embedding_distance(DistanceMetric metric, std::span<const float> a, std::span<const float> b) {
  if (metric == DistanceMetric::l2) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - b[i];
      s += d * d;
    }
    return std::sqrt(s);
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += static_cast<double>(a[i]) * b[i];
  return std::max(0.0, 1.0 - dot);
}

/// Flat exact-search gallery. Single writer while building; once frozen it is
/// immutable and search() may be called concurrently.
class EmbeddingGallery {
 public:
  EmbeddingGallery(DistanceMetric metric, std::size_t dim) : metric_(metric), dim_(dim) {
    if (dim == 0) throw Error(ErrorCode::InvalidArgument, "gallery dimension must be positive");
  }

  DistanceMetric metric() const { return metric_; }
  std::size_t dimension() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<GalleryEntry>& entries() const { return entries_; }
  const GalleryEntry& operator[](std::size_t i) const { return entries_.at(i); }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  std::size_t add(std::uint64_t identity_id, std::string label, Embedding embedding) {
    if (frozen_) throw Error(ErrorCode::InvalidArgument, "gallery is frozen");
    if (embedding.dim() != dim_) {
      throw Error(ErrorCode::DimensionMismatch,
                  "embedding dimension " + std::to_string(embedding.dim()) + " != gallery " + std::to_string(dim_));
    }
    for (float v : embedding.values) {
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "non-finite embedding value");
    }
    if (metric_ == DistanceMetric::cosine) {
      if (std::abs(l2_norm(embedding) - 1.0) > 1e-6) {
        throw Error(ErrorCode::NotNormalized, "cosine gallery requires unit-norm embeddings");
      }
      embedding.unit_normalized = true;
    }
    entries_.push_back({identity_id, std::move(label), std::move(embedding)});
    return entries_.size() - 1;
  }

  /// Exact top-k by ascending distance, ties broken by lower gallery index.
  /// `exclude` removes one gallery index from consideration.
  std::vector<SearchHit> search(const Embedding& query, std::size_t k,
                                std::optional<std::size_t> exclude = std::nullopt) const {
    if (entries_.empty()) throw Error(ErrorCode::EmptyGallery, "search on an empty gallery");
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be at least 1");
    if (query.dim() != dim_) throw Error(ErrorCode::DimensionMismatch, "query dimension differs from gallery");

    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (exclude && *exclude == i) continue;
      scored.emplace_back(embedding_distance(metric_, query.values, entries_[i].embedding.values), i);
    }
    const std::size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end());
    std::vector<SearchHit> hits;
    hits.reserve(take);
    for (std::size_t r = 0; r < take; ++r) {
      const auto& e = entries_[scored[r].second];
      hits.push_back({e.identity_id, e.label, scored[r].first, scored[r].second});
    }
    return hits;
  }

 private:
  DistanceMetric metric_;
  std::size_t dim_;
  std::vector<GalleryEntry> entries_;
  bool frozen_ = false;
};

// --- evaluation -------------------------------------------------------------

struct Query {
  std::uint64_t identity_id = 0;
  Embedding embedding;
  /// Gallery index of the query's own sample, excluded from its ranking.
  std::optional<std::size_t> self_index;
};

namespace detail {

inline std::vector<SearchHit> full_ranking(const EmbeddingGallery& g, const Query& q) {
  auto hits = g.search(q.embedding, g.size(), q.self_index);
  bool relevant = false;
  for (const auto& h : hits) relevant = relevant || h.identity_id == q.identity_id;
  if (!relevant) {
    throw Error(ErrorCode::UnknownIdentity,
                "query identity " + std::to_string(q.identity_id) + " has no gallery sample to retrieve");
  }
  return hits;
}

}  // namespace detail

/// CMC rank-k accuracy for each requested k: the fraction of queries whose
/// top-k gallery items include a sample of the query's identity.
inline std::map<std::size_t, double> evaluate_cmc(const EmbeddingGallery& gallery, std::span<const Query> queries,
                                                  std::span<const std::size_t> k_values) {
  if (queries.empty()) throw Error(ErrorCode::InvalidArgument, "CMC needs at least one query");
  std::map<std::size_t, std::size_t> hits;
  for (std::size_t k : k_values) {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "rank k must be at least 1");
    hits[k] = 0;
  }
  for (const auto& q : queries) {
    const auto ranking = detail::full_ranking(gallery, q);
    std::size_t first = 0;
    while (ranking[first].identity_id != q.identity_id) ++first;
    for (auto& [k, n] : hits) n += (first < k) ? 1 : 0;
  }
  std::map<std::size_t, double> out;
  for (const auto& [k, n] : hits) out[k] = static_cast<double>(n) / static_cast<double>(queries.size());
  return out;
}

/// Mean over queries of the average precision of the ranked gallery list.
inline double evaluate_retrieval_map(const EmbeddingGallery& gallery, std::span<const Query> queries) {
  if (queries.empty()) throw Error(ErrorCode::InvalidArgument, "mAP needs at least one query");
  double total = 0.0;
  for (const auto& q : queries) {
    const auto ranking = detail::full_ranking(gallery, q);
    std::size_t relevant = 0;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < ranking.size(); ++r) {
      if (ranking[r].identity_id != q.identity_id) continue;
      ++relevant;
      precision_sum += static_cast<double>(relevant) / static_cast<double>(r + 1);
    }
    total += precision_sum / static_cast<double>(relevant);
  }
  return total / static_cast<double>(queries.size());
}

// --- FGAL persistence ----------------------------------------------------------
//
// Little-endian: "FGAL", u32 version (1), u8 metric, u32 D, u64 count, then per
// entry: u64 identity_id, u16 label length, label bytes, D float32 values.

inline constexpr std::uint32_t kGalleryVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw Error(ErrorCode::FormatError, "gallery file truncated");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

}  // namespace detail

inline void write_gallery(const EmbeddingGallery& g, std::ostream& out) {
  out.write("FGAL", 4);
  detail::write_le<std::uint32_t>(out, kGalleryVersion);
  detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(g.metric()));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.dimension()));
  detail::write_le<std::uint64_t>(out, g.size());
  for (const auto& e : g.entries()) {
    if (e.label.size() > 0xffff) throw Error(ErrorCode::FormatError, "gallery label longer than 65535 bytes");
    detail::write_le<std::uint64_t>(out, e.identity_id);
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.label.size()));
    out.write(e.label.data(), static_cast<std::streamsize>(e.label.size()));
    for (float v : e.embedding.values) detail::write_le<float>(out, v);
  }
  if (!out) throw Error(ErrorCode::FormatError, "failed writing gallery");
}

inline EmbeddingGallery read_gallery(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "FGAL", 4) != 0) {
    throw Error(ErrorCode::FormatError, "bad gallery magic (expected FGAL)");
  }
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != kGalleryVersion) throw Error(ErrorCode::FormatError, "unsupported gallery version " + std::to_string(version));
  const auto metric_tag = detail::read_le<std::uint8_t>(in);
  if (metric_tag > 1) throw Error(ErrorCode::FormatError, "unknown gallery metric tag");
  const auto dim = detail::read_le<std::uint32_t>(in);
  if (dim == 0) throw Error(ErrorCode::FormatError, "gallery dimension is zero");
  const auto count = detail::read_le<std::uint64_t>(in);

  EmbeddingGallery g(static_cast<DistanceMetric>(metric_tag), dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id = detail::read_le<std::uint64_t>(in);
    const auto len = detail::read_le<std::uint16_t>(in);
    std::string label(len, '\0');
    if (len > 0 && !in.read(label.data(), len)) throw Error(ErrorCode::FormatError, "gallery file truncated");
    Embedding e;
    e.values.resize(dim);
    for (auto& v : e.values) v = detail::read_le<float>(in);
    try {
      g.add(id, std::move(label), std::move(e));
    } catch (const Error& err) {
      throw Error(ErrorCode::FormatError, "gallery entry " + std::to_string(i) + ": " + err.what());
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorCode::FormatError, "trailing bytes after gallery");
  g.freeze();
  return g;
}

inline void save_gallery(const EmbeddingGallery& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::FormatError, "cannot write gallery " + path);
  write_gallery(g, out);
}

inline EmbeddingGallery load_gallery(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::FormatError, "cannot open gallery " + path);
  return read_gallery(in);
}

}  // namespace faceflow
