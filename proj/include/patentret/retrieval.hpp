#pragma once

// Embedding index: exhaustive cosine top-k search, k-reciprocal re-ranking
// and the PEMB interchange file.
//
//   "PEMB" | u32 version | u32 R | u32 d | R*d f32 row-major | R JSON lines
//
// with one {"patent_id", "image_path"} object per row in the trailer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patentret/augment.hpp"
#include "patentret/checkpoint.hpp"
#include "patentret/dataset.hpp"
#include "patentret/image.hpp"
#include "patentret/model.hpp"

namespace patentret {

class RetrievalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-normalized embeddings with the label and image reference of each row.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;

  /// Normalizes every row of `vectors` (R x dim, row-major). A zero row is an
  /// error.
  EmbeddingStore(std::vector<float> vectors, std::size_t dim, std::vector<std::string> labels,
                 std::vector<std::string> refs, std::string fingerprint = {})
      : dim_(dim), vectors_(std::move(vectors)), labels_(std::move(labels)), refs_(std::move(refs)),
        fingerprint_(std::move(fingerprint)) {
    if (dim_ == 0) throw RetrievalError("embedding dimension must be positive");
    if (vectors_.size() % dim_ != 0) throw RetrievalError("vector data is not a whole number of rows");
    const std::size_t r = vectors_.size() / dim_;
    if (labels_.size() != r || refs_.size() != r)
      throw RetrievalError("rows, labels and refs must align (" + std::to_string(r) + " rows, " +
                           std::to_string(labels_.size()) + " labels, " + std::to_string(refs_.size()) + " refs)");
    for (std::size_t i = 0; i < r; ++i) {
      auto row = std::span<float>(vectors_).subspan(i * dim_, dim_);
      double ss = 0;
      for (float v : row) ss += static_cast<double>(v) * v;
      if (!(ss > 0) || !std::isfinite(ss))
        throw RetrievalError("row " + std::to_string(i) + " (" + refs_[i] + ") has zero or non-finite norm");
      const double inv = 1.0 / std::sqrt(ss);
      for (float& v : row) v = static_cast<float>(v * inv);
    }
  }

  /// Rows already unit-norm (as read back from a file) are kept bit-exact;
  /// a row off by more than 1e-5 is rejected.
  static EmbeddingStore from_unit_rows(std::vector<float> vectors, std::size_t dim, std::vector<std::string> labels,
                                       std::vector<std::string> refs) {
    EmbeddingStore s(vectors, dim, std::move(labels), std::move(refs));
    for (std::size_t i = 0; i < s.size(); ++i) {
      double ss = 0;
      for (std::size_t j = 0; j < dim; ++j) ss += static_cast<double>(vectors[i * dim + j]) * vectors[i * dim + j];
      if (std::abs(std::sqrt(ss) - 1.0) > 1e-5)
        throw RetrievalError("row " + std::to_string(i) + " is not unit-norm (norm " + std::to_string(std::sqrt(ss)) + ")");
    }
    s.vectors_ = std::move(vectors);
    return s;
  }

  std::size_t size() const { return labels_.size(); }
  std::size_t dim() const { return dim_; }
  std::span<const float> row(std::size_t i) const { return std::span<const float>(vectors_).subspan(i * dim_, dim_); }
  const std::vector<float>& vectors() const { return vectors_; }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::string>& refs() const { return refs_; }
  const std::string& fingerprint() const { return fingerprint_; }

  /// Row index of an image reference, or -1.
  long find_ref(const std::string& ref) const {
    auto it = std::find(refs_.begin(), refs_.end(), ref);
    return it == refs_.end() ? -1 : static_cast<long>(it - refs_.begin());
  }

 private:
  std::size_t dim_ = 0;
  std::vector<float> vectors_;
  std::vector<std::string> labels_;
  std::vector<std::string> refs_;
  std::string fingerprint_;
};

struct Hit {
  std::size_t row = 0;
  std::string patent_id;
  std::string ref;
  double score = 0;  // cosine similarity
};

struct RetrievalResult {
  std::string query_ref;
  std::vector<Hit> hits;
  bool reranked = false;
};

/// Inner product accumulated in double, in index order.
inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

inline std::vector<float> normalized(std::span<const float> v) {
  double ss = 0;
  for (float x : v) ss += static_cast<double>(x) * x;
  if (!(ss > 0) || !std::isfinite(ss)) throw RetrievalError("query vector has zero or non-finite norm");
  const double inv = 1.0 / std::sqrt(ss);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

/// Row order by descending score, ties to the lower index.
inline std::vector<std::size_t> order_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

/// Row order by ascending distance, ties to the lower index.
inline std::vector<std::size_t> order_by_distance(std::span<const double> dist) {
  std::vector<std::size_t> idx(dist.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return idx;
}

inline std::vector<double> cosine_scores(const EmbeddingStore& store, std::span<const float> query) {
  if (query.size() != store.dim())
    throw RetrievalError("query has dimension " + std::to_string(query.size()) + ", store has " +
                         std::to_string(store.dim()));
  const auto q = normalized(query);
  std::vector<double> scores(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) scores[i] = dot(q, store.row(i));
  return scores;
}

/// Exhaustive top-k by cosine similarity.
inline RetrievalResult search(const EmbeddingStore& store, std::span<const float> query, std::size_t k) {
  if (k < 1 || k > store.size())
    throw RetrievalError("k must lie in [1, " + std::to_string(store.size()) + "], got " + std::to_string(k));
  const auto scores = cosine_scores(store, query);
  const auto order = order_by_score(scores);
  RetrievalResult r;
  for (std::size_t i = 0; i < k; ++i) {
    const auto row = order[i];
    r.hits.push_back({row, store.labels()[row], store.refs()[row], scores[row]});
  }
  return r;
}

// ---------------------------------------------------------------------------
// k-reciprocal re-ranking

struct RerankParams {
  std::size_t k1 = 20;
  std::size_t k2 = 6;
  double lambda = 0.3;

  void validate() const {
    if (!(k2 >= 1 && k1 > k2)) throw RetrievalError("re-ranking needs k1 > k2 >= 1");
    if (!(lambda >= 0 && lambda <= 1)) throw RetrievalError("re-ranking lambda must lie in [0, 1]");
  }
};

/// Dense row-major matrix of doubles.
struct DistMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  DistMatrix() = default;
  DistMatrix(std::size_t r, std::size_t c, double fill = 0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return std::span<const double>(data).subspan(i * cols, cols); }
};

namespace detail {

/// k-reciprocal encoding over an all x all squared-distance matrix whose first
/// `num_query` rows are the probes. Returns the num_query x all final
/// distance.
inline DistMatrix k_reciprocal(const DistMatrix& raw, std::size_t num_query, const RerankParams& p) {
  const std::size_t n = raw.rows;
  // Each column scaled by its maximum, then transposed.
  std::vector<double> colmax(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) colmax[j] = std::max(colmax[j], raw(i, j));
  DistMatrix dist(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) dist(j, i) = colmax[j] > 0 ? raw(i, j) / colmax[j] : 0.0;

  std::vector<std::vector<std::size_t>> rank(n);
  for (std::size_t i = 0; i < n; ++i) rank[i] = order_by_distance(dist.row(i));

  auto reciprocal = [&](std::size_t i, std::size_t k) {
    std::vector<std::size_t> out;
    const std::size_t w = std::min(n, k + 1);
    for (std::size_t a = 0; a < w; ++a) {
      const auto cand = rank[i][a];
      const auto& back = rank[cand];
      if (std::find(back.begin(), back.begin() + static_cast<long>(w), i) != back.begin() + static_cast<long>(w))
        out.push_back(cand);
    }
    return out;
  };

  // Half-k1 rounds half to even.
  const auto half = static_cast<std::size_t>(std::nearbyint(static_cast<double>(p.k1) / 2.0));
  DistMatrix v(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto kr = reciprocal(i, p.k1);
    std::vector<std::size_t> sorted_kr = kr;
    std::sort(sorted_kr.begin(), sorted_kr.end());
    std::vector<std::size_t> expansion = kr;
    for (auto cand : kr) {
      auto ckr = reciprocal(cand, half);
      std::vector<std::size_t> sorted_ckr = ckr;
      std::sort(sorted_ckr.begin(), sorted_ckr.end());
      sorted_ckr.erase(std::unique(sorted_ckr.begin(), sorted_ckr.end()), sorted_ckr.end());
      std::vector<std::size_t> common;
      std::set_intersection(sorted_ckr.begin(), sorted_ckr.end(), sorted_kr.begin(), sorted_kr.end(),
                            std::back_inserter(common));
      if (static_cast<double>(common.size()) > 2.0 / 3.0 * static_cast<double>(ckr.size()))
        expansion.insert(expansion.end(), ckr.begin(), ckr.end());
    }
    std::sort(expansion.begin(), expansion.end());
    expansion.erase(std::unique(expansion.begin(), expansion.end()), expansion.end());
    double total = 0;
    for (auto j : expansion) total += std::exp(-dist(i, j));
    for (auto j : expansion) v(i, j) = std::exp(-dist(i, j)) / total;
  }

  if (p.k2 != 1) {
    DistMatrix qe(n, n);
    const std::size_t k2 = std::min(n, p.k2);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < k2; ++a) {
        const auto src = rank[i][a];
        for (std::size_t j = 0; j < n; ++j) qe(i, j) += v(src, j);
      }
      for (std::size_t j = 0; j < n; ++j) qe(i, j) /= static_cast<double>(k2);
    }
    v = std::move(qe);
  }

  std::vector<std::vector<std::size_t>> inverted(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (v(i, j) != 0) inverted[j].push_back(i);

  DistMatrix out(num_query, n);
  std::vector<double> tmin(n);
  for (std::size_t i = 0; i < num_query; ++i) {
    std::fill(tmin.begin(), tmin.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (v(i, j) == 0) continue;
      for (auto other : inverted[j]) tmin[other] += std::min(v(i, j), v(other, j));
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double jaccard = 1 - tmin[j] / (2 - tmin[j]);
      out(i, j) = (1 - p.lambda) * jaccard + p.lambda * dist(i, j);
    }
  }
  return out;
}

inline double squared_distance_from_cosine(double c) { return std::max(0.0, 2.0 - 2.0 * c); }

}  // namespace detail

/// Re-ranked distances from every query (Q x d, any nonzero rows) to every
/// store row. Queries are appended in front of the gallery before encoding.
inline DistMatrix k_reciprocal_rerank(const EmbeddingStore& gallery, const std::vector<std::vector<float>>& queries,
                                      const RerankParams& p) {
  p.validate();
  if (p.k1 >= gallery.size())
    throw RetrievalError("k1 = " + std::to_string(p.k1) + " must be smaller than the gallery size " +
                         std::to_string(gallery.size()));
  const std::size_t q = queries.size(), g = gallery.size(), n = q + g;
  std::vector<std::vector<float>> rows;
  rows.reserve(n);
  for (const auto& v : queries) {
    if (v.size() != gallery.dim()) throw RetrievalError("query dimension does not match the gallery");
    rows.push_back(normalized(v));
  }
  for (std::size_t i = 0; i < g; ++i) rows.emplace_back(gallery.row(i).begin(), gallery.row(i).end());
  DistMatrix raw(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j)
      raw(i, j) = raw(j, i) = i == j ? 0.0 : detail::squared_distance_from_cosine(dot(rows[i], rows[j]));
  const auto full = detail::k_reciprocal(raw, q, p);
  DistMatrix out(q, g);
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < g; ++j) out(i, j) = full(i, q + j);
  return out;
}

/// Cosine similarity of every pair of store rows.
inline DistMatrix similarity_matrix(const EmbeddingStore& store) {
  const std::size_t r = store.size();
  DistMatrix s(r, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i; j < r; ++j) s(i, j) = s(j, i) = dot(store.row(i), store.row(j));
  return s;
}

/// Re-ranked R x R distances with the store serving as both probe and
/// gallery set (the leave-one-out setting).
inline DistMatrix k_reciprocal_rerank_self(const EmbeddingStore& store, const RerankParams& p) {
  p.validate();
  if (p.k1 >= store.size())
    throw RetrievalError("k1 = " + std::to_string(p.k1) + " must be smaller than the gallery size " +
                         std::to_string(store.size()));
  const auto sim = similarity_matrix(store);
  DistMatrix raw(store.size(), store.size());
  for (std::size_t i = 0; i < raw.rows; ++i)
    for (std::size_t j = 0; j < raw.cols; ++j)
      raw(i, j) = i == j ? 0.0 : detail::squared_distance_from_cosine(sim(i, j));
  return detail::k_reciprocal(raw, store.size(), p);
}

/// Top-k by re-ranked distance for one query vector. Hit scores stay cosine.
inline RetrievalResult search_reranked(const EmbeddingStore& store, std::span<const float> query, std::size_t k,
                                       const RerankParams& p) {
  if (k < 1 || k > store.size())
    throw RetrievalError("k must lie in [1, " + std::to_string(store.size()) + "], got " + std::to_string(k));
  const auto scores = cosine_scores(store, query);
  const auto dist = k_reciprocal_rerank(store, {std::vector<float>(query.begin(), query.end())}, p);
  const auto order = order_by_distance(dist.row(0));
  RetrievalResult r;
  r.reranked = true;
  for (std::size_t i = 0; i < k; ++i) {
    const auto row = order[i];
    r.hits.push_back({row, store.labels()[row], store.refs()[row], scores[row]});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Embedding extraction

/// Eval-mode retrieval features of already-loaded images, batched.
inline std::vector<float> embed_images(const std::vector<DrawingImage>& images, const ModelParams<float>& params,
                                       std::size_t batch_size = 64) {
  if (batch_size == 0) throw RetrievalError("batch_size must be positive");
  const std::size_t s = params.config.backbone.input_size, d = params.config.embed_dim;
  std::vector<float> out;
  out.reserve(images.size() * d);
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, images.size() - start);
    Tensor<float> batch(Shape{n, 1, s, s});
    for (std::size_t b = 0; b < n; ++b) {
      const auto x = to_tensor<float>(center_crop_or_pad(images[start + b], s));
      std::copy(x.data.begin(), x.data.end(), batch.data.begin() + static_cast<long>(b * s * s));
    }
    const auto feats = extract_features(batch, params);
    out.insert(out.end(), feats.data.begin(), feats.data.end());
  }
  return out;
}

/// Embeds every image of `split` in manifest order.
inline EmbeddingStore embed_dataset(const ModelParams<float>& params, const DatasetManifest& manifest, Split split,
                                    std::size_t batch_size = 64, std::string fingerprint = {}) {
  const auto entries = manifest.of_split(split);
  if (entries.empty()) throw RetrievalError("split '" + to_string(split) + "' is empty");
  std::vector<DrawingImage> images;
  std::vector<std::string> labels, refs;
  for (const auto& e : entries) {
    try {
      images.push_back(load_image(manifest.resolve(e)));
    } catch (const std::exception& ex) {
      throw RetrievalError(std::string("cannot embed ") + manifest.resolve(e).string() + ": " + ex.what());
    }
    labels.push_back(e.patent_id);
    refs.push_back(e.image_path);
  }
  return EmbeddingStore(embed_images(images, params, batch_size), params.config.embed_dim, std::move(labels),
                        std::move(refs), std::move(fingerprint));
}

// ---------------------------------------------------------------------------
// PEMB files

inline constexpr std::uint32_t kPembVersion = 1;

inline std::string serialize_pemb(const EmbeddingStore& store) {
  std::string out = "PEMB";
  io::put_u32(out, kPembVersion);
  io::put_u32(out, static_cast<std::uint32_t>(store.size()));
  io::put_u32(out, static_cast<std::uint32_t>(store.dim()));
  for (float f : store.vectors()) io::put_f32(out, f);
  for (std::size_t i = 0; i < store.size(); ++i) {
    nlohmann::json line = {{"patent_id", store.labels()[i]}, {"image_path", store.refs()[i]}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

inline void save_pemb(const EmbeddingStore& store, const std::filesystem::path& path) {
  io::write_all(path, serialize_pemb(store));
}

inline EmbeddingStore parse_pemb(const std::string& bytes, const std::string& what = "embeddings") {
  try {
    io::Reader r(bytes, what);
    if (r.str(4) != "PEMB") throw RetrievalError(what + ": bad magic (not a PEMB file)");
    const auto version = r.u32();
    if (version != kPembVersion) throw RetrievalError(what + ": unsupported version " + std::to_string(version));
    const std::size_t rows = r.u32(), dim = r.u32();
    if (rows == 0 || dim == 0) throw RetrievalError(what + ": empty embedding matrix");
    r.need(rows * dim * 4);
    std::vector<float> data(rows * dim);
    for (auto& f : data) f = r.f32();
    std::istringstream trailer(r.str(r.remaining()));
    std::vector<std::string> labels, refs;
    std::string line;
    while (std::getline(trailer, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      labels.push_back(j.at("patent_id").get<std::string>());
      refs.push_back(j.at("image_path").get<std::string>());
    }
    if (labels.size() != rows)
      throw RetrievalError(what + ": trailer has " + std::to_string(labels.size()) + " rows, header says " +
                           std::to_string(rows));
    return EmbeddingStore::from_unit_rows(std::move(data), dim, std::move(labels), std::move(refs));
  } catch (const CheckpointError& e) {
    throw RetrievalError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw RetrievalError(what + ": malformed trailer: " + e.what());
  }
}

inline EmbeddingStore load_pemb(const std::filesystem::path& path) {
  try {
    return parse_pemb(io::read_all(path), path.string());
  } catch (const CheckpointError& e) {
    throw RetrievalError(e.what());
  }
}

}  // namespace patentret
