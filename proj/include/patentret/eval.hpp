#pragma once

// mAP and Rank-N under the leave-one-out protocol: each row queries all other
// rows, and rows sharing its patent_id are relevant.

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patentret/retrieval.hpp"

namespace patentret {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mean of precision at each relevant rank, over `num_relevant` items.
/// Relevant items missing from `ranked_flags` contribute zero.
inline double average_precision(const std::vector<bool>& ranked_flags, std::size_t num_relevant) {
  if (num_relevant == 0) throw EvalError("average precision needs at least one relevant item");
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < ranked_flags.size(); ++r) {
    if (!ranked_flags[r]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits > num_relevant) throw EvalError("more relevant flags than num_relevant");
  return sum / static_cast<double>(num_relevant);
}

inline const std::vector<std::size_t>& default_rank_cutoffs() {
  static const std::vector<std::size_t> cutoffs{1, 5, 20};
  return cutoffs;
}

struct MetricsReport {
  double mAP = 0;
  std::map<std::size_t, double> rank_accuracy;
  std::size_t num_queries = 0;
  std::string protocol = "leave-one-out";
  bool reranked = false;

  double rank(std::size_t n) const { return rank_accuracy.at(n); }
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json::object();
  j["mAP"] = r.mAP;
  for (const auto& [n, v] : r.rank_accuracy) j["rank" + std::to_string(n)] = v;
  j["num_queries"] = r.num_queries;
  j["protocol"] = r.protocol;
  j["reranked"] = r.reranked;
}

/// Aligned text table with percentages, one header row and one result row.
inline std::string format_table(const MetricsReport& r, const std::string& method = "model") {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-16s %7s", "Method", "mAP");
  os << buf;
  for (const auto& [n, v] : r.rank_accuracy) {
    std::snprintf(buf, sizeof buf, " %8s", ("Rank-" + std::to_string(n)).c_str());
    os << buf;
  }
  os << '\n';
  std::snprintf(buf, sizeof buf, "%-16s %7.1f", method.c_str(), 100 * r.mAP);
  os << buf;
  for (const auto& [n, v] : r.rank_accuracy) {
    std::snprintf(buf, sizeof buf, " %8.1f", 100 * v);
    os << buf;
  }
  os << '\n';
  return os.str();
}

inline void require_multi_view(const std::vector<std::string>& labels) {
  std::map<std::string, std::size_t> count;
  for (const auto& l : labels) ++count[l];
  std::string lonely;
  for (const auto& [id, c] : count)
    if (c < 2) lonely += (lonely.empty() ? "" : ", ") + id;
  if (!lonely.empty()) throw EvalError("patent_ids with a single row have no relevant gallery item: " + lonely);
}

/// Metrics from per-query gallery orderings. `order(q)` must return every row
/// index; the query itself is skipped wherever it appears.
template <class OrderFn>
MetricsReport evaluate_orderings(const std::vector<std::string>& labels, OrderFn&& order,
                                 const std::vector<std::size_t>& cutoffs = default_rank_cutoffs()) {
  require_multi_view(labels);
  std::map<std::string, std::size_t> count;
  for (const auto& l : labels) ++count[l];
  MetricsReport rep;
  rep.num_queries = labels.size();
  std::map<std::size_t, std::size_t> within;
  double ap_sum = 0;
  for (std::size_t q = 0; q < labels.size(); ++q) {
    const std::vector<std::size_t> ranked = order(q);
    std::vector<bool> flags;
    flags.reserve(ranked.size());
    for (auto row : ranked)
      if (row != q) flags.push_back(labels[row] == labels[q]);
    ap_sum += average_precision(flags, count[labels[q]] - 1);
    std::size_t first = flags.size();
    for (std::size_t r = 0; r < flags.size(); ++r)
      if (flags[r]) {
        first = r;
        break;
      }
    for (auto n : cutoffs) within[n] += first < n;
  }
  rep.mAP = ap_sum / static_cast<double>(labels.size());
  for (auto n : cutoffs) rep.rank_accuracy[n] = static_cast<double>(within[n]) / static_cast<double>(labels.size());
  return rep;
}

/// Leave-one-out metrics from a similarity matrix (higher is closer).
inline MetricsReport evaluate_similarity(const DistMatrix& sim, const std::vector<std::string>& labels,
                                         const std::vector<std::size_t>& cutoffs = default_rank_cutoffs()) {
  if (sim.rows != labels.size() || sim.cols != labels.size())
    throw EvalError("similarity matrix does not match the label count");
  return evaluate_orderings(
      labels,
      [&](std::size_t q) {
        const auto row = sim.row(q);
        return order_by_score(std::vector<double>(row.begin(), row.end()));
      },
      cutoffs);
}

/// Leave-one-out metrics from a distance matrix (lower is closer).
inline MetricsReport evaluate_distance(const DistMatrix& dist, const std::vector<std::string>& labels,
                                       const std::vector<std::size_t>& cutoffs = default_rank_cutoffs()) {
  if (dist.rows != labels.size() || dist.cols != labels.size())
    throw EvalError("distance matrix does not match the label count");
  return evaluate_orderings(labels, [&](std::size_t q) { return order_by_distance(dist.row(q)); }, cutoffs);
}

inline MetricsReport evaluate(const EmbeddingStore& store, const std::optional<RerankParams>& rerank = std::nullopt,
                              const std::vector<std::size_t>& cutoffs = default_rank_cutoffs()) {
  require_multi_view(store.labels());
  if (!rerank) return evaluate_similarity(similarity_matrix(store), store.labels(), cutoffs);
  auto rep = evaluate_distance(k_reciprocal_rerank_self(store, *rerank), store.labels(), cutoffs);
  rep.reranked = true;
  return rep;
}

}  // namespace patentret
