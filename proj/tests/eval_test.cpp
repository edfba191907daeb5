#include <algorithm>
#include <map>

#include <gtest/gtest.h>

#include "patentret/eval.hpp"

using namespace patentret;

namespace {

struct Oracle {
  double mAP = 0;
  std::map<std::size_t, double> rank;
};

// Leave-one-out reference built from scratch: for each query, sort every other
// row by (score descending, index ascending) and walk the list once.
Oracle reference_metrics(const DistMatrix& sim, const std::vector<std::string>& labels) {
  const std::size_t n = labels.size();
  Oracle o;
  std::map<std::size_t, std::size_t> within;
  double total = 0;
  for (std::size_t q = 0; q < n; ++q) {
    std::vector<std::pair<double, std::size_t>> others;
    for (std::size_t j = 0; j < n; ++j)
      if (j != q) others.emplace_back(-sim(q, j), j);
    std::sort(others.begin(), others.end());
    std::size_t relevant = 0;
    for (std::size_t j = 0; j < n; ++j) relevant += j != q && labels[j] == labels[q];
    double sum = 0;
    std::size_t hits = 0, first = n;
    for (std::size_t pos = 0; pos < others.size(); ++pos) {
      if (labels[others[pos].second] != labels[q]) continue;
      if (hits == 0) first = pos;
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(pos + 1);
    }
    total += sum / static_cast<double>(relevant);
    for (std::size_t k : {1, 5, 20}) within[k] += first < k;
  }
  o.mAP = total / static_cast<double>(n);
  for (std::size_t k : {1, 5, 20}) o.rank[k] = static_cast<double>(within[k]) / static_cast<double>(n);
  return o;
}

EmbeddingStore store_from(const std::vector<std::vector<float>>& rows, const std::vector<std::string>& labels) {
  std::vector<float> flat;
  std::vector<std::string> refs;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    flat.insert(flat.end(), rows[i].begin(), rows[i].end());
    refs.push_back("r" + std::to_string(i));
  }
  return EmbeddingStore(flat, rows[0].size(), labels, refs);
}

EmbeddingStore random_store(std::size_t ids, std::size_t views, std::size_t dim, Rng& rng, double noise) {
  std::vector<std::vector<float>> rows;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < ids; ++i) {
    std::vector<double> center(dim);
    for (auto& c : center) c = rng.uniform(-1, 1);
    for (std::size_t v = 0; v < views; ++v) {
      std::vector<float> r(dim);
      for (std::size_t d = 0; d < dim; ++d) r[d] = static_cast<float>(center[d] + noise * rng.uniform(-1, 1));
      rows.push_back(r);
      labels.push_back("D" + std::to_string(i));
    }
  }
  return store_from(rows, labels);
}

}  // namespace

TEST(AveragePrecision, WorkedExamples) {
  EXPECT_DOUBLE_EQ(average_precision({true, true, true}, 3), 1.0);
  EXPECT_NEAR(average_precision({true, false, true}, 2), 0.8333333333, 1e-9);
  EXPECT_NEAR(average_precision({false, false, true}, 1), 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(average_precision({false, true}, 2), 0.25);
  EXPECT_THROW(average_precision({true}, 0), EvalError);
  EXPECT_THROW(average_precision({true, true}, 1), EvalError);
}

// Integer-valued similarities force many ties, so tie-breaking has to agree
// exactly with the reference as well.
TEST(Metrics, MatchReferenceOnRandomInstances) {
  Rng rng(1);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = trial < 10 ? 500 : static_cast<std::size_t>(rng.uniform_int(4, 200));
    const std::size_t ids = static_cast<std::size_t>(rng.uniform_int(2, static_cast<long>(n / 2)));
    std::vector<std::string> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = "P" + std::to_string(i < 2 * ids ? i / 2 : rng.uniform_int(0, ids - 1));
    DistMatrix sim(n, n);
    const bool coarse = trial % 2 == 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j)
        sim(i, j) = sim(j, i) = coarse ? static_cast<double>(rng.uniform_int(0, 4)) : rng.uniform(-1, 1);
    const auto got = evaluate_similarity(sim, labels);
    const auto want = reference_metrics(sim, labels);
    EXPECT_EQ(got.mAP, want.mAP) << "trial " << trial;
    for (std::size_t k : {1, 5, 20}) EXPECT_EQ(got.rank(k), want.rank.at(k)) << "trial " << trial << " k " << k;
    EXPECT_EQ(got.num_queries, n);
  }
}

TEST(Metrics, IdenticalViewsScorePerfectly) {
  Rng rng(2);
  std::vector<std::vector<float>> rows;
  std::vector<std::string> labels;
  for (int id = 0; id < 8; ++id) {
    std::vector<float> v(6);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
    for (int view = 0; view < 4; ++view) {
      rows.push_back(v);
      labels.push_back("ID" + std::to_string(id));
    }
  }
  const auto rep = evaluate(store_from(rows, labels));
  EXPECT_DOUBLE_EQ(rep.mAP, 1.0);
  EXPECT_DOUBLE_EQ(rep.rank(1), 1.0);
  EXPECT_DOUBLE_EQ(rep.rank(20), 1.0);
}

// Only the query's own index is dropped. A bit-identical twin row stays in the
// gallery and is found at rank 1.
TEST(Metrics, SelfExclusionIsByIndexNotValue) {
  const std::vector<std::vector<float>> rows{{1, 0}, {1, 0}, {0, 1}, {0, 1}};
  const auto rep = evaluate(store_from(rows, {"A", "A", "B", "B"}));
  EXPECT_DOUBLE_EQ(rep.mAP, 1.0);
  // Twins under different ids: each twin is the other's wrong rank-1 answer.
  // Row 2 still finds row 0; row 3 is closest to row 2, another miss.
  const auto crossed = evaluate(store_from({{1, 0}, {1, 0}, {0.9f, 0.1f}, {0.1f, 0.9f}}, {"A", "B", "A", "B"}));
  EXPECT_DOUBLE_EQ(crossed.rank(1), 0.25);
}

TEST(Metrics, InvariantToRowScaling) {
  Rng rng(3);
  const auto s = random_store(12, 3, 8, rng, 0.7);
  std::vector<float> scaled = s.vectors();
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t d = 0; d < s.dim(); ++d) scaled[i * s.dim() + d] *= static_cast<float>(1 + 3 * i);
  const auto a = evaluate(s);
  const auto b = evaluate(EmbeddingStore(scaled, s.dim(), s.labels(), s.refs()));
  EXPECT_NEAR(a.mAP, b.mAP, 1e-12);
  EXPECT_EQ(a.rank_accuracy, b.rank_accuracy);
}

TEST(Metrics, RankAccuracyMonotoneAndBounded) {
  Rng rng(4);
  for (int t = 0; t < 30; ++t) {
    const auto s = random_store(10, 2 + t % 4, 5, rng, 0.2 + 0.1 * t);
    const auto rep = evaluate(s);
    EXPECT_LE(rep.rank(1), rep.rank(5));
    EXPECT_LE(rep.rank(5), rep.rank(20));
    EXPECT_GE(rep.mAP, 0.0);
    EXPECT_LE(rep.mAP, 1.0);
  }
}

TEST(Metrics, LonelyIdsListedInError) {
  const std::vector<std::vector<float>> rows{{1, 0}, {1, 0.1f}, {0, 1}, {0.5f, 0.5f}};
  try {
    evaluate(store_from(rows, {"A", "A", "LONE1", "LONE2"}));
    FAIL() << "expected EvalError";
  } catch (const EvalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("LONE1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("LONE2"), std::string::npos) << msg;
  }
}

TEST(Metrics, RerankedEvaluationFlagsReport) {
  Rng rng(5);
  const auto s = random_store(10, 4, 6, rng, 0.5);
  const auto plain = evaluate(s);
  const auto rr = evaluate(s, RerankParams{8, 3, 0.3});
  EXPECT_FALSE(plain.reranked);
  EXPECT_TRUE(rr.reranked);
  EXPECT_GT(rr.mAP, 0.0);
  EXPECT_LE(rr.rank(1), rr.rank(5));
  // With lambda = 1 the re-ranked distances order rows like cosine does.
  const auto same = evaluate(s, RerankParams{8, 3, 1.0});
  EXPECT_NEAR(same.mAP, plain.mAP, 1e-12);
}

TEST(Report, JsonAndTable) {
  MetricsReport r;
  r.mAP = 0.5;
  r.rank_accuracy = {{1, 0.25}, {5, 0.75}, {20, 1.0}};
  r.num_queries = 8;
  const nlohmann::json j = r;
  EXPECT_EQ(j.at("mAP"), 0.5);
  EXPECT_EQ(j.at("rank1"), 0.25);
  EXPECT_EQ(j.at("rank5"), 0.75);
  EXPECT_EQ(j.at("rank20"), 1.0);
  EXPECT_EQ(j.at("num_queries"), 8);
  EXPECT_EQ(j.at("protocol"), "leave-one-out");
  EXPECT_EQ(j.at("reranked"), false);
  const auto table = format_table(r, "ArcFace");
  EXPECT_NE(table.find("Rank-1"), std::string::npos);
  EXPECT_NE(table.find("Rank-20"), std::string::npos);
  EXPECT_NE(table.find("ArcFace"), std::string::npos);
  EXPECT_NE(table.find("50.0"), std::string::npos);
  EXPECT_NE(table.find("75.0"), std::string::npos);
  EXPECT_NE(table.find("100.0"), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 2);
}

TEST(Report, MatrixSizeMismatch) {
  EXPECT_THROW(evaluate_similarity(DistMatrix(3, 3), {"a", "a"}), EvalError);
  EXPECT_THROW(evaluate_distance(DistMatrix(2, 3), {"a", "a"}), EvalError);
}
