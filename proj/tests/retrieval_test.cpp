#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "patentret/retrieval.hpp"
#include "support.hpp"

using namespace patentret;
using testing_support::TempDir;

namespace {

EmbeddingStore random_store(std::size_t rows, std::size_t dim, std::uint64_t seed, std::size_t ids = 0) {
  Rng rng(seed);
  std::vector<float> v(rows * dim);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  std::vector<std::string> labels, refs;
  for (std::size_t i = 0; i < rows; ++i) {
    labels.push_back("P" + std::to_string(ids ? i % ids : i));
    refs.push_back("img/" + std::to_string(i) + ".png");
  }
  return EmbeddingStore(std::move(v), dim, labels, refs);
}

std::vector<float> at_angle(double deg) {
  const double r = deg * std::numbers::pi / 180.0;
  return {static_cast<float>(std::cos(r)), static_cast<float>(std::sin(r))};
}

EmbeddingStore planar_store(const std::vector<double>& degrees) {
  std::vector<float> v;
  std::vector<std::string> labels, refs;
  for (std::size_t i = 0; i < degrees.size(); ++i) {
    const auto u = at_angle(degrees[i]);
    v.insert(v.end(), u.begin(), u.end());
    labels.push_back("G" + std::to_string(i));
    refs.push_back("g" + std::to_string(i));
  }
  return EmbeddingStore(v, 2, labels, refs);
}

std::vector<std::size_t> rows_of(const RetrievalResult& r) {
  std::vector<std::size_t> out;
  for (const auto& h : r.hits) out.push_back(h.row);
  return out;
}

}  // namespace

TEST(EmbeddingStore, RowsAreNormalizedAndZeroRowRejected) {
  const auto s = random_store(20, 7, 1);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(dot(s.row(i), s.row(i)), 1.0, 1e-6);
  EXPECT_THROW(EmbeddingStore(std::vector<float>{1, 0, 0, 0}, 2, {"a", "b"}, {"x", "y"}), RetrievalError);
  EXPECT_THROW(EmbeddingStore(std::vector<float>{1, 0, 0}, 2, {"a"}, {"x"}), RetrievalError);
  EXPECT_THROW(EmbeddingStore(std::vector<float>{1, 0}, 2, {"a", "b"}, {"x"}), RetrievalError);
}

TEST(Search, SelfIsRankOneWithUnitScore) {
  const auto s = random_store(100, 32, 2);
  for (std::size_t i = 0; i < s.size(); i += 7) {
    const auto r = search(s, s.row(i), 5);
    ASSERT_EQ(r.hits.size(), 5u);
    EXPECT_EQ(r.hits[0].row, i);
    EXPECT_NEAR(r.hits[0].score, 1.0, 1e-5);
    EXPECT_EQ(r.hits[0].patent_id, s.labels()[i]);
    EXPECT_EQ(r.hits[0].ref, s.refs()[i]);
    for (std::size_t k = 1; k < 5; ++k) EXPECT_GE(r.hits[k - 1].score, r.hits[k].score);
  }
}

TEST(Search, FullKIsPermutation) {
  const auto s = random_store(37, 5, 3);
  const auto r = search(s, s.row(4), s.size());
  auto rows = rows_of(r);
  std::sort(rows.begin(), rows.end());
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i], i);
}

TEST(Search, PlanarAnglesGiveClosedFormScores) {
  const auto s = planar_store({0, 45, 90});
  const auto r = search(s, at_angle(0), 3);
  EXPECT_EQ(rows_of(r), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_NEAR(r.hits[0].score, 1.0, 1e-6);
  EXPECT_NEAR(r.hits[1].score, std::sqrt(0.5), 1e-6);
  EXPECT_NEAR(r.hits[2].score, 0.0, 1e-6);
}

TEST(Search, BadQueriesRejected) {
  const auto s = random_store(10, 4, 4);
  const std::vector<float> zero(4, 0.0f), wrong(3, 1.0f);
  EXPECT_THROW(search(s, zero, 1), RetrievalError);
  EXPECT_THROW(search(s, wrong, 1), RetrievalError);
  EXPECT_THROW(search(s, s.row(0), 0), RetrievalError);
  EXPECT_THROW(search(s, s.row(0), 11), RetrievalError);
}

// Brute-force O(R d) reference: score every row, pick the best k by repeated
// linear scans with the lowest index winning ties.
TEST(Search, MatchesBruteForceOnRandomStores) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.uniform_int(0, 199), dim = 1 + rng.uniform_int(0, 15);
    const auto s = random_store(rows, dim, 100 + trial);
    std::vector<float> q(dim);
    for (auto& x : q) x = static_cast<float>(rng.uniform(-1, 1));
    const std::size_t k = 1 + rng.uniform_int(0, static_cast<long>(rows) - 1);
    double qn = 0;
    for (float x : q) qn += static_cast<double>(x) * x;
    std::vector<double> ref(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0;
      for (std::size_t j = 0; j < dim; ++j) acc += static_cast<double>(q[j]) / std::sqrt(qn) * s.row(i)[j];
      ref[i] = acc;
    }
    std::vector<bool> taken(rows, false);
    const auto got = search(s, q, k);
    for (std::size_t r = 0; r < k; ++r) {
      std::size_t best = rows;
      for (std::size_t i = 0; i < rows; ++i)
        if (!taken[i] && (best == rows || ref[i] > ref[best] + 1e-9)) best = i;
      taken[best] = true;
      EXPECT_NEAR(got.hits[r].score, ref[best], 1e-6) << "trial " << trial << " rank " << r;
    }
  }
}

TEST(Search, InvariantToQueryScaling) {
  const auto s = random_store(60, 8, 6);
  Rng rng(7);
  std::vector<float> q(8);
  for (auto& x : q) x = static_cast<float>(rng.uniform(-1, 1));
  const auto base = search(s, q, 60);
  for (float c : {0.001f, 3.0f, 1000.0f}) {
    auto scaled = q;
    for (auto& x : scaled) x *= c;
    const auto r = search(s, scaled, 60);
    EXPECT_EQ(rows_of(r), rows_of(base)) << c;
    for (std::size_t i = 0; i < 60; ++i) EXPECT_NEAR(r.hits[i].score, base.hits[i].score, 1e-6);
  }
}

TEST(Search, TiesGoToLowerIndex) {
  const auto s = planar_store({30, 10, 50, 10, 30});
  EXPECT_EQ(rows_of(search(s, at_angle(0), 5)), (std::vector<std::size_t>{1, 3, 0, 4, 2}));
}

// ---------------------------------------------------------------------------

TEST(Rerank, LambdaOnePreservesCosineOrder) {
  const auto s = random_store(40, 6, 8, 10);
  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    std::vector<float> q(6);
    for (auto& x : q) x = static_cast<float>(rng.uniform(-1, 1));
    const auto plain = search(s, q, s.size());
    const auto rr = search_reranked(s, q, s.size(), {10, 3, 1.0});
    EXPECT_TRUE(rr.reranked);
    EXPECT_EQ(rows_of(rr), rows_of(plain));
    // Scores reported with re-ranking are still cosine similarities.
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(rr.hits[i].score, plain.hits[i].score);
  }
}

TEST(Rerank, LambdaZeroSelfJaccardIsZero) {
  const auto s = random_store(30, 5, 10, 6);
  const auto d = k_reciprocal_rerank_self(s, {8, 3, 0.0});
  ASSERT_EQ(d.rows, 30u);
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_NEAR(d(i, i), 0.0, 1e-12) << i;
    for (std::size_t j = 0; j < 30; ++j) {
      EXPECT_GE(d(i, j), -1e-12);
      EXPECT_LE(d(i, j), 1.0 + 1e-12);
    }
  }
}

TEST(Rerank, Deterministic) {
  const auto s = random_store(50, 12, 11, 10);
  const std::vector<std::vector<float>> q{{s.row(3).begin(), s.row(3).end()}};
  EXPECT_EQ(k_reciprocal_rerank(s, q, {}).data, k_reciprocal_rerank(s, q, {}).data);
  EXPECT_EQ(k_reciprocal_rerank_self(s, {}).data, k_reciprocal_rerank_self(s, {}).data);
}

TEST(Rerank, ParameterValidation) {
  const auto s = random_store(10, 3, 12);
  EXPECT_THROW(k_reciprocal_rerank_self(s, {10, 2, 0.3}), RetrievalError);
  EXPECT_THROW(search_reranked(s, s.row(0), 3, {20, 6, 0.3}), RetrievalError);
  EXPECT_THROW(k_reciprocal_rerank_self(s, {4, 4, 0.3}), RetrievalError);
  EXPECT_THROW(k_reciprocal_rerank_self(s, {4, 0, 0.3}), RetrievalError);
  EXPECT_THROW(k_reciprocal_rerank_self(s, {4, 2, 1.5}), RetrievalError);
  EXPECT_NO_THROW(k_reciprocal_rerank_self(s, {9, 2, 0.3}));
}

// Gallery on the unit circle at -170, -80, 90 and -150 degrees, query at 0.
// Cosine ranks g1 ahead of g2, but g2 shares the query's k-reciprocal
// neighbourhood and moves to rank 1 once re-ranked. Expected distances come
// from tests/oracles/rerank_oracle.py, an independent numpy port of the
// reference implementation.
TEST(Rerank, FourPointPromotionMatchesOracle) {
  const auto s = planar_store({-170, -80, 90, -150});
  const auto q = at_angle(0);
  EXPECT_EQ(rows_of(search(s, q, 4)), (std::vector<std::size_t>{1, 2, 3, 0}));

  const RerankParams p{3, 2, 0.3};
  const auto d = k_reciprocal_rerank(s, {q}, p);
  const std::vector<double> oracle{0.7247723903771521, 0.46070998991699147, 0.38322291015681365, 0.7068186592340475};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(d(0, j), oracle[j], 1e-6) << j;
  EXPECT_EQ(rows_of(search_reranked(s, q, 4, p)), (std::vector<std::size_t>{2, 1, 3, 0}));

  // Without query expansion the oracle keeps the cosine order.
  const auto d1 = k_reciprocal_rerank(s, {q}, {3, 1, 0.3});
  const std::vector<double> oracle_k2_1{0.8410209190069842, 0.5837224762929099, 0.6197536012091015,
                                        0.8237325694549582};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(d1(0, j), oracle_k2_1[j], 1e-6) << j;
}

// Each row's expanded encoding sums to one, so its Jaccard term with itself
// is zero and it heads its own re-ranked list.
TEST(Rerank, SelfRowRanksItselfFirst) {
  const auto s = random_store(25, 4, 13, 5);
  const auto full = k_reciprocal_rerank_self(s, {6, 2, 0.3});
  for (std::size_t i = 0; i < 25; ++i) {
    const auto order = order_by_distance(full.row(i));
    EXPECT_EQ(order[0], i);
  }
}

// ---------------------------------------------------------------------------

TEST(Pemb, RoundTripIsBitwise) {
  TempDir dir("pemb");
  const auto s = random_store(33, 9, 14, 11);
  save_pemb(s, dir / "e.pemb");
  const auto back = load_pemb(dir / "e.pemb");
  EXPECT_EQ(back.size(), 33u);
  EXPECT_EQ(back.dim(), 9u);
  EXPECT_EQ(back.vectors(), s.vectors());
  EXPECT_EQ(back.labels(), s.labels());
  EXPECT_EQ(back.refs(), s.refs());
  EXPECT_EQ(serialize_pemb(back), serialize_pemb(s));
}

TEST(Pemb, CorruptionRejected) {
  const auto bytes = serialize_pemb(random_store(5, 3, 15));
  for (std::size_t cut = 0; cut < bytes.size(); cut += 3)
    EXPECT_THROW(parse_pemb(bytes.substr(0, cut)), RetrievalError) << cut;
  auto bad = bytes;
  bad[0] = 'Q';
  EXPECT_THROW(parse_pemb(bad), RetrievalError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(parse_pemb(bad), RetrievalError);
  EXPECT_THROW(parse_pemb(bytes + "{broken\n"), RetrievalError);
  EXPECT_THROW(load_pemb("/nonexistent/x.pemb"), RetrievalError);
}

TEST(Pemb, NonUnitRowsRejected) {
  EXPECT_THROW(EmbeddingStore::from_unit_rows({2, 0}, 2, {"a"}, {"x"}), RetrievalError);
  const auto s = EmbeddingStore::from_unit_rows({0.6f, 0.8f}, 2, {"a"}, {"x"});
  EXPECT_EQ(s.vectors(), (std::vector<float>{0.6f, 0.8f}));
}

TEST(EmbedDataset, FiftyRowsUnitNormAndDeterministic) {
  TempDir dir("embed");
  SyntheticSpec spec;
  spec.num_ids = 10;
  spec.views_per_id = 5;
  spec.image_size = 32;
  spec.val_fraction = 0.5;
  const auto m = generate_synthetic(spec, dir.path());
  ModelConfig c;
  c.backbone.stage_channels = {8, 16};
  c.backbone.input_size = 32;
  c.embed_dim = 24;
  c.num_classes = 5;
  const auto params = init_params<float>(c, 1);
  const auto train = embed_dataset(params, m, Split::train, 16);
  const auto val = embed_dataset(params, m, Split::val, 7);
  EXPECT_EQ(train.size() + val.size(), 50u);
  EXPECT_EQ(train.dim(), 24u);
  for (const auto* s : {&train, &val})
    for (std::size_t i = 0; i < s->size(); ++i) EXPECT_NEAR(dot(s->row(i), s->row(i)), 1.0, 1e-5);
  EXPECT_EQ(embed_dataset(params, m, Split::train, 16).vectors(), train.vectors());
  // Batching changes GEMM blocking only, so features agree to rounding.
  const auto one_batch = embed_dataset(params, m, Split::val, 64).vectors();
  ASSERT_EQ(one_batch.size(), val.vectors().size());
  for (std::size_t i = 0; i < one_batch.size(); ++i) EXPECT_NEAR(one_batch[i], val.vectors()[i], 1e-5);
  EXPECT_EQ(val.find_ref(val.refs()[2]), 2);
  EXPECT_EQ(val.find_ref("missing.png"), -1);
}
