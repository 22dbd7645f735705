#include <algorithm>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "mhl/error.hpp"
#include "mhl/tokenizer.hpp"

namespace mhl {
namespace {

Eigen::MatrixXd random_matrix(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Rng rng = make_rng(seed, {3});
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = normal01(rng);
  return x;
}

TEST(ReduceEmbeddings, OrthogonalCenteredRowsReproduceUpToSign) {
  Eigen::MatrixXd x(6, 3);
  x << 3, 0, 0, -3, 0, 0, 0, 2, 0, 0, -2, 0, 0, 0, 1, 0, 0, -1;
  const PcaResult p = reduce_embeddings(x, 3);
  for (Eigen::Index j = 0; j < 3; ++j) {
    const double sign = p.projected.col(j).dot(x.col(j)) >= 0 ? 1.0 : -1.0;
    EXPECT_LT((p.projected.col(j) - sign * x.col(j)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ReduceEmbeddings, VariancesNonIncreasingAndSignNormalized) {
  const PcaResult p = reduce_embeddings(random_matrix(40, 6, 1), 6);
  for (Eigen::Index j = 1; j < p.variances.size(); ++j) EXPECT_GE(p.variances(j - 1), p.variances(j));
  for (Eigen::Index j = 0; j < p.basis.cols(); ++j) {
    Eigen::Index arg = 0;
    p.basis.col(j).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(p.basis(arg, j), 0.0);
  }
}

TEST(ReduceEmbeddings, ReconstructionErrorEqualsDiscardedSpectrum) {
  const Eigen::MatrixXd x = random_matrix(50, 8, 2);
  const PcaResult p = reduce_embeddings(x, 4);
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const double err = (centered - p.projected * p.basis.transpose()).squaredNorm();
  // Oracle: squared singular values of the centered data.
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  const Eigen::VectorXd s = svd.singularValues();
  double discarded = 0.0;
  for (Eigen::Index i = 4; i < s.size(); ++i) discarded += s(i) * s(i);
  EXPECT_NEAR(err, discarded, 1e-8);
}

TEST(ReduceEmbeddings, RankDeficientInputNamesRank) {
  Eigen::MatrixXd x = random_matrix(10, 2, 3) * random_matrix(2, 5, 4);
  try {
    reduce_embeddings(x, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("rank 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(reduce_embeddings(x, 0), Error);
  EXPECT_THROW(reduce_embeddings(x, 6), Error);
}

TEST(KMeans, ErrorHistoryNonIncreasing) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = make_rng(seed, {stream::kKMeans});
    const KMeansResult r = kmeans(random_matrix(200, 4, seed), 8, 30, rng);
    for (std::size_t i = 1; i < r.error_history.size(); ++i)
      EXPECT_LE(r.error_history[i], r.error_history[i - 1] + 1e-12);
  }
}

TEST(TrainPq, ExactCoverGivesZeroError) {
  Eigen::MatrixXd base = random_matrix(4, 4, 5);
  Eigen::MatrixXd y(40, 4);
  for (Eigen::Index i = 0; i < 40; ++i) y.row(i) = base.row(i % 4);
  PqOptions o;
  o.K = 2;
  o.codebook_size = 4;
  const CodebookSet cb = train_pq(y, o);
  EXPECT_NEAR(quantization_error(y, cb), 0.0, 1e-20);
}

// Exhaustive best 2-means over every 2-coloring of the rows.
Eigen::MatrixXd best_two_means(const Eigen::MatrixXd& v) {
  double best = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd best_c(2, v.cols());
  const int n = static_cast<int>(v.rows());
  for (int mask = 1; mask < (1 << n) - 1; ++mask) {
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(2, v.cols());
    int cnt[2] = {0, 0};
    for (int i = 0; i < n; ++i) {
      const int g = (mask >> i) & 1;
      c.row(g) += v.row(i);
      ++cnt[g];
    }
    c.row(0) /= cnt[0];
    c.row(1) /= cnt[1];
    double sse = 0.0;
    for (int i = 0; i < n; ++i) sse += (v.row(i) - c.row((mask >> i) & 1)).squaredNorm();
    if (sse < best) {
      best = sse;
      best_c = c;
    }
  }
  return best_c;
}

std::vector<std::vector<double>> sorted_rows(const Eigen::MatrixXd& m) {
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r;
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

TEST(TrainPq, MatchesExhaustiveTwoMeans) {
  Eigen::MatrixXd y = random_matrix(8, 4, 6);
  for (Eigen::Index i = 0; i < 4; ++i) y.row(i).array() += 5.0;  // two separated groups per subspace
  y(1, 2) -= 10.0;
  y(5, 2) += 10.0;
  PqOptions o;
  o.K = 2;
  o.codebook_size = 2;
  const CodebookSet cb = train_pq(y, o);
  for (int k = 0; k < 2; ++k) {
    const auto got = sorted_rows(cb.codebooks[k]);
    const auto want = sorted_rows(best_two_means(y.middleCols(2 * k, 2)));
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(got[r][c], want[r][c], 1e-9);
  }
}

TEST(TrainPq, RejectsIndivisibleDimension) {
  PqOptions o;
  o.K = 3;
  o.codebook_size = 2;
  EXPECT_THROW(train_pq(random_matrix(10, 4, 7), o), Error);
}

TEST(TrainPq, BeatsRandomCodebooks) {
  const Eigen::MatrixXd y = random_matrix(300, 8, 8);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PqOptions o;
    o.K = 4;
    o.codebook_size = 8;
    o.seed = seed;
    const CodebookSet cb = train_pq(y, o);
    CodebookSet rnd = cb;
    Rng rng = make_rng(seed, {77});
    for (int k = 0; k < o.K; ++k)
      for (int c = 0; c < o.codebook_size; ++c)
        rnd.codebooks[k].row(c) = y.row(static_cast<Eigen::Index>(uniform_int(rng, 0, 299))).segment(2 * k, 2);
    EXPECT_LE(quantization_error(y, cb), quantization_error(y, rnd));
  }
}

TEST(TrainPq, RotationIsOrthonormal) {
  PqOptions o;
  o.K = 4;
  o.codebook_size = 8;
  o.use_rotation = true;
  const CodebookSet cb = build_tokenizer(random_matrix(200, 16, 9), 8, o);
  ASSERT_TRUE(cb.rotation.has_value());
  EXPECT_LT(((*cb.rotation).transpose() * (*cb.rotation) - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(EncodeItem, CentroidConcatenationMapsToItself) {
  PqOptions o;
  o.K = 2;
  o.codebook_size = 4;
  const CodebookSet cb = train_pq(random_matrix(60, 4, 10), o);
  Eigen::RowVectorXd x(4);
  x << cb.codebooks[0].row(3), cb.codebooks[1].row(1);
  EXPECT_EQ(encode_item(x, cb).codewords, (std::vector<int>{3, 1}));
  EXPECT_EQ(encode_item(x, cb), encode_item(x, cb));
  x(0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(encode_item(x, cb), Error);
}

TEST(EncodeItem, MatchesLinearScan) {
  PqOptions o;
  o.K = 4;
  o.codebook_size = 8;
  o.use_rotation = true;
  const Eigen::MatrixXd feats = random_matrix(200, 12, 11);
  const CodebookSet cb = build_tokenizer(feats, 8, o);
  const Eigen::MatrixXd probes = random_matrix(100, 12, 12);
  for (Eigen::Index i = 0; i < probes.rows(); ++i) {
    const Eigen::RowVectorXd z = (probes.row(i) - cb.pca_mean) * cb.pca_basis * (*cb.rotation);
    const SemanticId id = encode_item(probes.row(i), cb);
    for (int k = 0; k < cb.K; ++k) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < cb.codebook_size; ++c) {
        const double d = (z.segment(k * cb.sub_dim, cb.sub_dim) - cb.codebooks[k].row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      EXPECT_EQ(id[k], best);
    }
  }
}

TEST(EncodeItem, CodewordsWithinRange) {
  PqOptions o;
  o.K = 4;
  o.codebook_size = 16;
  const Eigen::MatrixXd feats = random_matrix(100, 8, 13);
  const CodebookSet cb = train_pq(feats, o);
  for (Eigen::Index i = 0; i < feats.rows(); ++i) {
    const SemanticId id = encode_item(feats.row(i), cb);
    ASSERT_EQ(id.size(), 4);
    for (int c : id.codewords) EXPECT_TRUE(c >= 0 && c < 16);
  }
}

TEST(Codebooks, JsonRoundTrip) {
  PqOptions o;
  o.K = 2;
  o.codebook_size = 4;
  o.use_rotation = true;
  const CodebookSet cb = build_tokenizer(random_matrix(50, 6, 14), 4, o);
  const CodebookSet back = codebooks_from_json(nlohmann::json::parse(codebooks_to_json(cb).dump()));
  EXPECT_EQ(back.K, cb.K);
  for (int k = 0; k < cb.K; ++k) EXPECT_EQ(back.codebooks[k], cb.codebooks[k]);
  EXPECT_EQ(*back.rotation, *cb.rotation);
  EXPECT_EQ(back.pca_basis, cb.pca_basis);
}

TEST(FeatureMatrix, FileRoundTripAsFloat32) {
  testing::TempDir dir("features");
  const Eigen::MatrixXd m = random_matrix(5, 3, 15);
  write_feature_matrix(dir.path() / "f.bin", m);
  const Eigen::MatrixXd back = read_feature_matrix(dir.path() / "f.bin");
  EXPECT_EQ(back, m.cast<float>().cast<double>());
}

TEST(Catalog, JsonlRoundTrip) {
  const Catalog c = testing::random_catalog(20, 3, 5, 1);
  const Catalog back = parse_catalog_jsonl(format_catalog_jsonl(c), c.codebook_sizes(), false);
  EXPECT_EQ(back.ids(), c.ids());
  EXPECT_EQ(back.item_ids(), c.item_ids());
  EXPECT_THROW(c.index_of("nope"), Error);
}

TEST(TokenGraph, IdenticalAndDisjointIds) {
  const Catalog c({"a", "b", "c"}, {{{1, 2, 3}}, {{1, 2, 3}}, {{0, 0, 0}}}, {4, 4, 4});
  const ItemGraph g = build_token_graph(c, 50);
  ASSERT_EQ(g.neighbors[0].size(), 1u);
  EXPECT_EQ(g.neighbors[0][0], (Neighbor{1, 3}));
  EXPECT_EQ(g.neighbors[1][0], (Neighbor{0, 3}));
  EXPECT_TRUE(g.neighbors[2].empty());
}

TEST(TokenGraph, MatchesAllPairsOracle) {
  const Catalog c = testing::random_catalog(30, 4, 3, 2);
  const int E = 6;
  const ItemGraph g = build_token_graph(c, E);
  for (ItemIndex i = 0; i < 30; ++i) {
    std::vector<Neighbor> all;
    for (ItemIndex j = 0; j < 30; ++j) {
      if (i == j) continue;
      int w = 0;
      for (int k = 0; k < 4; ++k) w += c.id(i)[k] == c.id(j)[k];
      EXPECT_EQ(w, token_overlap(c.id(j), c.id(i), c));
      if (w > 0) all.push_back({j, w});
    }
    std::sort(all.begin(), all.end(),
              [](const Neighbor& a, const Neighbor& b) { return a.weight != b.weight ? a.weight > b.weight : a.item < b.item; });
    if (all.size() > E) all.resize(E);
    EXPECT_EQ(g.neighbors[i], all) << "item " << i;
  }
}

TEST(ExternalTokens, FullLengthLinesAreIdentity) {
  const ExternalTokens t = parse_external_tokens("a 1 2 3\nb 0 4 1\n", 3);
  EXPECT_EQ(t.catalog.id(0).codewords, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(t.catalog.id(1).codewords, (std::vector<int>{0, 4, 1}));
  EXPECT_EQ(t.padded, 0u);
  EXPECT_EQ(t.truncated, 0u);
  EXPECT_EQ(t.catalog.codebook_sizes(), (std::vector<int>{2, 5, 4}));
}

TEST(ExternalTokens, RaggedLinesArePaddedOrTruncated) {
  const std::string text = "a 1\nb 1 2 3 4 5\nc 2 2\nd 7 7 7\ne\n";
  const ExternalTokens t = parse_external_tokens(text, 3);
  // Oracle: count lines with fewer than K tokens.
  std::size_t short_lines = 0;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::istringstream ls(line);
    std::string w;
    int n = -1;
    while (ls >> w) ++n;
    if (n >= 0 && n < 3) ++short_lines;
  }
  EXPECT_EQ(t.padded, short_lines);
  EXPECT_EQ(t.truncated, 1u);
  const ItemIndex b = t.catalog.index_of("b");
  EXPECT_EQ(t.catalog.id(b).codewords, (std::vector<int>{1, 2, 3}));
  const ItemIndex a = t.catalog.index_of("a");
  EXPECT_TRUE(t.catalog.is_pad(1, t.catalog.id(a)[1]));
  EXPECT_THROW(parse_external_tokens("a 1 -2\n", 3), Error);
}

}  // namespace
}  // namespace mhl
