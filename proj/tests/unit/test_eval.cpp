#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "mhl/corpus.hpp"
#include "mhl/decode.hpp"
#include "mhl/error.hpp"
#include "mhl/eval.hpp"

namespace mhl {
namespace {

using testing::random_catalog;
using testing::toy_config;

std::vector<ItemIndex> ranked_with_target_at(int rank, ItemIndex target, int n = 20) {
  std::vector<ItemIndex> r;
  for (ItemIndex i = 100; static_cast<int>(r.size()) < n; ++i) r.push_back(i);
  r[static_cast<std::size_t>(rank - 1)] = target;
  return r;
}

TEST(Metrics, RecallBoundaries) {
  EXPECT_EQ(recall_at_k(ranked_with_target_at(1, 7), 7, 5), 1);
  EXPECT_EQ(recall_at_k(ranked_with_target_at(5, 7), 7, 5), 1);
  EXPECT_EQ(recall_at_k(ranked_with_target_at(6, 7), 7, 5), 0);
  EXPECT_EQ(recall_at_k({}, 7, 5), 0);
  EXPECT_THROW(recall_at_k({1}, 1, 0), Error);
  EXPECT_THROW(ndcg_at_k({1}, 1, -1), Error);
}

// Generic graded-relevance NDCG: DCG over the ranked list divided by the ideal DCG.
double generic_ndcg(const std::vector<ItemIndex>& ranked, const std::vector<double>& rel_of, int K) {
  auto rel = [&](ItemIndex i) { return i < rel_of.size() ? rel_of[i] : 0.0; };
  double dcg = 0.0;
  for (int i = 0; i < K && i < static_cast<int>(ranked.size()); ++i) dcg += (std::pow(2.0, rel(ranked[i])) - 1) / std::log2(i + 2.0);
  std::vector<double> sorted = rel_of;
  std::sort(sorted.rbegin(), sorted.rend());
  double ideal = 0.0;
  for (int i = 0; i < K && i < static_cast<int>(sorted.size()); ++i) ideal += (std::pow(2.0, sorted[i]) - 1) / std::log2(i + 2.0);
  return ideal == 0.0 ? 0.0 : dcg / ideal;
}

TEST(Metrics, NdcgClosedForms) {
  EXPECT_EQ(ndcg_at_k(ranked_with_target_at(1, 7), 7, 10), 1.0);
  EXPECT_EQ(ndcg_at_k(ranked_with_target_at(3, 7), 7, 10), 0.5);
  EXPECT_NEAR(ndcg_at_k(ranked_with_target_at(4, 7), 7, 5), 0.43068, 1e-5);
  std::vector<double> rel(8, 0.0);
  rel[7] = 1.0;
  for (int rank = 1; rank <= 12; ++rank)
    for (int K : {1, 5, 10})
      EXPECT_NEAR(ndcg_at_k(ranked_with_target_at(rank, 7), 7, K), generic_ndcg(ranked_with_target_at(rank, 7), rel, K), 1e-15);
}

TEST(Metrics, NdcgNeverExceedsRecall) {
  Rng rng = make_rng(1, {1});
  for (int i = 0; i < 1000; ++i) {
    const int rank = static_cast<int>(uniform_int(rng, 1, 20));
    const int K = static_cast<int>(uniform_int(rng, 1, 20));
    const auto r = ranked_with_target_at(rank, 3);
    EXPECT_LE(ndcg_at_k(r, 3, K), recall_at_k(r, 3, K));
  }
}

// Ten users, target ranks pinned: hit ranks 1, 2, 3, 5, 7, 10, 11, miss, miss, 4.
TEST(Evaluate, TenUserFixture) {
  const std::vector<int> ranks{1, 2, 3, 5, 7, 10, 11, 0, 0, 4};
  std::vector<EvalCase> cases;
  for (std::size_t u = 0; u < ranks.size(); ++u) cases.push_back({"u" + std::to_string(u), {1, 2}, static_cast<ItemIndex>(u)});
  const Ranker ranker = [&](const EvalCase& c, std::size_t topk) {
    EXPECT_EQ(topk, 10u);
    const int r = ranks[c.target];
    return r == 0 ? ranked_with_target_at(1, 999) : ranked_with_target_at(r, c.target);
  };
  const MetricsReport rep = evaluate_ranker(cases, ranker);
  const double l2 = std::log2(3.0), l3 = 2.0, l4 = std::log2(5.0), l5 = std::log2(6.0), l10 = std::log2(11.0);
  EXPECT_NEAR(rep.recall_at(5), 5.0 / 10, 1e-12);
  EXPECT_NEAR(rep.recall_at(10), 7.0 / 10, 1e-12);
  EXPECT_NEAR(rep.ndcg_at(5), (1.0 + 1 / l2 + 1 / l3 + 1 / l5 + 1 / l4) / 10, 1e-12);
  EXPECT_NEAR(rep.ndcg_at(10), (1.0 + 1 / l2 + 1 / l3 + 1 / l5 + 1 / std::log2(8.0) + 1 / l10 + 1 / l4) / 10, 1e-12);
  EXPECT_EQ(rep.n_users, 10u);
  EXPECT_EQ(metrics_report_from_json(to_json(rep)).ndcg, rep.ndcg);
}

TEST(Evaluate, UnionEqualsWeightedAverage) {
  Rng rng = make_rng(2, {1});
  std::vector<EvalCase> cases;
  for (int u = 0; u < 37; ++u) cases.push_back({"u", {0}, static_cast<ItemIndex>(uniform_int(rng, 0, 14))});
  const Ranker ranker = [](const EvalCase& c, std::size_t) {
    std::vector<ItemIndex> r(15);
    std::iota(r.begin(), r.end(), 0u);
    std::rotate(r.begin(), r.begin() + (c.target * 7) % 15, r.end());
    return r;
  };
  const std::vector<EvalCase> a(cases.begin(), cases.begin() + 12), b(cases.begin() + 12, cases.end());
  const MetricsReport all = evaluate_ranker(cases, ranker);
  const MetricsReport merged = merge_reports(evaluate_ranker(a, ranker), evaluate_ranker(b, ranker));
  for (int K : {5, 10}) {
    EXPECT_NEAR(all.recall_at(K), merged.recall_at(K), 1e-12);
    EXPECT_NEAR(all.ndcg_at(K), merged.ndcg_at(K), 1e-12);
  }
  EXPECT_EQ(merged.n_users, 37u);
}

TEST(Evaluate, RandomRankerRecallIsKOverN) {
  const std::size_t n = 100, users = 1000;
  std::vector<EvalCase> cases;
  Rng rng = make_rng(3, {1});
  for (std::size_t u = 0; u < users; ++u) cases.push_back({"u" + std::to_string(u), {0}, static_cast<ItemIndex>(uniform_int(rng, 0, n - 1))});
  const Ranker ranker = [&](const EvalCase& c, std::size_t) {
    Rng r = make_rng(4, {std::hash<std::string>{}(c.user_id)});
    std::vector<ItemIndex> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[uniform_int(r, 0, i)]);
    return perm;
  };
  const MetricsReport rep = evaluate_ranker(cases, ranker);
  const double p = 10.0 / n, sigma = std::sqrt(p * (1 - p) / users);
  EXPECT_NEAR(rep.recall_at(10), p, 3 * sigma);
}

SplitCorpus small_split() {
  SplitCorpus s;
  s.users.push_back({"u1", {"i0", "i1"}, "i2", "i3"});
  s.users.push_back({"u2", {"i3"}, "i1", "i0"});
  return s;
}

TEST(MakeCases, ValidationAndTestContexts) {
  const Catalog cat = random_catalog(4, 2, 8, 5);
  const auto val = make_cases(small_split(), cat, EvalTarget::kValidation);
  const auto test = make_cases(small_split(), cat, EvalTarget::kTest);
  EXPECT_EQ(val[0].context, (std::vector<ItemIndex>{0, 1}));
  EXPECT_EQ(val[0].target, 2u);
  EXPECT_EQ(test[0].context, (std::vector<ItemIndex>{0, 1, 2}));
  EXPECT_EQ(test[1].target, 0u);
  SplitCorpus bad = small_split();
  bad.users[0].test_target = "nope";
  EXPECT_THROW(make_cases(bad, cat, EvalTarget::kTest), Error);
}

TEST(Evaluate, HardWiredModelIsPerfect) {
  ModelConfig c = toy_config(2, 8, 8, 1);
  Model m(c);
  const Catalog cat = random_catalog(30, 2, 8, 6, true);
  const ItemIndex target = 17;
  for (int k = 0; k < 2; ++k) m.tensor(m.head_bias_id(k, HeadSet::kPredict))(0, cat.id(target)[k]) = 40.0;
  const ItemGraph g = build_token_graph(cat, 10);
  std::vector<EvalCase> cases;
  for (int u = 0; u < 5; ++u) cases.push_back({"u", {static_cast<ItemIndex>(u), static_cast<ItemIndex>(u + 1)}, target});
  for (bool exact : {true, false}) {
    DecoderConfig dc;
    dc.exact = exact;
    const MetricsReport rep = evaluate(Decoder(m, cat, g, dc), cases);
    EXPECT_EQ(rep.recall_at(5), 1.0);
    EXPECT_EQ(rep.ndcg_at(5), 1.0);
  }
}

TEST(Evaluate, InvariantToCatalogReindexing) {
  ModelConfig c = toy_config(3, 8, 16, 1);
  c.init_std = 0.4;
  Model m(c);
  m.init_parameters(7);
  const Catalog cat = random_catalog(40, 3, 8, 7, true);
  std::vector<ItemIndex> perm(40);
  std::iota(perm.begin(), perm.end(), 0u);
  Rng rng = make_rng(7, {1});
  for (std::size_t i = 39; i > 0; --i) std::swap(perm[i], perm[uniform_int(rng, 0, i)]);
  std::vector<std::string> names(40);
  std::vector<SemanticId> ids(40);
  for (ItemIndex i = 0; i < 40; ++i) {
    names[perm[i]] = cat.item_id(i);
    ids[perm[i]] = cat.id(i);
  }
  const Catalog permuted(names, ids, cat.codebook_sizes());
  std::vector<EvalCase> a, b;
  for (int u = 0; u < 30; ++u) {
    std::vector<ItemIndex> ctx;
    for (int t = 0; t < 5; ++t) ctx.push_back(static_cast<ItemIndex>(uniform_int(rng, 0, 39)));
    const auto target = static_cast<ItemIndex>(uniform_int(rng, 0, 39));
    a.push_back({"u", ctx, target});
    for (auto& x : ctx) x = perm[x];
    b.push_back({"u", ctx, perm[target]});
  }
  DecoderConfig dc;
  dc.exact = true;
  const ItemGraph ga = build_token_graph(cat, 10), gb = build_token_graph(permuted, 10);
  const MetricsReport ra = evaluate(Decoder(m, cat, ga, dc), a), rb = evaluate(Decoder(m, permuted, gb, dc), b);
  EXPECT_EQ(ra.recall, rb.recall);
  for (std::size_t i = 0; i < ra.ndcg.size(); ++i) EXPECT_NEAR(ra.ndcg[i], rb.ndcg[i], 1e-12);
}

TEST(Pilot, RelativeChange) {
  EXPECT_NEAR(*relative_change_pct(0.0215, 0.1290), 500.0, 1e-9);
  EXPECT_EQ(*relative_change_pct(0.3, 0.3), 0.0);
  EXPECT_FALSE(relative_change_pct(0.0, 0.2).has_value());
  PilotResult p;
  EXPECT_EQ(to_json(p).at("ndcg10_change_pct"), "undefined");
}

TEST(Pilot, SyntheticRunMatchesReports) {
  SynthConfig sc;
  sc.n_users = 120;
  sc.n_items = 60;
  sc.min_path_len = 22;
  sc.max_path_len = 30;
  const SynthData synth = synth_generate(sc);
  const SplitCorpus split = split_leave_one_out(synth.corpus);
  std::vector<std::string> names;
  std::vector<SemanticId> ids;
  Rng rng = make_rng(8, {1});
  for (std::size_t i = 0; i < synth.item_ids.size(); ++i) {
    names.push_back(synth.item_ids[i]);
    ids.push_back(testing::random_id(2, 8, rng));
  }
  const Catalog cat(names, ids, {8, 8});
  ModelConfig c = toy_config(2, 8, 16, 1);
  c.init_std = 0.4;
  Model m(c);
  m.init_parameters(8);
  const ItemGraph g = build_token_graph(cat, 10);
  const Decoder d(m, cat, g, {});
  const PilotResult p = pilot_truncation(d, split);
  EXPECT_EQ(p.full.n_users, p.truncated.n_users);
  EXPECT_GT(p.full.n_users, 0u);
  EXPECT_EQ(p.full.protocol, "full");
  EXPECT_EQ(p.truncated.protocol, "truncated");
  ASSERT_TRUE(p.ndcg10_change_pct.has_value());
  EXPECT_NEAR(*p.ndcg10_change_pct, 100.0 * (p.truncated.ndcg_at(10) - p.full.ndcg_at(10)) / p.full.ndcg_at(10), 1e-12);
}

TEST(Pilot, IdenticalReportsGiveZeroChange) {
  std::vector<EvalCase> cases{{"u", {1, 2}, 3}};
  const Ranker r = [](const EvalCase&, std::size_t) { return std::vector<ItemIndex>{5, 3, 1}; };
  const auto a = evaluate_ranker(cases, r), b = evaluate_ranker(cases, r, {5, 10}, "truncated");
  EXPECT_EQ(*relative_change_pct(a.ndcg_at(10), b.ndcg_at(10)), 0.0);
}

TEST(PlotCsv, Header) {
  EXPECT_EQ(format_metric_csv({{3, "val_ndcg10", 0.25}}), "epoch,metric,value\n3,val_ndcg10,0.25\n");
}

}  // namespace
}  // namespace mhl
