#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "mhl/error.hpp"
#include "mhl/masking.hpp"

namespace mhl {
namespace {

using testing::random_sequence;
using testing::toy_config;

void check_plan(const MaskPlan& plan, int T, int K, double gamma, Granularity g) {
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  for (const auto& p : plan.pairs) {
    EXPECT_LT(p.t, static_cast<std::uint32_t>(T));
    EXPECT_LT(p.k, static_cast<std::uint32_t>(K));
    EXPECT_TRUE(seen.insert({p.t, p.k}).second) << "duplicate pair";
  }
  if (g == Granularity::kToken) {
    EXPECT_LE(plan.pairs.size(), static_cast<std::size_t>(std::floor(gamma * K * T + 1e-9)));
  } else {
    EXPECT_LE(plan.items_touched(), static_cast<std::size_t>(std::floor(gamma * T + 1e-9)));
  }
}

TEST(PlanRandom, TokenLevelRange) {
  EXPECT_EQ(mask_upper_bound(10, 32, 0.15, Granularity::kToken), 48);
  Rng rng = make_rng(1, {1});
  int lo = 1000, hi = 0;
  for (int i = 0; i < 2000; ++i) {
    const MaskPlan p = plan_random(10, 32, 0.15, Granularity::kToken, rng);
    lo = std::min(lo, p.n_drawn);
    hi = std::max(hi, p.n_drawn);
    EXPECT_EQ(p.pairs.size(), static_cast<std::size_t>(p.n_drawn));
  }
  EXPECT_EQ(lo, 1);
  EXPECT_EQ(hi, 48);
}

TEST(PlanRandom, FloorBoundaryGivesEmptyPlan) {
  Rng rng = make_rng(2, {1});
  const MaskPlan p = plan_random(10, 4, 0.05, Granularity::kItem, rng);
  EXPECT_TRUE(p.empty());
  EXPECT_EQ(p.n_drawn, 0);
  EXPECT_THROW(plan_random(10, 4, 0.0, Granularity::kItem, rng), Error);
  EXPECT_THROW(plan_random(10, 4, 1.5, Granularity::kItem, rng), Error);
}

TEST(PlanRandom, DrawCountIsUniform) {
  Rng rng = make_rng(3, {1});
  std::vector<int> counts(21, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(plan_random(10, 4, 0.5, Granularity::kToken, rng).n_drawn)];
  EXPECT_EQ(counts[0], 0);
  double chi2 = 0.0;
  const double expect = draws / 20.0;
  for (int n = 1; n <= 20; ++n) chi2 += (counts[n] - expect) * (counts[n] - expect) / expect;
  // 19 degrees of freedom, p = 0.01 critical value.
  EXPECT_LT(chi2, 36.19);
}

TEST(PlanRandom, ItemLevelMasksWholeItems) {
  Rng rng = make_rng(4, {1});
  for (int i = 0; i < 200; ++i) {
    const MaskPlan p = plan_random(12, 3, 0.4, Granularity::kItem, rng);
    EXPECT_EQ(p.pairs.size(), 3 * p.items_touched());
    EXPECT_EQ(p.items_touched(), static_cast<std::size_t>(p.n_drawn));
  }
}

TEST(PlanRandom, MixedUsesBothShapes) {
  Rng rng = make_rng(5, {1});
  int whole = 0, single = 0;
  for (int i = 0; i < 500; ++i) {
    const MaskPlan p = plan_random(10, 4, 0.3, Granularity::kMixed, rng);
    std::map<std::uint32_t, int> per;
    for (const auto& q : p.pairs) ++per[q.t];
    for (const auto& [t, n] : per) {
      EXPECT_TRUE(n == 1 || n == 4);
      (n == 4 ? whole : single)++;
    }
  }
  const double frac = static_cast<double>(whole) / (whole + single);
  EXPECT_NEAR(frac, 0.5, 0.05);
}

TEST(PlanRandom, SizeBoundsHoldOverRandomConfigs) {
  Rng rng = make_rng(6, {1});
  for (int trial = 0; trial < 3000; ++trial) {
    const int T = static_cast<int>(uniform_int(rng, 1, 30));
    const int K = static_cast<int>(uniform_int(rng, 1, 8));
    const double gamma = 0.01 + 0.99 * uniform01(rng);
    const auto g = static_cast<Granularity>(uniform_int(rng, 0, 2));
    check_plan(plan_random(T, K, gamma, g, rng), T, K, gamma, g);
  }
}

TEST(SoftmaxEntropy, UniformAndOneHot) {
  EXPECT_NEAR(softmax_entropy(Eigen::RowVectorXd::Zero(256), 1.0), std::log(256.0), 1e-12);
  Eigen::RowVectorXd one_hot = Eigen::RowVectorXd::Zero(16);
  one_hot(3) = 30.0;
  EXPECT_LE(softmax_entropy(one_hot, 1.0), 1e-6);
  EXPECT_GE(softmax_entropy(one_hot, 1.0), 0.0);
}

TEST(SoftmaxEntropy, MatchesExtendedPrecision) {
  Rng rng = make_rng(7, {1});
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::RowVectorXd logits(16);
    for (int i = 0; i < 16; ++i) logits(i) = 3.0 * normal01(rng);
    const double tau = 0.3 + 2.0 * uniform01(rng);
    long double mx = logits.maxCoeff(), z = 0.0L;
    for (int i = 0; i < 16; ++i) z += std::exp((logits(i) - mx) / tau);
    long double h = 0.0L;
    for (int i = 0; i < 16; ++i) {
      const long double p = std::exp((logits(i) - mx) / tau) / z;
      if (p > 0) h -= p * std::log(p);
    }
    EXPECT_NEAR(softmax_entropy(logits, tau), static_cast<double>(h), 1e-10);
  }
}

TEST(ComputeEntropy, UniformHeadsAndIdentityAndBounds) {
  const Model flat(toy_config(2, 256, 16, 1));
  Rng rng = make_rng(8, {1});
  const EntropyMap u = compute_entropy(flat, random_sequence(4, 2, 256, rng));
  for (double h : u.token) EXPECT_NEAR(h, std::log(256.0), 1e-12);

  ModelConfig c = toy_config(4, 16, 16, 1);
  c.init_std = 0.5;
  Model m(c);
  m.init_parameters(8);
  const auto seq = random_sequence(9, 4, 16, rng);
  const Eigen::VectorXd before = m.params();
  const EntropyMap map = compute_entropy(m, seq, 0.7);
  EXPECT_EQ(m.params(), before);
  for (int t = 0; t < map.T; ++t) {
    double mean = 0.0;
    for (int k = 0; k < 4; ++k) {
      EXPECT_GE(map.token_at(t, k), 0.0);
      EXPECT_LE(map.token_at(t, k), std::log(16.0) + 1e-12);
      mean += map.token_at(t, k) / 4;
    }
    EXPECT_NEAR(map.item[t], mean, 1e-12);
  }
  const EntropyMap s = smooth_entropy(map);
  for (double h : s.token) {
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(16.0) + 1e-12);
  }
}

TEST(ComputeEntropy, PadPositionsExcluded) {
  ModelConfig c = toy_config(3, 8, 8, 1);
  c.pad = true;
  c.init_std = 0.3;
  Model m(c);
  m.init_parameters(9);
  const std::vector<SemanticId> seq{SemanticId{{1, 2, 8}}, SemanticId{{0, 8, 8}}};
  const EntropyMap map = compute_entropy(m, seq);
  EXPECT_EQ(map.pad, (std::vector<std::uint8_t>{0, 0, 1, 0, 1, 1}));
  EXPECT_EQ(map.token_at(0, 2), 0.0);
  EXPECT_NEAR(map.item[1], map.token_at(1, 0), 1e-15);
  Rng rng(1);
  const MaskPlan p = select_top_entropy(map, 6, Granularity::kToken, rng);
  EXPECT_EQ(p.pairs.size(), 3u);
}

EntropyMap hand_map(int T, int K, const std::vector<double>& token) {
  EntropyMap m;
  m.T = T;
  m.K = K;
  m.token = token;
  m.item.assign(static_cast<std::size_t>(T), 0.0);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < K; ++k) m.item[t] += token[static_cast<std::size_t>(t * K + k)] / K;
  return m;
}

TEST(SmoothEntropy, ConstantAndDegenerate) {
  const EntropyMap c = hand_map(5, 2, std::vector<double>(10, 1.7));
  for (double h : smooth_entropy(c).token) EXPECT_NEAR(h, 1.7, 1e-15);
  for (double h : smooth_entropy(c).item) EXPECT_NEAR(h, 1.7, 1e-15);

  const EntropyMap m = hand_map(4, 2, {0.1, 0.3, 1.0, 2.0, 0.4, 0.2, 1.5, 0.5});
  const EntropyMap w1 = smooth_entropy(m, {1, 2.0, 0.2});
  EXPECT_EQ(w1.item, m.item);
  EXPECT_EQ(smooth_entropy(m, {3, 2.0, 0.0}).token, m.token);
}

TEST(SmoothEntropy, HandComputedFormula) {
  const EntropyMap m = hand_map(4, 2, {0.1, 0.3, 1.0, 2.0, 0.4, 0.2, 1.5, 0.5});
  // item entropies: 0.2, 1.5, 0.3, 1.0
  const double h0 = 0.2;
  const double h1 = (1.5 + 0.2 / 2) / 1.5;
  const double h2 = (0.3 + 1.5 / 2 + 0.2 / 4) / 1.75;
  const double h3 = (1.0 + 0.3 / 2 + 1.5 / 4) / 1.75;
  const EntropyMap s = smooth_entropy(m);
  const std::vector<double> H{h0, h1, h2, h3};
  for (int t = 0; t < 4; ++t) {
    EXPECT_NEAR(s.item[t], H[t], 1e-15);
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(s.token_at(t, k), 0.8 * m.token_at(t, k) + 0.2 * H[t], 1e-15);
  }
  EXPECT_THROW(smooth_entropy(m, {0, 2.0, 0.2}), Error);
  EXPECT_THROW(smooth_entropy(m, {3, 0.5, 0.2}), Error);
  EXPECT_THROW(smooth_entropy(m, {3, 2.0, 1.2}), Error);
}

TEST(SelectTopEntropy, ArgmaxAndSaturation) {
  EntropyMap m = hand_map(3, 1, {0.1, 2.0, 0.5});
  Rng rng(1);
  const MaskPlan p = select_top_entropy(m, 1, Granularity::kItem, rng);
  ASSERT_EQ(p.pairs.size(), 1u);
  EXPECT_EQ(p.pairs[0].t, 1u);

  const EntropyMap full = hand_map(3, 4, std::vector<double>(12, 0.5));
  Rng r2(2);
  const MaskPlan sat = plan_entropy(full, 1.0, Granularity::kToken, r2);
  EXPECT_LE(sat.pairs.size(), 12u);
  EXPECT_EQ(select_top_entropy(full, 12, Granularity::kToken, r2).pairs.size(), 12u);
}

TEST(SelectTopEntropy, TiesPreferEarlierPositions) {
  const EntropyMap m = hand_map(3, 2, std::vector<double>(6, 1.0));
  Rng rng(3);
  const MaskPlan p = select_top_entropy(m, 3, Granularity::kToken, rng);
  EXPECT_EQ(p.pairs, (std::vector<MaskedPair>{{0, 0}, {0, 1}, {1, 0}}));
}

TEST(SelectTopEntropy, MatchesBruteForceAndIsScaleInvariant) {
  Rng rng = make_rng(10, {1});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> tok(24);
    for (double& v : tok) v = std::round(uniform01(rng) * 8.0) / 4.0;  // coarse values force ties
    const EntropyMap m = hand_map(6, 4, tok);
    Rng r(1);
    const MaskPlan p = select_top_entropy(m, 5, Granularity::kToken, r);
    // Oracle: repeatedly scan for the largest remaining value, first in (t, k) order.
    std::vector<bool> used(24, false);
    std::set<MaskedPair> want;
    for (int n = 0; n < 5; ++n) {
      int best = -1;
      for (int i = 0; i < 24; ++i)
        if (!used[i] && (best < 0 || tok[i] > tok[best])) best = i;
      used[best] = true;
      want.insert({static_cast<std::uint32_t>(best / 4), static_cast<std::uint32_t>(best % 4)});
    }
    EXPECT_EQ(std::set<MaskedPair>(p.pairs.begin(), p.pairs.end()), want);

    EntropyMap scaled = m;
    const double c = 0.1 + 5.0 * uniform01(rng);
    for (double& v : scaled.token) v *= c;
    for (double& v : scaled.item) v *= c;
    Rng r2(1);
    EXPECT_EQ(select_top_entropy(scaled, 5, Granularity::kToken, r2).pairs, p.pairs);
    Rng r3(1), r4(1);
    EXPECT_EQ(select_top_entropy(scaled, 2, Granularity::kItem, r3).pairs,
              select_top_entropy(m, 2, Granularity::kItem, r4).pairs);
  }
}

TEST(SelectTopEntropy, MixedSingleCodewordIsHighestInItem) {
  const EntropyMap m = hand_map(2, 3, {0.1, 0.9, 0.2, 0.0, 0.0, 0.0});
  int single = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const MaskPlan p = select_top_entropy(m, 1, Granularity::kMixed, rng);
    if (p.pairs.size() == 1) {
      EXPECT_EQ(p.pairs[0], (MaskedPair{0, 1}));
      ++single;
    } else {
      EXPECT_EQ(p.pairs.size(), 3u);
    }
  }
  EXPECT_GT(single, 0);
  EXPECT_LT(single, 50);
}

TEST(PlanEntropy, BoundsOverRandomConfigs) {
  Rng rng = make_rng(11, {1});
  for (int trial = 0; trial < 1000; ++trial) {
    const int T = static_cast<int>(uniform_int(rng, 1, 20));
    const int K = static_cast<int>(uniform_int(rng, 1, 6));
    std::vector<double> tok(static_cast<std::size_t>(T * K));
    for (double& v : tok) v = uniform01(rng);
    const double gamma = 0.01 + 0.99 * uniform01(rng);
    const auto g = static_cast<Granularity>(uniform_int(rng, 0, 2));
    const MaskPlan p = plan_entropy(hand_map(T, K, tok), gamma, g, rng);
    check_plan(p, T, K, gamma, g);
    EXPECT_EQ(p.policy, PolicyKind::kEntropy);
  }
}

TEST(ApplyMask, ShapesAndTargets) {
  Rng rng = make_rng(12, {1});
  const auto seq = random_sequence(6, 4, 16, rng);
  EXPECT_TRUE(apply_mask(seq, MaskPlan{}, 4).masked.empty());
  EXPECT_EQ(apply_mask(seq, MaskPlan{}, 4).items, seq);

  MaskPlan item;
  for (std::uint32_t k = 0; k < 4; ++k) item.pairs.push_back({2, k});
  const MaskedSequence a = apply_mask(seq, item, 4);
  for (std::size_t t = 0; t < 6; ++t)
    for (int k = 0; k < 4; ++k) EXPECT_EQ(a.is_masked(t, k, 4), t == 2);

  for (int trial = 0; trial < 100; ++trial) {
    const MaskPlan p = plan_random(6, 4, 0.5, Granularity::kToken, rng);
    const MaskedSequence s = apply_mask(seq, p, 4);
    EXPECT_EQ(s.items, seq);
    const auto terms = reconstruction_terms(s, toy_config(4, 16));
    ASSERT_EQ(terms.size(), p.pairs.size());
    for (std::size_t i = 0; i < terms.size(); ++i) {
      EXPECT_EQ(terms[i].target, seq[terms[i].t][static_cast<int>(terms[i].k)]);
      EXPECT_TRUE(std::binary_search(p.pairs.begin(), p.pairs.end(), MaskedPair{terms[i].t, terms[i].k}));
    }
  }
  MaskPlan bad;
  bad.pairs.push_back({6, 0});
  EXPECT_THROW(apply_mask(seq, bad, 4), Error);
}

TEST(EntropyDump, OneLinePerCodeword) {
  const EntropyMap m = hand_map(2, 2, {0.1, 0.2, 0.3, 0.4});
  MaskPlan p;
  p.pairs.push_back({1, 0});
  const std::string out = format_entropy_jsonl("u1", m, p);
  EXPECT_EQ(std::count(out.begin(), out.end(), '\n'), 4);
  EXPECT_NE(out.find(R"("masked":true,"t":1,"user":"u1")"), std::string::npos) << out;
}

}  // namespace
}  // namespace mhl
