#include "mhl/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "mhl/error.hpp"

namespace mhl {

Granularity parse_granularity(const std::string& s) {
  if (s == "item") return Granularity::kItem;
  if (s == "token") return Granularity::kToken;
  if (s == "mixed") return Granularity::kMixed;
  throw_config("granularity: expected item|token|mixed, got '" + s + "'");
}

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::kItem: return "item";
    case Granularity::kToken: return "token";
    case Granularity::kMixed: return "mixed";
  }
  return "?";
}

PolicyKind parse_policy(const std::string& s) {
  if (s == "random") return PolicyKind::kRandom;
  if (s == "entropy") return PolicyKind::kEntropy;
  if (s == "none") return PolicyKind::kNone;
  throw_config("policy: expected random|entropy|none, got '" + s + "'");
}

std::string to_string(PolicyKind p) {
  switch (p) {
    case PolicyKind::kRandom: return "random";
    case PolicyKind::kEntropy: return "entropy";
    case PolicyKind::kNone: return "none";
  }
  return "?";
}

std::size_t MaskPlan::items_touched() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (i == 0 || pairs[i].t != pairs[i - 1].t) ++n;
  return n;
}

int mask_upper_bound(int T, int K, double gamma, Granularity g) {
  if (T <= 0 || gamma <= 0.0) return 0;
  const double raw = g == Granularity::kToken ? gamma * K * T : gamma * T;
  return static_cast<int>(std::floor(raw + 1e-9));
}

namespace {

/// First n entries of a uniformly random permutation of [0, total).
std::vector<std::uint32_t> sample_without_replacement(std::uint32_t total, std::uint32_t n, Rng& rng) {
  std::vector<std::uint32_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0u);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto j = static_cast<std::uint32_t>(uniform_int(rng, i, total - 1));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return idx;
}

void add_item(MaskPlan& plan, std::uint32_t t, int K) {
  for (int k = 0; k < K; ++k) plan.pairs.push_back(MaskedPair{t, static_cast<std::uint32_t>(k)});
}

void finalize(MaskPlan& plan) {
  std::sort(plan.pairs.begin(), plan.pairs.end());
  plan.pairs.erase(std::unique(plan.pairs.begin(), plan.pairs.end()), plan.pairs.end());
}

int draw_n(int upper, Rng& rng) { return upper <= 0 ? 0 : static_cast<int>(uniform_int(rng, 1, static_cast<std::uint64_t>(upper))); }

}  // namespace

MaskPlan plan_random(int T, int K, double gamma, Granularity g, Rng& rng) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw_config("plan_random: gamma must be in (0, 1]");
  if (T < 1 || K < 1) throw_config("plan_random: T and K must be >= 1");
  MaskPlan plan;
  plan.granularity = g;
  plan.policy = PolicyKind::kRandom;
  plan.gamma = gamma;
  plan.n_drawn = draw_n(mask_upper_bound(T, K, gamma, g), rng);
  if (plan.n_drawn == 0) return plan;
  const auto n = static_cast<std::uint32_t>(plan.n_drawn);
  if (g == Granularity::kToken) {
    for (std::uint32_t flat : sample_without_replacement(static_cast<std::uint32_t>(T * K), n, rng))
      plan.pairs.push_back(MaskedPair{flat / static_cast<std::uint32_t>(K), flat % static_cast<std::uint32_t>(K)});
  } else {
    for (std::uint32_t t : sample_without_replacement(static_cast<std::uint32_t>(T), n, rng)) {
      if (g == Granularity::kItem || uniform01(rng) < 0.5) {
        add_item(plan, t, K);
      } else {
        plan.pairs.push_back(MaskedPair{t, static_cast<std::uint32_t>(uniform_int(rng, 0, static_cast<std::uint64_t>(K - 1)))});
      }
    }
  }
  finalize(plan);
  return plan;
}

void SmoothingParams::validate() const {
  if (window < 1) throw_config("smoothing: window must be >= 1");
  if (!(decay >= 1.0)) throw_config("smoothing: decay must be >= 1");
  if (!(mix >= 0.0 && mix <= 1.0)) throw_config("smoothing: mix must be in [0, 1]");
}

double softmax_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& logits, double tau) {
  const Eigen::RowVectorXd lp = log_softmax(logits, tau);
  double h = 0.0;
  for (Eigen::Index i = 0; i < lp.size(); ++i) {
    const double p = std::exp(lp(i));
    if (p > 0.0) h -= p * lp(i);
  }
  return std::max(h, 0.0);
}

EntropyMap compute_entropy(const Model& model, const std::vector<SemanticId>& sequence) {
  return compute_entropy(model, sequence, model.config().temperature);
}

EntropyMap compute_entropy(const Model& model, const std::vector<SemanticId>& sequence, double tau) {
  const ModelConfig& cfg = model.config();
  if (!(tau > 0.0)) throw_config("compute_entropy: tau must be > 0");
  const ForwardCache cache = model.forward(MaskedSequence::unmasked(sequence), nullptr);
  EntropyMap map;
  map.T = static_cast<int>(sequence.size());
  map.K = cfg.K();
  map.token.assign(static_cast<std::size_t>(map.T * map.K), 0.0);
  map.pad.assign(map.token.size(), 0);
  map.item.assign(static_cast<std::size_t>(map.T), 0.0);
  for (int k = 0; k < map.K; ++k) {
    RowMatrix logits = cache.states * model.tensor(model.head_weight_id(k, HeadSet::kReconstruct));
    logits.rowwise() += model.tensor(model.head_bias_id(k, HeadSet::kReconstruct)).row(0);
    for (int t = 0; t < map.T; ++t) {
      const auto idx = static_cast<std::size_t>(t * map.K + k);
      if (cfg.pad && sequence[t][k] == cfg.codebook_sizes[k]) {
        map.pad[idx] = 1;
        continue;
      }
      map.token[idx] = softmax_entropy(logits.row(t), tau);
    }
  }
  for (int t = 0; t < map.T; ++t) {
    double sum = 0.0;
    int used = 0;
    for (int k = 0; k < map.K; ++k) {
      const auto idx = static_cast<std::size_t>(t * map.K + k);
      if (map.pad[idx]) continue;
      sum += map.token[idx];
      ++used;
    }
    map.item[t] = used ? sum / used : 0.0;
  }
  return map;
}

EntropyMap smooth_entropy(const EntropyMap& map, const SmoothingParams& p) {
  p.validate();
  EntropyMap out = map;
  out.smoothed = true;
  out.params = p;
  for (int t = 0; t < map.T; ++t) {
    double num = 0.0, den = 0.0, w = 1.0;
    for (int d = 0; d <= std::min(p.window - 1, t); ++d) {
      num += map.item[t - d] * w;
      den += w;
      w /= p.decay;
    }
    const double h = num / den;
    out.item[t] = h;
    for (int k = 0; k < map.K; ++k) {
      const auto idx = static_cast<std::size_t>(t * map.K + k);
      if (!map.pad.empty() && map.pad[idx]) continue;
      out.token[idx] = (1.0 - p.mix) * map.token[idx] + p.mix * h;
    }
  }
  return out;
}

MaskPlan select_top_entropy(const EntropyMap& map, int n, Granularity g, Rng& rng) {
  MaskPlan plan;
  plan.granularity = g;
  plan.policy = PolicyKind::kEntropy;
  plan.n_drawn = n;
  const int K = map.K;
  auto is_pad = [&](int t, int k) { return !map.pad.empty() && map.pad[static_cast<std::size_t>(t * K + k)] != 0; };

  if (g == Granularity::kToken) {
    std::vector<std::uint32_t> order;
    for (int t = 0; t < map.T; ++t)
      for (int k = 0; k < K; ++k)
        if (!is_pad(t, k)) order.push_back(static_cast<std::uint32_t>(t * K + k));
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(n, 0)), order.size());
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return map.token[a] > map.token[b]; });
    for (std::size_t i = 0; i < take; ++i)
      plan.pairs.push_back(MaskedPair{order[i] / static_cast<std::uint32_t>(K), order[i] % static_cast<std::uint32_t>(K)});
  } else {
    std::vector<std::uint32_t> order(static_cast<std::size_t>(map.T));
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return map.item[a] > map.item[b]; });
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(n, 0)), order.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::uint32_t t = order[i];
      if (g == Granularity::kItem || uniform01(rng) < 0.5) {
        add_item(plan, t, K);
      } else {
        int best = -1;
        for (int k = 0; k < K; ++k) {
          if (is_pad(static_cast<int>(t), k)) continue;
          if (best < 0 || map.token_at(static_cast<int>(t), k) > map.token_at(static_cast<int>(t), best)) best = k;
        }
        if (best >= 0) plan.pairs.push_back(MaskedPair{t, static_cast<std::uint32_t>(best)});
      }
    }
  }
  finalize(plan);
  return plan;
}

MaskPlan plan_entropy(const EntropyMap& map, double gamma, Granularity g, Rng& rng) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw_config("plan_entropy: gamma must be in (0, 1]");
  const int n = draw_n(mask_upper_bound(map.T, map.K, gamma, g), rng);
  MaskPlan plan = select_top_entropy(map, n, g, rng);
  plan.gamma = gamma;
  return plan;
}

MaskedSequence apply_mask(const std::vector<SemanticId>& sequence, const MaskPlan& plan, int K) {
  MaskedSequence out;
  out.items = sequence;
  if (plan.pairs.empty()) return out;
  out.masked.assign(sequence.size() * static_cast<std::size_t>(K), 0);
  for (const auto& p : plan.pairs) {
    if (p.t >= sequence.size() || p.k >= static_cast<std::uint32_t>(K)) {
      throw_data("apply_mask: plan references (" + std::to_string(p.t) + ", " + std::to_string(p.k) +
                 ") outside the " + std::to_string(sequence.size()) + "x" + std::to_string(K) + " sequence");
    }
    out.masked[p.t * static_cast<std::size_t>(K) + p.k] = 1;
  }
  return out;
}

std::string format_entropy_jsonl(const std::string& user_id, const EntropyMap& map, const MaskPlan& plan) {
  std::string out;
  for (int t = 0; t < map.T; ++t) {
    for (int k = 0; k < map.K; ++k) {
      const bool masked = std::binary_search(plan.pairs.begin(), plan.pairs.end(),
                                             MaskedPair{static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(k)});
      out += nlohmann::json{{"user", user_id}, {"t", t}, {"k", k}, {"entropy", map.token_at(t, k)}, {"masked", masked}}.dump();
      out += '\n';
    }
  }
  return out;
}

}  // namespace mhl
