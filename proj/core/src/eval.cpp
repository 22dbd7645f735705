#include "mhl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mhl/error.hpp"
#include "mhl/parallel.hpp"

namespace mhl {
namespace {

// 1-based rank of target within the first K entries, 0 if absent.
std::size_t rank_within(const std::vector<ItemIndex>& ranked, ItemIndex target, int K) {
  if (K <= 0) throw_config("metric cutoff K must be positive, got " + std::to_string(K));
  const std::size_t n = std::min(ranked.size(), static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < n; ++i)
    if (ranked[i] == target) return i + 1;
  return 0;
}

std::size_t k_slot(const std::vector<int>& ks, int K) {
  const auto it = std::find(ks.begin(), ks.end(), K);
  if (it == ks.end()) throw_config("metrics report has no entry for K=" + std::to_string(K));
  return static_cast<std::size_t>(it - ks.begin());
}

}  // namespace

int recall_at_k(const std::vector<ItemIndex>& ranked, ItemIndex target, int K) {
  return rank_within(ranked, target, K) > 0 ? 1 : 0;
}

double ndcg_at_k(const std::vector<ItemIndex>& ranked, ItemIndex target, int K) {
  const std::size_t r = rank_within(ranked, target, K);
  return r == 0 ? 0.0 : 1.0 / std::log2(static_cast<double>(r) + 1.0);
}

std::vector<EvalCase> make_cases(const SplitCorpus& split, const Catalog& catalog, EvalTarget target) {
  std::vector<EvalCase> cases;
  cases.reserve(split.users.size());
  for (const UserSplit& u : split.users) {
    EvalCase c;
    c.user_id = u.user_id;
    const auto context = target == EvalTarget::kTest ? u.test_context() : u.val_context();
    if (context.empty()) continue;
    for (const auto& item : context) c.context.push_back(catalog.index_of(item));
    c.target = catalog.index_of(target == EvalTarget::kTest ? u.test_target : u.val_target);
    cases.push_back(std::move(c));
  }
  return cases;
}

double MetricsReport::recall_at(int K) const { return recall[k_slot(ks, K)]; }
double MetricsReport::ndcg_at(int K) const { return ndcg[k_slot(ks, K)]; }

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json metrics = nlohmann::json::object();
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    metrics["recall@" + std::to_string(r.ks[i])] = r.recall[i];
    metrics["ndcg@" + std::to_string(r.ks[i])] = r.ndcg[i];
  }
  return {{"ks", r.ks},
          {"metrics", metrics},
          {"n_users", r.n_users},
          {"protocol", r.protocol},
          {"metadata", r.metadata}};
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    r.ks = j.at("ks").get<std::vector<int>>();
    for (int K : r.ks) {
      r.recall.push_back(j.at("metrics").at("recall@" + std::to_string(K)).get<double>());
      r.ndcg.push_back(j.at("metrics").at("ndcg@" + std::to_string(K)).get<double>());
    }
    r.n_users = j.at("n_users").get<std::size_t>();
    r.protocol = j.at("protocol").get<std::string>();
    if (j.contains("metadata")) r.metadata = j.at("metadata");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw_data(std::string("metrics report: ") + e.what());
  }
}

MetricsReport merge_reports(const MetricsReport& a, const MetricsReport& b) {
  if (a.ks != b.ks) throw_config("merge_reports: K sets differ");
  MetricsReport r = a;
  r.n_users = a.n_users + b.n_users;
  if (r.n_users == 0) return r;
  const double wa = static_cast<double>(a.n_users), wb = static_cast<double>(b.n_users);
  const double n = static_cast<double>(r.n_users);
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    r.recall[i] = (a.recall[i] * wa + b.recall[i] * wb) / n;
    r.ndcg[i] = (a.ndcg[i] * wa + b.ndcg[i] * wb) / n;
  }
  return r;
}

MetricsReport evaluate_ranker(const std::vector<EvalCase>& cases, const Ranker& ranker, const std::vector<int>& ks,
                              const std::string& protocol) {
  if (ks.empty()) throw_config("evaluate: empty K set");
  for (int K : ks)
    if (K <= 0) throw_config("metric cutoff K must be positive, got " + std::to_string(K));
  const auto kmax = static_cast<std::size_t>(*std::max_element(ks.begin(), ks.end()));
  const std::size_t nk = ks.size();

  std::vector<double> hits(cases.size() * nk), gains(cases.size() * nk);
  parallel_for(cases.size(), [&](std::size_t c) {
    const std::vector<ItemIndex> ranked = ranker(cases[c], kmax);
    for (std::size_t i = 0; i < nk; ++i) {
      hits[c * nk + i] = recall_at_k(ranked, cases[c].target, ks[i]);
      gains[c * nk + i] = ndcg_at_k(ranked, cases[c].target, ks[i]);
    }
  });

  MetricsReport r;
  r.ks = ks;
  r.protocol = protocol;
  r.n_users = cases.size();
  r.recall.assign(nk, 0.0);
  r.ndcg.assign(nk, 0.0);
  if (cases.empty()) return r;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    for (std::size_t i = 0; i < nk; ++i) {
      r.recall[i] += hits[c * nk + i];
      r.ndcg[i] += gains[c * nk + i];
    }
  }
  for (std::size_t i = 0; i < nk; ++i) {
    r.recall[i] /= static_cast<double>(cases.size());
    r.ndcg[i] /= static_cast<double>(cases.size());
  }
  return r;
}

MetricsReport evaluate(const Decoder& decoder, const std::vector<EvalCase>& cases, const std::vector<int>& ks,
                       const std::string& protocol) {
  const Ranker ranker = [&](const EvalCase& c, std::size_t topk) {
    std::vector<ItemIndex> out;
    for (const ScoredItem& s : decoder.rank(c.context, topk)) out.push_back(s.item);
    return out;
  };
  return evaluate_ranker(cases, ranker, ks, protocol);
}

std::optional<double> relative_change_pct(double full, double truncated) {
  if (full == 0.0) return std::nullopt;
  return (truncated - full) / full * 100.0;
}

nlohmann::json to_json(const PilotResult& r) {
  nlohmann::json j = {{"full", to_json(r.full)}, {"truncated", to_json(r.truncated)}};
  if (r.ndcg10_change_pct)
    j["ndcg10_change_pct"] = *r.ndcg10_change_pct;
  else
    j["ndcg10_change_pct"] = "undefined";
  return j;
}

PilotResult pilot_truncation(const Decoder& decoder, const SplitCorpus& split, int min_len, int drop_last,
                             const std::vector<int>& ks) {
  const TruncationResult trunc = truncate_long(split, min_len, drop_last);
  if (trunc.split.users.empty())
    throw_data("pilot_truncation: no user history is longer than " + std::to_string(min_len));

  // Same users on both sides: the full side is restricted to the users that
  // survived truncation.
  std::unordered_set<std::string> kept;
  for (const UserSplit& t : trunc.split.users) kept.insert(t.user_id);
  SplitCorpus full_side;
  for (const UserSplit& u : split.users)
    if (kept.contains(u.user_id)) full_side.users.push_back(u);

  std::vector<int> with10 = ks;
  if (std::find(with10.begin(), with10.end(), 10) == with10.end()) with10.push_back(10);

  PilotResult r;
  r.full = evaluate(decoder, make_cases(full_side, decoder.catalog(), EvalTarget::kTest), with10, "full");
  r.truncated = evaluate(decoder, make_cases(trunc.split, decoder.catalog(), EvalTarget::kTest), with10, "truncated");
  r.ndcg10_change_pct = relative_change_pct(r.full.ndcg_at(10), r.truncated.ndcg_at(10));
  return r;
}

std::string format_metric_csv(const std::vector<MetricPoint>& points) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,metric,value\n";
  for (const MetricPoint& p : points) out << p.epoch << ',' << p.metric << ',' << p.value << '\n';
  return out.str();
}

}  // namespace mhl
