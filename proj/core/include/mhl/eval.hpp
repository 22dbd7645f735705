#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhl/corpus.hpp"
#include "mhl/decode.hpp"

namespace mhl {

int recall_at_k(const std::vector<ItemIndex>& ranked, ItemIndex target, int K);
double ndcg_at_k(const std::vector<ItemIndex>& ranked, ItemIndex target, int K);

struct EvalCase {
  std::string user_id;
  std::vector<ItemIndex> context;
  ItemIndex target = 0;
};

enum class EvalTarget { kValidation, kTest };

/// One case per split user. Items missing from the catalog are a data error.
std::vector<EvalCase> make_cases(const SplitCorpus& split, const Catalog& catalog, EvalTarget target);

struct MetricsReport {
  std::vector<int> ks;
  std::vector<double> recall;  // parallel to ks
  std::vector<double> ndcg;
  std::size_t n_users = 0;
  std::string protocol = "full";
  nlohmann::json metadata = nlohmann::json::object();

  double recall_at(int K) const;
  double ndcg_at(int K) const;
};

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_report_from_json(const nlohmann::json& j);

/// User-count-weighted combination of reports over disjoint user sets.
MetricsReport merge_reports(const MetricsReport& a, const MetricsReport& b);

using Ranker = std::function<std::vector<ItemIndex>(const EvalCase&, std::size_t topk)>;

/// Ranks top-max(ks) per case and averages the metrics. Cases run in
/// parallel; the reduction is in case order.
MetricsReport evaluate_ranker(const std::vector<EvalCase>& cases, const Ranker& ranker,
                              const std::vector<int>& ks = {5, 10}, const std::string& protocol = "full");
MetricsReport evaluate(const Decoder& decoder, const std::vector<EvalCase>& cases,
                       const std::vector<int>& ks = {5, 10}, const std::string& protocol = "full");

/// Percentage change from full to truncated; nullopt when full == 0.
std::optional<double> relative_change_pct(double full, double truncated);

struct PilotResult {
  MetricsReport full;
  MetricsReport truncated;
  std::optional<double> ndcg10_change_pct;
};

nlohmann::json to_json(const PilotResult& r);

/// Evaluates users with long histories twice: on their full test context
/// and after dropping their last `drop_last` events.
PilotResult pilot_truncation(const Decoder& decoder, const SplitCorpus& split, int min_len = 20, int drop_last = 15,
                             const std::vector<int>& ks = {5, 10});

struct MetricPoint {
  int epoch = 0;
  std::string metric;
  double value = 0.0;
};

/// "epoch,metric,value" rows.
std::string format_metric_csv(const std::vector<MetricPoint>& points);

}  // namespace mhl
