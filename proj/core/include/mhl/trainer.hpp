#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhl/checkpoint.hpp"
#include "mhl/config.hpp"
#include "mhl/curriculum.hpp"
#include "mhl/eval.hpp"
#include "mhl/model.hpp"
#include "mhl/optimizer.hpp"

namespace mhl {

struct TrainData {
  std::vector<std::vector<SemanticId>> sequences;  // one per training user, clipped to max_seq_len
  std::vector<EvalCase> val_cases;
};

/// Training sequences are each user's train prefix (plus train-only users),
/// keeping the most recent max_seq_len items; sequences shorter than 2 are
/// skipped since they carry no next-item term.
TrainData make_train_data(const SplitCorpus& split, const Catalog& catalog, int max_seq_len);

struct EpochRecord {
  int epoch = 0;
  Phase phase = Phase::kWarmup;
  PolicyKind policy = PolicyKind::kNone;
  double gamma = 0.0;
  std::int64_t steps = 0;  // optimizer steps after this epoch
  double loss = 0.0;       // mean total batch loss
  double loss_next = 0.0;
  double loss_mask = 0.0;
  double masked_codewords = 0.0;  // mean masked non-PAD codewords per sequence
  std::size_t reconstruction_evals = 0;
  double val_ndcg10 = 0.0;
  bool improved = false;   // schedule's notion, against the best seen in any phase
  bool new_best = false;   // these weights became the run's selected model
};

nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

class Trainer {
 public:
  /// The model must already be sized for the catalog. Call initialize()
  /// for a fresh run or restore() to resume.
  Trainer(const RunConfig& cfg, Model& model, const Catalog& catalog, const ItemGraph& graph, TrainData data);

  void initialize();
  /// Runs one epoch plus validation and schedule update.
  const EpochRecord& run_epoch();
  /// Runs epochs until the curriculum stops or max_epochs is reached.
  /// `on_epoch` fires after each epoch (checkpointing hook).
  void run(const std::function<void(const Trainer&, const EpochRecord&)>& on_epoch = {});

  bool finished() const { return finished_; }
  const std::string& stop_reason() const { return stop_reason_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const ScheduleState& schedule() const { return schedule_; }
  int best_epoch() const { return best_epoch_; }
  const Eigen::VectorXd& best_params() const { return best_params_; }
  std::int64_t total_steps() const { return total_steps_; }
  std::size_t batches_per_epoch() const;

  Checkpoint snapshot(const nlohmann::json& config_echo) const;
  void restore(const Checkpoint& ck);

 private:
  std::vector<TrainSequence> build_batch(const std::vector<std::size_t>& members, const MaskPolicy& policy,
                                         int epoch, double* masked_codewords) const;
  double validate() const;

  RunConfig cfg_;
  Model& model_;
  const Catalog& catalog_;
  const ItemGraph& graph_;
  TrainData data_;
  LossWeights weights_;
  LrSchedule lr_;
  AdamW opt_;
  ScheduleState schedule_;
  std::vector<EpochRecord> history_;
  Eigen::VectorXd best_params_;
  int best_epoch_ = 0;
  // Selection prefers mask-free epochs: once phase III starts, only its epochs compete.
  double best_val_ = -std::numeric_limits<double>::infinity();
  bool best_from_finetune_ = false;
  bool finished_ = false;
  std::string stop_reason_;
  std::int64_t total_steps_ = 0;
};

}  // namespace mhl
