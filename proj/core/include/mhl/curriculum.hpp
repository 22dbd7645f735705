#pragma once

#include <limits>
#include <string>

#include <nlohmann/json.hpp>

#include "mhl/masking.hpp"

namespace mhl {

enum class Phase { kWarmup = 1, kEntropy = 2, kFinetune = 3 };

/// Mask-strategy x curriculum combinations of the ablation grid.
///   kFull            random warm-up -> entropy with decaying ratio -> no mask
///   kDirect          no masking at all (pure next-item training)
///   kRandom          static random masking at gamma0
///   kEntropy         static entropy-guided masking at gamma0
///   kRandomThenInf   random masking with decaying ratio -> no mask
///   kEntropyThenInf  entropy masking with decaying ratio -> no mask
enum class CurriculumStrategy { kFull, kDirect, kRandom, kEntropy, kRandomThenInf, kEntropyThenInf };

CurriculumStrategy parse_strategy(const std::string& s);
std::string to_string(CurriculumStrategy s);
std::string to_string(Phase p);

struct CurriculumParams {
  double gamma0 = 0.15;
  int warmup_epochs = 5;
  int plateau_patience = 5;     // stale evaluations before one ratio decay
  double decay_fraction = 0.1;  // each decay removes decay_fraction * gamma0
  int finetune_patience = 20;   // stale evaluations before stopping
  double improve_eps = 1e-6;    // improvement must exceed best by more than this
  Granularity granularity = Granularity::kToken;
  CurriculumStrategy strategy = CurriculumStrategy::kFull;

  void validate() const;
  friend bool operator==(const CurriculumParams&, const CurriculumParams&) = default;
};

struct ScheduleState {
  CurriculumParams params;
  Phase phase = Phase::kWarmup;
  double gamma = 0.0;
  int warmup_epochs_remaining = 0;
  int plateau_counter = 0;
  int decays = 0;
  double best_val_metric = -std::numeric_limits<double>::infinity();
  int finetune_patience_counter = 0;
  int epoch = 0;

  double gamma0() const { return params.gamma0; }
  friend bool operator==(const ScheduleState&, const ScheduleState&) = default;
};

struct MaskPolicy {
  PolicyKind policy = PolicyKind::kNone;
  double gamma = 0.0;
  Granularity granularity = Granularity::kToken;
};

/// Phase I with gamma = gamma0. kDirect starts in phase III at gamma 0 and
/// accepts gamma0 == 0; every other strategy requires gamma0 in (0, 1].
ScheduleState init_schedule(const CurriculumParams& params);
ScheduleState init_schedule(double gamma0 = 0.15, int warmup_epochs = 5, Granularity g = Granularity::kToken);

MaskPolicy current_policy(const ScheduleState& s);

struct AdvanceResult {
  ScheduleState state;
  bool stop = false;
  bool improved = false;
};

/// Consumes one validation NDCG@10 and moves the state machine one epoch.
AdvanceResult advance(const ScheduleState& s, double val_metric);

nlohmann::json to_json(const ScheduleState& s);
ScheduleState schedule_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CurriculumParams& p);
CurriculumParams curriculum_params_from_json(const nlohmann::json& j);

}  // namespace mhl
