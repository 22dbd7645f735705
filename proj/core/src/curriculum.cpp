#include "mhl/curriculum.hpp"

#include <cmath>

#include "mhl/error.hpp"

namespace mhl {

using json = nlohmann::json;

CurriculumStrategy parse_strategy(const std::string& s) {
  if (s == "full" || s == "R->E->Inf") return CurriculumStrategy::kFull;
  if (s == "direct" || s == "none") return CurriculumStrategy::kDirect;
  if (s == "random") return CurriculumStrategy::kRandom;
  if (s == "entropy") return CurriculumStrategy::kEntropy;
  if (s == "random_inf" || s == "R->Inf") return CurriculumStrategy::kRandomThenInf;
  if (s == "entropy_inf" || s == "E->Inf") return CurriculumStrategy::kEntropyThenInf;
  throw_config("curriculum: unknown strategy '" + s + "'");
}

std::string to_string(CurriculumStrategy s) {
  switch (s) {
    case CurriculumStrategy::kFull: return "full";
    case CurriculumStrategy::kDirect: return "direct";
    case CurriculumStrategy::kRandom: return "random";
    case CurriculumStrategy::kEntropy: return "entropy";
    case CurriculumStrategy::kRandomThenInf: return "random_inf";
    case CurriculumStrategy::kEntropyThenInf: return "entropy_inf";
  }
  return "?";
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::kWarmup: return "I";
    case Phase::kEntropy: return "II";
    case Phase::kFinetune: return "III";
  }
  return "?";
}

void CurriculumParams::validate() const {
  if (strategy == CurriculumStrategy::kDirect) {
    if (!(gamma0 >= 0.0 && gamma0 <= 1.0)) throw_config("curriculum: gamma0 must be in [0, 1]");
  } else if (!(gamma0 > 0.0 && gamma0 <= 1.0)) {
    throw_config("curriculum: gamma0 must be in (0, 1]");
  }
  if (warmup_epochs < 0) throw_config("curriculum: warmup_epochs must be >= 0");
  if (plateau_patience < 1) throw_config("curriculum: plateau_patience must be >= 1");
  if (!(decay_fraction > 0.0 && decay_fraction <= 1.0)) throw_config("curriculum: decay_fraction must be in (0, 1]");
  if (finetune_patience < 1) throw_config("curriculum: finetune_patience must be >= 1");
  if (!(improve_eps >= 0.0)) throw_config("curriculum: improve_eps must be >= 0");
}

namespace {

bool is_static(CurriculumStrategy s) { return s == CurriculumStrategy::kRandom || s == CurriculumStrategy::kEntropy; }

int decays_to_zero(double fraction) { return static_cast<int>(std::ceil(1.0 / fraction - 1e-9)); }

double gamma_after(const CurriculumParams& p, int decays) {
  if (decays >= decays_to_zero(p.decay_fraction)) return 0.0;
  return std::max(0.0, p.gamma0 - decays * (p.decay_fraction * p.gamma0));
}

}  // namespace

ScheduleState init_schedule(const CurriculumParams& params) {
  params.validate();
  ScheduleState s;
  s.params = params;
  s.gamma = params.gamma0;
  s.warmup_epochs_remaining = params.warmup_epochs;
  switch (params.strategy) {
    case CurriculumStrategy::kFull:
    case CurriculumStrategy::kRandom:
      s.phase = Phase::kWarmup;
      break;
    case CurriculumStrategy::kEntropy:
    case CurriculumStrategy::kRandomThenInf:
    case CurriculumStrategy::kEntropyThenInf:
      s.phase = Phase::kEntropy;
      s.warmup_epochs_remaining = 0;
      break;
    case CurriculumStrategy::kDirect:
      s.phase = Phase::kFinetune;
      s.gamma = 0.0;
      s.warmup_epochs_remaining = 0;
      break;
  }
  return s;
}

ScheduleState init_schedule(double gamma0, int warmup_epochs, Granularity g) {
  CurriculumParams p;
  p.gamma0 = gamma0;
  p.warmup_epochs = warmup_epochs;
  p.granularity = g;
  return init_schedule(p);
}

MaskPolicy current_policy(const ScheduleState& s) {
  MaskPolicy mp;
  mp.granularity = s.params.granularity;
  switch (s.phase) {
    case Phase::kWarmup:
      mp.policy = PolicyKind::kRandom;
      mp.gamma = s.params.gamma0;
      break;
    case Phase::kEntropy:
      mp.policy = s.params.strategy == CurriculumStrategy::kRandomThenInf ? PolicyKind::kRandom : PolicyKind::kEntropy;
      mp.gamma = s.gamma;
      break;
    case Phase::kFinetune:
      mp.policy = PolicyKind::kNone;
      mp.gamma = 0.0;
      break;
  }
  return mp;
}

AdvanceResult advance(const ScheduleState& s, double val_metric) {
  if (!std::isfinite(val_metric)) throw_numeric("advance: non-finite validation metric");
  AdvanceResult r;
  r.state = s;
  ScheduleState& n = r.state;
  const CurriculumParams& p = s.params;
  ++n.epoch;
  r.improved = val_metric > s.best_val_metric + p.improve_eps;
  if (r.improved) n.best_val_metric = val_metric;

  if (is_static(p.strategy)) {
    // Fixed ratio; only early stopping applies.
    n.plateau_counter = r.improved ? 0 : n.plateau_counter + 1;
    r.stop = n.plateau_counter >= p.finetune_patience;
    return r;
  }

  switch (s.phase) {
    case Phase::kWarmup:
      if (n.warmup_epochs_remaining > 0) --n.warmup_epochs_remaining;
      if (n.warmup_epochs_remaining == 0) {
        n.phase = Phase::kEntropy;
        n.plateau_counter = 0;
      }
      break;
    case Phase::kEntropy:
      if (r.improved) {
        n.plateau_counter = 0;
      } else if (++n.plateau_counter >= p.plateau_patience) {
        n.plateau_counter = 0;
        ++n.decays;
        n.gamma = gamma_after(p, n.decays);
        if (n.gamma == 0.0) {
          n.phase = Phase::kFinetune;
          n.finetune_patience_counter = 0;
        }
      }
      break;
    case Phase::kFinetune:
      n.finetune_patience_counter = r.improved ? 0 : n.finetune_patience_counter + 1;
      r.stop = n.finetune_patience_counter >= p.finetune_patience;
      break;
  }
  return r;
}

json to_json(const CurriculumParams& p) {
  return json{{"gamma0", p.gamma0},
              {"warmup_epochs", p.warmup_epochs},
              {"plateau_patience", p.plateau_patience},
              {"decay_fraction", p.decay_fraction},
              {"finetune_patience", p.finetune_patience},
              {"improve_eps", p.improve_eps},
              {"granularity", to_string(p.granularity)},
              {"strategy", to_string(p.strategy)}};
}

CurriculumParams curriculum_params_from_json(const json& j) {
  CurriculumParams p;
  p.gamma0 = j.at("gamma0").get<double>();
  p.warmup_epochs = j.at("warmup_epochs").get<int>();
  p.plateau_patience = j.at("plateau_patience").get<int>();
  p.decay_fraction = j.at("decay_fraction").get<double>();
  p.finetune_patience = j.at("finetune_patience").get<int>();
  p.improve_eps = j.at("improve_eps").get<double>();
  p.granularity = parse_granularity(j.at("granularity").get<std::string>());
  p.strategy = parse_strategy(j.at("strategy").get<std::string>());
  return p;
}

json to_json(const ScheduleState& s) {
  return json{{"params", to_json(s.params)},
              {"phase", to_string(s.phase)},
              {"gamma", s.gamma},
              {"warmup_epochs_remaining", s.warmup_epochs_remaining},
              {"plateau_counter", s.plateau_counter},
              {"decays", s.decays},
              {"best_val_metric", std::isfinite(s.best_val_metric) ? json(s.best_val_metric) : json(nullptr)},
              {"finetune_patience_counter", s.finetune_patience_counter},
              {"epoch", s.epoch}};
}

ScheduleState schedule_from_json(const json& j) {
  ScheduleState s;
  s.params = curriculum_params_from_json(j.at("params"));
  const auto phase = j.at("phase").get<std::string>();
  s.phase = phase == "I" ? Phase::kWarmup : phase == "II" ? Phase::kEntropy : Phase::kFinetune;
  s.gamma = j.at("gamma").get<double>();
  s.warmup_epochs_remaining = j.at("warmup_epochs_remaining").get<int>();
  s.plateau_counter = j.at("plateau_counter").get<int>();
  s.decays = j.at("decays").get<int>();
  s.best_val_metric = j.at("best_val_metric").is_null() ? -std::numeric_limits<double>::infinity()
                                                         : j.at("best_val_metric").get<double>();
  s.finetune_patience_counter = j.at("finetune_patience_counter").get<int>();
  s.epoch = j.at("epoch").get<int>();
  return s;
}

}  // namespace mhl
