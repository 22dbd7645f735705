#include "mhl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mhl/error.hpp"
#include "mhl/masking.hpp"
#include "mhl/parallel.hpp"
#include "mhl/rng.hpp"

namespace mhl {
namespace {

constexpr const char* kFormat = "mhl-checkpoint";

std::vector<SemanticId> to_ids(const std::vector<std::string>& items, const Catalog& catalog, int max_len) {
  const std::size_t start = items.size() > static_cast<std::size_t>(max_len) ? items.size() - max_len : 0;
  std::vector<SemanticId> out;
  for (std::size_t i = start; i < items.size(); ++i) out.push_back(catalog.id(catalog.index_of(items[i])));
  return out;
}

}  // namespace

TrainData make_train_data(const SplitCorpus& split, const Catalog& catalog, int max_seq_len) {
  TrainData d;
  for (const UserSplit& u : split.users)
    if (u.train.size() >= 2) d.sequences.push_back(to_ids(u.train, catalog, max_seq_len));
  for (const auto& [user, items] : split.train_only)
    if (items.size() >= 2) d.sequences.push_back(to_ids(items, catalog, max_seq_len));
  d.val_cases = make_cases(split, catalog, EvalTarget::kValidation);
  if (d.sequences.empty()) throw_data("training: no user has a training prefix of length >= 2");
  return d;
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"phase", static_cast<int>(r.phase)},
          {"policy", to_string(r.policy)},
          {"gamma", r.gamma},
          {"steps", r.steps},
          {"loss", r.loss},
          {"loss_next", r.loss_next},
          {"loss_mask", r.loss_mask},
          {"masked_codewords", r.masked_codewords},
          {"reconstruction_evals", r.reconstruction_evals},
          {"val_ndcg10", r.val_ndcg10},
          {"improved", r.improved},
          {"new_best", r.new_best}};
}

EpochRecord epoch_record_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.phase = static_cast<Phase>(j.at("phase").get<int>());
  r.policy = parse_policy(j.at("policy").get<std::string>());
  r.gamma = j.at("gamma").get<double>();
  r.steps = j.at("steps").get<std::int64_t>();
  r.loss = j.at("loss").get<double>();
  r.loss_next = j.at("loss_next").get<double>();
  r.loss_mask = j.at("loss_mask").get<double>();
  r.masked_codewords = j.at("masked_codewords").get<double>();
  r.reconstruction_evals = j.at("reconstruction_evals").get<std::size_t>();
  r.val_ndcg10 = j.at("val_ndcg10").get<double>();
  r.improved = j.at("improved").get<bool>();
  r.new_best = j.at("new_best").get<bool>();
  return r;
}

Trainer::Trainer(const RunConfig& cfg, Model& model, const Catalog& catalog, const ItemGraph& graph, TrainData data)
    : cfg_(cfg), model_(model), catalog_(catalog), graph_(graph), data_(std::move(data)) {
  if (catalog.codebook_sizes() != model.config().codebook_sizes)
    throw_config("trainer: catalog codebook sizes do not match the model");
  weights_ = LossWeights{cfg.train.lambda_next, cfg.train.lambda_mask};
  AdamWConfig ac;
  ac.weight_decay = cfg.train.weight_decay;
  ac.grad_clip = cfg.train.grad_clip;
  opt_ = AdamW(static_cast<std::size_t>(model.params().size()), ac);
  lr_.peak = cfg.train.lr;
  lr_.warmup_steps = cfg.train.warmup_steps;
  lr_.total_steps = static_cast<std::int64_t>(batches_per_epoch()) * cfg.train.max_epochs;
  lr_.min_ratio = cfg.train.min_lr_ratio;
  schedule_ = init_schedule(cfg.curriculum());
}

std::size_t Trainer::batches_per_epoch() const {
  const auto b = static_cast<std::size_t>(cfg_.train.batch_size);
  return (data_.sequences.size() + b - 1) / b;
}

void Trainer::initialize() {
  model_.init_parameters(derive_seed(cfg_.train.seed, {stream::kInit}));
  best_params_ = model_.params();
  best_epoch_ = 0;
  best_val_ = -std::numeric_limits<double>::infinity();
  best_from_finetune_ = false;
}

std::vector<TrainSequence> Trainer::build_batch(const std::vector<std::size_t>& members, const MaskPolicy& policy,
                                                int epoch, double* masked_codewords) const {
  const int K = model_.config().K();
  const std::uint64_t seed = cfg_.train.seed;
  const auto ep = static_cast<std::uint64_t>(epoch);
  std::vector<TrainSequence> batch(members.size());
  std::vector<std::size_t> masked(members.size(), 0);
  parallel_for(members.size(), [&](std::size_t b) {
    const std::size_t u = members[b];
    const auto& seq = data_.sequences[u];
    const int T = static_cast<int>(seq.size());
    Rng rng = make_rng(seed, {stream::kMask, ep, u});
    MaskPlan plan;
    switch (policy.policy) {
      case PolicyKind::kNone:
        break;
      case PolicyKind::kRandom:
        plan = plan_random(T, K, policy.gamma, policy.granularity, rng);
        break;
      case PolicyKind::kEntropy:
        plan = plan_entropy(smooth_entropy(compute_entropy(model_, seq)), policy.gamma, policy.granularity, rng);
        break;
    }
    batch[b].input = plan.pairs.empty() ? MaskedSequence::unmasked(seq) : apply_mask(seq, plan, K);
    batch[b].dropout_seed = derive_seed(seed, {stream::kDropout, ep, u});
    masked[b] = reconstruction_terms(batch[b].input, model_.config()).size();
  });
  *masked_codewords += static_cast<double>(std::accumulate(masked.begin(), masked.end(), std::size_t{0}));
  return batch;
}

double Trainer::validate() const {
  const Decoder decoder(model_, catalog_, graph_, cfg_.decode);
  return evaluate(decoder, data_.val_cases, {10}, "validation").ndcg_at(10);
}

const EpochRecord& Trainer::run_epoch() {
  if (finished_) throw_config("trainer: run already finished");
  const int epoch = schedule_.epoch + 1;
  const MaskPolicy policy = current_policy(schedule_);

  std::vector<std::size_t> order(data_.sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle = make_rng(cfg_.train.seed, {stream::kShuffle, static_cast<std::uint64_t>(epoch)});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_int(shuffle, 0, i - 1)]);

  EpochRecord rec;
  rec.epoch = epoch;
  rec.phase = schedule_.phase;
  rec.policy = policy.policy;
  rec.gamma = policy.gamma;
  const auto B = static_cast<std::size_t>(cfg_.train.batch_size);
  std::size_t n_batches = 0;
  Eigen::VectorXd grad;
  for (std::size_t start = 0; start < order.size(); start += B) {
    const std::vector<std::size_t> members(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + B)));
    const auto batch = build_batch(members, policy, epoch, &rec.masked_codewords);
    const LossBreakdown loss = batch_loss(model_, batch, weights_, true, &grad);
    if (!std::isfinite(loss.total))
      throw_numeric("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                    std::to_string(opt_.step_count()));
    opt_.step(model_.params(), grad, lr_.at(opt_.step_count()), model_.layout());
    rec.loss += loss.total;
    rec.loss_next += loss.next;
    rec.loss_mask += loss.mask;
    rec.reconstruction_evals += loss.reconstruction_head_evals;
    ++n_batches;
  }
  rec.loss /= static_cast<double>(n_batches);
  rec.loss_next /= static_cast<double>(n_batches);
  rec.loss_mask /= static_cast<double>(n_batches);
  rec.masked_codewords /= static_cast<double>(order.size());
  rec.steps = opt_.step_count();

  rec.val_ndcg10 = validate();
  const bool finetune = schedule_.phase == Phase::kFinetune;
  const AdvanceResult adv = advance(schedule_, rec.val_ndcg10);
  schedule_ = adv.state;
  rec.improved = adv.improved;
  if (finetune && !best_from_finetune_) {
    rec.new_best = true;
  } else if (finetune == best_from_finetune_) {
    rec.new_best = rec.val_ndcg10 > best_val_ + schedule_.params.improve_eps;
  }
  if (rec.new_best) {
    best_params_ = model_.params();
    best_epoch_ = epoch;
    best_val_ = rec.val_ndcg10;
    best_from_finetune_ = finetune;
  }
  if (adv.stop) {
    finished_ = true;
    stop_reason_ = "curriculum";
  } else if (epoch >= cfg_.train.max_epochs) {
    finished_ = true;
    stop_reason_ = "max_epochs";
  }
  history_.push_back(rec);
  return history_.back();
}

void Trainer::run(const std::function<void(const Trainer&, const EpochRecord&)>& on_epoch) {
  while (!finished_) {
    const EpochRecord& rec = run_epoch();
    if (on_epoch) on_epoch(*this, rec);
  }
}

Checkpoint Trainer::snapshot(const nlohmann::json& config_echo) const {
  Checkpoint ck;
  nlohmann::json tensors = nlohmann::json::array();
  for (const TensorInfo& t : model_.layout().tensors())
    tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  nlohmann::json history = nlohmann::json::array();
  for (const EpochRecord& r : history_) history.push_back(to_json(r));
  ck.header = {{"format", kFormat},
               {"config", config_echo},
               {"model", to_json(model_.config())},
               {"tensors", tensors},
               {"seed", cfg_.train.seed},
               {"optimizer_step", opt_.step_count()},
               {"schedule", to_json(schedule_)},
               {"history", history},
               {"best_epoch", best_epoch_},
               {"best_val", std::isfinite(best_val_) ? nlohmann::json(best_val_) : nlohmann::json(nullptr)},
               {"best_from_finetune", best_from_finetune_},
               {"finished", finished_},
               {"stop_reason", stop_reason_}};
  ck.blobs.emplace_back("params", model_.params());
  ck.blobs.emplace_back("adam_m", opt_.first_moment());
  ck.blobs.emplace_back("adam_v", opt_.second_moment());
  ck.blobs.emplace_back("best_params", best_params_);
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  if (ck.header.value("format", "") != kFormat) throw_data("checkpoint: not a training checkpoint");
  const ModelConfig saved = model_config_from_json(ck.header.at("model"));
  if (saved.codebook_sizes != model_.config().codebook_sizes || saved.hidden_size != model_.config().hidden_size ||
      saved.n_layers != model_.config().n_layers)
    throw_config("checkpoint does not match the configured model (K, codebook sizes or shape differ)");
  const auto n = model_.params().size();
  for (const char* name : {"params", "adam_m", "adam_v", "best_params"})
    if (ck.blob(name).size() != n) throw_data(std::string("checkpoint: blob '") + name + "' has the wrong size");
  model_.params() = ck.blob("params");
  opt_.first_moment() = ck.blob("adam_m");
  opt_.second_moment() = ck.blob("adam_v");
  opt_.set_step_count(ck.header.at("optimizer_step").get<std::int64_t>());
  best_params_ = ck.blob("best_params");
  schedule_ = schedule_from_json(ck.header.at("schedule"));
  history_.clear();
  for (const auto& r : ck.header.at("history")) history_.push_back(epoch_record_from_json(r));
  best_epoch_ = ck.header.at("best_epoch").get<int>();
  const auto& bv = ck.header.at("best_val");
  best_val_ = bv.is_null() ? -std::numeric_limits<double>::infinity() : bv.get<double>();
  best_from_finetune_ = ck.header.at("best_from_finetune").get<bool>();
  finished_ = ck.header.at("finished").get<bool>();
  stop_reason_ = ck.header.at("stop_reason").get<std::string>();
}

}  // namespace mhl
