#include "mhl/config.hpp"

#include <set>

#include "mhl/error.hpp"
#include "mhl/hash.hpp"

namespace mhl {
namespace {

using nlohmann::json;

// Reads optional fields of one config section with named errors.
class Section {
 public:
  Section(const json& root, std::string name) : name_(std::move(name)) {
    if (!root.contains(name_)) return;
    j_ = &root.at(name_);
    if (!j_->is_object()) throw_config("config section '" + name_ + "' must be an object");
  }
  Section(const json* j, std::string name) : j_(j), name_(std::move(name)) {
    if (j_ && !j_->is_object()) throw_config("config section '" + name_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_ || !j_->contains(key)) return;
    const json& v = j_->at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw_config(field(key) + ": expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw_config(field(key) + ": expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw_config(field(key) + ": expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw_config(field(key) + ": expected a string");
      }
      out = v.get<T>();
    } catch (const json::exception&) {
      throw_config(field(key) + ": value has the wrong type");
    }
  }

  template <class T, class Parse>
  void read_enum(const char* key, T& out, Parse parse) {
    std::string s;
    read(key, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const Error& e) {
      throw_config(field(key) + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    if (!j_ || !j_->contains(key)) return nullptr;
    return &j_->at(key);
  }

  /// Rejects keys that no read() asked for.
  void finish() const {
    if (!j_) return;
    for (const auto& [k, _] : j_->items())
      if (!seen_.contains(k)) throw_config("config field " + name_ + "." + k + ": unknown key");
  }

  std::string field(const char* key) const { return "config field " + name_ + "." + key; }

 private:
  const json* j_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw_config("config field " + field + " " + what);
}

}  // namespace

CurriculumParams RunConfig::curriculum() const {
  CurriculumParams p;
  p.gamma0 = train.gamma0;
  p.warmup_epochs = train.warmup_epochs;
  p.plateau_patience = train.plateau_patience;
  p.decay_fraction = train.decay_fraction;
  p.finetune_patience = train.finetune_patience;
  p.granularity = train.granularity;
  // A zero initial ratio means no masking at all: plain autoregressive training.
  p.strategy = train.gamma0 == 0.0 ? CurriculumStrategy::kDirect : train.strategy;
  return p;
}

void RunConfig::validate() const {
  require(data.source == "synth" || data.source == "file", "data.source", "must be \"synth\" or \"file\"");
  if (data.source == "file") {
    require(!data.path.empty(), "data.path", "is required when data.source is \"file\"");
    require(!data.features_path.empty() || !data.tokens_path.empty(), "data.features_path",
            "or data.tokens_path is required when data.source is \"file\"");
    require(data.features_path.empty() || !data.item_ids_path.empty(), "data.item_ids_path",
            "is required with data.features_path");
    parse_interaction_format(data.format);
  }
  require(data.min_count >= 1, "data.min_count", "must be >= 1");
  try {
    data.synth.validate();
  } catch (const Error& e) {
    throw_config(std::string("config field data.synth: ") + e.what());
  }

  require(tokenizer.K >= 1, "tokenizer.K", "must be >= 1");
  require(tokenizer.codebook_size >= 2, "tokenizer.codebook_size", "must be >= 2");
  require(tokenizer.pca_dim >= 0, "tokenizer.pca_dim", "must be >= 0");
  require(tokenizer.pca_dim == 0 || tokenizer.pca_dim % tokenizer.K == 0, "tokenizer.pca_dim",
          "must be a multiple of tokenizer.K");
  require(tokenizer.opq_rounds >= 1, "tokenizer.opq_rounds", "must be >= 1");
  require(tokenizer.kmeans_iters >= 1, "tokenizer.kmeans_iters", "must be >= 1");
  require(tokenizer.graph_edges >= 1, "tokenizer.graph_edges", "must be >= 1");

  require(model.hidden_size >= 1, "model.hidden_size", "must be >= 1");
  require(model.n_heads >= 1 && model.hidden_size % model.n_heads == 0, "model.n_heads",
          "must divide model.hidden_size");
  require(model.n_layers >= 1, "model.n_layers", "must be >= 1");
  require(model.ffn_dim >= 1, "model.ffn_dim", "must be >= 1");
  require(model.max_seq_len >= 2, "model.max_seq_len", "must be >= 2");
  require(model.dropout >= 0.0 && model.dropout < 1.0, "model.dropout", "must be in [0, 1)");
  require(model.temperature > 0.0, "model.temperature", "must be positive");
  require(model.init_std > 0.0, "model.init_std", "must be positive");

  require(train.lambda_next >= 0.0, "train.lambda_next", "must be >= 0");
  require(train.lambda_mask >= 0.0, "train.lambda_mask", "must be >= 0");
  require(train.gamma0 >= 0.0 && train.gamma0 <= 1.0, "train.gamma0", "must be in [0, 1]");
  require(train.warmup_epochs >= 0, "train.warmup_epochs", "must be >= 0");
  require(train.plateau_patience >= 1, "train.plateau_patience", "must be >= 1");
  require(train.decay_fraction > 0.0 && train.decay_fraction <= 1.0, "train.decay_fraction", "must be in (0, 1]");
  require(train.finetune_patience >= 1, "train.finetune_patience", "must be >= 1");
  require(train.lr > 0.0, "train.lr", "must be positive");
  require(train.batch_size >= 1, "train.batch_size", "must be >= 1");
  require(train.max_epochs >= 1, "train.max_epochs", "must be >= 1");
  require(train.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
  require(train.warmup_steps >= 0, "train.warmup_steps", "must be >= 0");
  require(train.min_lr_ratio >= 0.0 && train.min_lr_ratio <= 1.0, "train.min_lr_ratio", "must be in [0, 1]");
  require(train.checkpoint_every >= 0, "train.checkpoint_every", "must be >= 0");

  require(decode.beam.beam_size >= 1, "decode.beam_size", "must be >= 1");
  require(decode.beam.steps >= 0, "decode.steps", "must be >= 0");
  require(decode.beam.seeds_per_position >= 1, "decode.seeds_per_position", "must be >= 1");

  require(!eval.ks.empty(), "eval.ks", "must not be empty");
  for (int k : eval.ks) require(k >= 1, "eval.ks", "entries must be >= 1");
  require(eval.truncate_drop_last >= 0 && eval.truncate_drop_last < eval.truncate_min_len, "eval.truncate_drop_last",
          "must be in [0, eval.truncate_min_len)");
}

RunConfig desk_preset() {
  RunConfig c;
  c.preset = "desk";
  return c;
}

RunConfig paper_appendix_c_preset() {
  RunConfig c;
  c.preset = "paper-appendixC";
  c.data.source = "file";
  c.data.apply_core_filter = true;
  c.tokenizer.K = 32;
  c.tokenizer.codebook_size = 256;
  c.tokenizer.pca_dim = 128;
  c.tokenizer.opq = true;
  c.model.hidden_size = 448;
  c.model.n_layers = 2;
  c.model.n_heads = 4;
  c.model.ffn_dim = 1024;
  c.model.max_seq_len = 50;
  c.model.dropout = 0.3;
  return c;
}

RunConfig preset_by_name(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper-appendixC") return paper_appendix_c_preset();
  throw_config("config field preset: unknown preset '" + name + "'");
}

nlohmann::json to_json(const RunConfig& c) {
  const SynthConfig& s = c.data.synth;
  return {
      {"preset", c.preset},
      {"data",
       {{"source", c.data.source},
        {"path", c.data.path},
        {"format", c.data.format},
        {"features_path", c.data.features_path},
        {"item_ids_path", c.data.item_ids_path},
        {"tokens_path", c.data.tokens_path},
        {"min_count", c.data.min_count},
        {"apply_core_filter", c.data.apply_core_filter},
        {"synth",
         {{"n_users", s.n_users},
          {"n_items", s.n_items},
          {"n_intents", s.n_intents},
          {"min_path_len", s.min_path_len},
          {"max_path_len", s.max_path_len},
          {"intent_switch_prob", s.intent_switch_prob},
          {"noise_prob", s.noise_prob},
          {"feature_dim", s.feature_dim},
          {"seed", s.seed}}}}},
      {"tokenizer",
       {{"K", c.tokenizer.K},
        {"codebook_size", c.tokenizer.codebook_size},
        {"pca_dim", c.tokenizer.pca_dim},
        {"opq", c.tokenizer.opq},
        {"opq_rounds", c.tokenizer.opq_rounds},
        {"kmeans_iters", c.tokenizer.kmeans_iters},
        {"graph_edges", c.tokenizer.graph_edges},
        {"seed", c.tokenizer.seed}}},
      {"model",
       {{"hidden_size", c.model.hidden_size},
        {"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"ffn_dim", c.model.ffn_dim},
        {"max_seq_len", c.model.max_seq_len},
        {"dropout", c.model.dropout},
        {"temperature", c.model.temperature},
        {"init_std", c.model.init_std}}},
      {"train",
       {{"lambda_next", c.train.lambda_next},
        {"lambda_mask", c.train.lambda_mask},
        {"granularity", to_string(c.train.granularity)},
        {"strategy", to_string(c.train.strategy)},
        {"gamma0", c.train.gamma0},
        {"warmup_epochs", c.train.warmup_epochs},
        {"plateau_patience", c.train.plateau_patience},
        {"decay_fraction", c.train.decay_fraction},
        {"finetune_patience", c.train.finetune_patience},
        {"lr", c.train.lr},
        {"batch_size", c.train.batch_size},
        {"max_epochs", c.train.max_epochs},
        {"seed", c.train.seed},
        {"weight_decay", c.train.weight_decay},
        {"grad_clip", c.train.grad_clip},
        {"warmup_steps", c.train.warmup_steps},
        {"min_lr_ratio", c.train.min_lr_ratio},
        {"checkpoint_every", c.train.checkpoint_every}}},
      {"decode",
       {{"beam_size", c.decode.beam.beam_size},
        {"steps", c.decode.beam.steps},
        {"seeds_per_position", c.decode.beam.seeds_per_position},
        {"exact", c.decode.exact},
        {"seed", c.decode.beam.seed}}},
      {"eval",
       {{"ks", c.eval.ks},
        {"truncate_min_len", c.eval.truncate_min_len},
        {"truncate_drop_last", c.eval.truncate_drop_last}}},
  };
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw_config("config must be a JSON object");
  Section root(&j, "config");
  std::string preset = "desk";
  root.read("preset", preset);
  RunConfig c = preset_by_name(preset);

  Section data(j, "data");
  root.child("data");
  data.read("source", c.data.source);
  data.read("path", c.data.path);
  data.read("format", c.data.format);
  data.read("features_path", c.data.features_path);
  data.read("item_ids_path", c.data.item_ids_path);
  data.read("tokens_path", c.data.tokens_path);
  data.read("min_count", c.data.min_count);
  data.read("apply_core_filter", c.data.apply_core_filter);
  {
    Section s(data.child("synth"), "data.synth");
    s.read("n_users", c.data.synth.n_users);
    s.read("n_items", c.data.synth.n_items);
    s.read("n_intents", c.data.synth.n_intents);
    s.read("min_path_len", c.data.synth.min_path_len);
    s.read("max_path_len", c.data.synth.max_path_len);
    s.read("intent_switch_prob", c.data.synth.intent_switch_prob);
    s.read("noise_prob", c.data.synth.noise_prob);
    s.read("feature_dim", c.data.synth.feature_dim);
    s.read("seed", c.data.synth.seed);
    s.finish();
  }
  data.finish();

  Section tok(j, "tokenizer");
  root.child("tokenizer");
  tok.read("K", c.tokenizer.K);
  tok.read("codebook_size", c.tokenizer.codebook_size);
  tok.read("pca_dim", c.tokenizer.pca_dim);
  tok.read("opq", c.tokenizer.opq);
  tok.read("opq_rounds", c.tokenizer.opq_rounds);
  tok.read("kmeans_iters", c.tokenizer.kmeans_iters);
  tok.read("graph_edges", c.tokenizer.graph_edges);
  tok.read("seed", c.tokenizer.seed);
  tok.finish();

  Section model(j, "model");
  root.child("model");
  model.read("hidden_size", c.model.hidden_size);
  model.read("n_layers", c.model.n_layers);
  model.read("n_heads", c.model.n_heads);
  model.read("ffn_dim", c.model.ffn_dim);
  model.read("max_seq_len", c.model.max_seq_len);
  model.read("dropout", c.model.dropout);
  model.read("temperature", c.model.temperature);
  model.read("init_std", c.model.init_std);
  model.finish();

  Section train(j, "train");
  root.child("train");
  train.read("lambda_next", c.train.lambda_next);
  train.read("lambda_mask", c.train.lambda_mask);
  train.read_enum("granularity", c.train.granularity, parse_granularity);
  train.read_enum("strategy", c.train.strategy, parse_strategy);
  train.read("gamma0", c.train.gamma0);
  train.read("warmup_epochs", c.train.warmup_epochs);
  train.read("plateau_patience", c.train.plateau_patience);
  train.read("decay_fraction", c.train.decay_fraction);
  train.read("finetune_patience", c.train.finetune_patience);
  train.read("lr", c.train.lr);
  train.read("batch_size", c.train.batch_size);
  train.read("max_epochs", c.train.max_epochs);
  train.read("seed", c.train.seed);
  train.read("weight_decay", c.train.weight_decay);
  train.read("grad_clip", c.train.grad_clip);
  train.read("warmup_steps", c.train.warmup_steps);
  train.read("min_lr_ratio", c.train.min_lr_ratio);
  train.read("checkpoint_every", c.train.checkpoint_every);
  train.finish();

  Section dec(j, "decode");
  root.child("decode");
  dec.read("beam_size", c.decode.beam.beam_size);
  dec.read("steps", c.decode.beam.steps);
  dec.read("seeds_per_position", c.decode.beam.seeds_per_position);
  dec.read("exact", c.decode.exact);
  dec.read("seed", c.decode.beam.seed);
  dec.finish();

  Section ev(j, "eval");
  root.child("eval");
  ev.read("ks", c.eval.ks);
  ev.read("truncate_min_len", c.eval.truncate_min_len);
  ev.read("truncate_drop_last", c.eval.truncate_drop_last);
  ev.finish();

  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw_config("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace mhl
