#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhl/corpus.hpp"
#include "mhl/curriculum.hpp"
#include "mhl/decode.hpp"
#include "mhl/model.hpp"

namespace mhl {

struct DataSection {
  std::string source = "synth";  // "synth" or "file"
  std::string path;              // interactions file when source == "file"
  std::string format = "tsv";
  std::string features_path;     // item feature matrix for file sources
  std::string item_ids_path;     // one item id per feature row
  std::string tokens_path;       // optional external token sequences (replaces PQ)
  int min_count = 5;
  bool apply_core_filter = false;
  SynthConfig synth;
};

struct TokenizerSection {
  int K = 8;
  int codebook_size = 64;
  int pca_dim = 32;  // 0 keeps the raw feature dimension
  bool opq = false;
  int opq_rounds = 4;
  int kmeans_iters = 25;
  int graph_edges = 50;
  std::uint64_t seed = 0;
};

struct TrainSection {
  double lambda_next = 1.0;
  double lambda_mask = 1.0;
  Granularity granularity = Granularity::kToken;
  CurriculumStrategy strategy = CurriculumStrategy::kFull;
  double gamma0 = 0.15;
  int warmup_epochs = 5;
  int plateau_patience = 5;
  double decay_fraction = 0.1;
  int finetune_patience = 20;
  double lr = 5e-4;
  int batch_size = 64;
  int max_epochs = 300;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int warmup_steps = 10'000;
  double min_lr_ratio = 0.0;
  int checkpoint_every = 5;  // epochs; 0 disables periodic checkpoints
};

struct EvalSection {
  std::vector<int> ks{5, 10};
  int truncate_min_len = 20;
  int truncate_drop_last = 15;
};

struct RunConfig {
  std::string preset = "desk";
  DataSection data;
  TokenizerSection tokenizer;
  ModelConfig model;  // codebook_sizes / pad are filled from the catalog
  TrainSection train;
  DecoderConfig decode;
  EvalSection eval;

  void validate() const;
  CurriculumParams curriculum() const;
};

/// Desk-scale defaults: synthetic corpus and a small backbone, with the
/// published optimizer, curriculum and decoding constants.
RunConfig desk_preset();
/// Full-scale constants: 32 codebooks of 256, PCA to 128, 448/2/4/1024
/// backbone, dropout 0.3.
RunConfig paper_appendix_c_preset();
RunConfig preset_by_name(const std::string& name);

nlohmann::json to_json(const RunConfig& cfg);
/// Fields absent from `j` keep the preset value named by j["preset"]
/// (default "desk"). Unknown keys and wrong types are config errors naming
/// the field.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace mhl
