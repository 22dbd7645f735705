#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhl/config.hpp"
#include "mhl/eval.hpp"
#include "mhl/model.hpp"
#include "mhl/tokenizer.hpp"

namespace mhl {

/// MHL_RUN_ROOT if set, otherwise ./runs.
std::filesystem::path run_root_from_env();

/// Short content hash of the canonical config serialization.
std::string default_run_id(const RunConfig& cfg);

/// File layout of one run directory.
struct RunPaths {
  std::filesystem::path dir;

  explicit RunPaths(std::filesystem::path run_dir) : dir(std::move(run_dir)) {}
  static RunPaths under(const std::filesystem::path& root, const std::string& run_id) { return RunPaths(root / run_id); }

  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path manifest() const { return dir / "manifest.json"; }
  std::filesystem::path interactions() const { return dir / "data" / "interactions.tsv"; }
  std::filesystem::path splits() const { return dir / "data" / "splits.jsonl"; }
  std::filesystem::path features() const { return dir / "data" / "item_features.bin"; }
  std::filesystem::path item_ids() const { return dir / "data" / "item_ids.txt"; }
  std::filesystem::path codebooks() const { return dir / "tokenizer" / "codebooks.json"; }
  std::filesystem::path catalog() const { return dir / "tokenizer" / "catalog.jsonl"; }
  std::filesystem::path catalog_meta() const { return dir / "tokenizer" / "catalog_meta.json"; }
  std::filesystem::path checkpoints() const { return dir / "checkpoints"; }
  std::filesystem::path latest_checkpoint() const { return checkpoints() / "latest.ckpt"; }
  std::filesystem::path best_checkpoint() const { return checkpoints() / "best.ckpt"; }
  std::filesystem::path final_checkpoint() const { return checkpoints() / "final.ckpt"; }
  std::filesystem::path metrics_dir() const { return dir / "metrics"; }
};

/// Append-only run record kept in manifest.json.
class RunManifest {
 public:
  static RunManifest load_or_create(const RunPaths& paths, const RunConfig& cfg);
  static RunManifest load(const std::filesystem::path& path);

  void append(const std::string& list, nlohmann::json entry);
  void set(const std::string& key, nlohmann::json value);
  const nlohmann::json& json() const { return j_; }
  void save(const std::filesystem::path& path) const;

 private:
  nlohmann::json j_;
};

struct PrepareResult {
  std::string content_hash;
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_events = 0;
  std::size_t n_train_only = 0;
};

struct TokenizeResult {
  std::size_t n_items = 0;
  std::size_t distinct_ids = 0;
  std::vector<int> codebook_sizes;
};

struct TrainResult {
  std::string stop_reason;
  int epochs = 0;
  int best_epoch = 0;
  std::filesystem::path final_checkpoint;
};

enum class WeightChoice { kBest, kLast };

struct EvaluateResult {
  MetricsReport test;
  std::optional<PilotResult> pilot;  // absent when no history is long enough
};

/// Loaded split, catalog and token graph of a prepared + tokenized run.
struct RunArtifacts {
  SplitCorpus split;
  Catalog catalog;
  ItemGraph graph;
};

RunArtifacts load_artifacts(const RunConfig& cfg, const RunPaths& paths);
/// Model sized from the checkpoint, carrying its best or last weights.
/// Errors when the checkpoint disagrees with the catalog.
Model model_from_checkpoint(const std::filesystem::path& path, const Catalog& catalog, WeightChoice w);

PrepareResult cmd_prepare(const RunConfig& cfg, const RunPaths& paths);
TokenizeResult cmd_tokenize(const RunConfig& cfg, const RunPaths& paths);
TrainResult cmd_train(const RunConfig& cfg, const RunPaths& paths, bool resume = false);
EvaluateResult cmd_evaluate(const RunConfig& cfg, const RunPaths& paths,
                            const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                            WeightChoice w = WeightChoice::kBest);
/// Contexts are JSON lines {"user_id", "items": [...]}; without a file the
/// test contexts of the split are decoded. Returns the output path.
std::filesystem::path cmd_decode(const RunConfig& cfg, const RunPaths& paths,
                                 const std::optional<std::filesystem::path>& checkpoint,
                                 const std::optional<std::filesystem::path>& contexts, std::size_t topk);
/// Joins manifests into one table (config fields that differ between runs
/// come first) and writes table + curve CSVs into out_dir.
std::string cmd_report(const std::vector<std::filesystem::path>& manifests, const std::filesystem::path& out_dir);

}  // namespace mhl
