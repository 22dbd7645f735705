#pragma once

#include <cstdint>
#include <vector>

#include "mhl/model.hpp"
#include "mhl/tokenizer.hpp"

namespace mhl {

struct ScoredItem {
  ItemIndex item = 0;
  double score = 0.0;

  friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

/// Score desc, then item index asc.
bool ranks_before(const ScoredItem& a, const ScoredItem& b);

/// Per-position tempered log-probabilities of the prediction heads at the
/// final decoder state of a context.
class ScoreTable {
 public:
  ScoreTable(const Model& model, const std::vector<SemanticId>& context);

  /// Sum over non-PAD positions k of log P^k(codeword_k). Summation runs
  /// k = 0..K-1, so every caller gets the same bits for the same item.
  double score(const SemanticId& id) const;
  const Eigen::RowVectorXd& log_probs(int k) const { return log_probs_[static_cast<std::size_t>(k)]; }
  int K() const { return static_cast<int>(log_probs_.size()); }

 private:
  std::vector<Eigen::RowVectorXd> log_probs_;
  std::vector<int> pad_code_;  // -1 when the position has no PAD slot
};

/// Contexts longer than max_seq_len keep their most recent items.
std::vector<SemanticId> clip_context(const std::vector<SemanticId>& context, int max_seq_len);

double score_exact(const Model& model, const std::vector<SemanticId>& context, const SemanticId& item);

/// Exhaustive catalog ranking (the oracle for beam_search_graph).
std::vector<ScoredItem> rank_exact(const Model& model, const std::vector<SemanticId>& context, const Catalog& catalog,
                                   std::size_t topk);

struct BeamConfig {
  int beam_size = 50;
  int steps = 3;
  int seeds_per_position = 4;
  std::uint64_t seed = 0;  // fallback sampling
};

/// (position, codeword) -> items, built once per catalog.
class CodewordIndex {
 public:
  explicit CodewordIndex(const Catalog& catalog);
  const std::vector<ItemIndex>& items(int k, int code) const {
    return postings_[static_cast<std::size_t>(k)][static_cast<std::size_t>(code)];
  }

 private:
  std::vector<std::vector<std::vector<ItemIndex>>> postings_;
};

struct BeamResult {
  std::vector<ScoredItem> items;
  std::size_t scored = 0;       // distinct items scored
  bool used_fallback = false;   // seeding produced no candidates
};

/// Seeds candidates from the top-m codewords per position, then expands the
/// beam through graph neighbors for `steps` rounds. Candidates are always
/// scored exactly.
BeamResult beam_search_graph(const Model& model, const std::vector<SemanticId>& context, const Catalog& catalog,
                             const ItemGraph& graph, const CodewordIndex& index, const BeamConfig& cfg,
                             std::size_t topk);
BeamResult beam_search_graph(const Model& model, const std::vector<SemanticId>& context, const Catalog& catalog,
                             const ItemGraph& graph, const BeamConfig& cfg, std::size_t topk);

struct DecoderConfig {
  bool exact = false;  // rank the whole catalog instead of beam search
  BeamConfig beam;
};

/// Bundles a model snapshot with its catalog, graph and codeword index so
/// many contexts can be decoded against one setup. Thread-safe for reads.
class Decoder {
 public:
  Decoder(const Model& model, const Catalog& catalog, const ItemGraph& graph, DecoderConfig cfg = {});

  std::vector<ScoredItem> rank(const std::vector<ItemIndex>& context, std::size_t topk) const;
  std::vector<SemanticId> semantic_context(const std::vector<ItemIndex>& context) const;

  const Model& model() const { return model_; }
  const Catalog& catalog() const { return catalog_; }
  const DecoderConfig& config() const { return cfg_; }

 private:
  const Model& model_;
  const Catalog& catalog_;
  const ItemGraph& graph_;
  DecoderConfig cfg_;
  CodewordIndex index_;
};

}  // namespace mhl
