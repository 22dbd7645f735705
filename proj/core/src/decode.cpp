#include "mhl/decode.hpp"

#include <algorithm>
#include <iostream>

#include "mhl/error.hpp"
#include "mhl/rng.hpp"

namespace mhl {

bool ranks_before(const ScoredItem& a, const ScoredItem& b) {
  return a.score != b.score ? a.score > b.score : a.item < b.item;
}

std::vector<SemanticId> clip_context(const std::vector<SemanticId>& context, int max_seq_len) {
  if (context.size() <= static_cast<std::size_t>(max_seq_len)) return context;
  return {context.end() - max_seq_len, context.end()};
}

ScoreTable::ScoreTable(const Model& model, const std::vector<SemanticId>& context) {
  const ModelConfig& cfg = model.config();
  if (context.empty()) throw_data("decode: empty context");
  const ForwardCache cache = model.forward(MaskedSequence::unmasked(clip_context(context, cfg.max_seq_len)), nullptr);
  const Eigen::RowVectorXd last = cache.states.row(static_cast<Eigen::Index>(cache.T - 1));
  for (int k = 0; k < cfg.K(); ++k) {
    log_probs_.push_back(log_softmax(model.head_logits(last, k, HeadSet::kPredict), cfg.temperature));
    pad_code_.push_back(cfg.pad ? cfg.codebook_sizes[k] : -1);
  }
}

double ScoreTable::score(const SemanticId& id) const {
  double s = 0.0;
  for (std::size_t k = 0; k < log_probs_.size(); ++k) {
    const int c = id.codewords[k];
    if (c == pad_code_[k]) continue;
    s += log_probs_[k](c);
  }
  return s;
}

double score_exact(const Model& model, const std::vector<SemanticId>& context, const SemanticId& item) {
  return ScoreTable(model, context).score(item);
}

std::vector<ScoredItem> rank_exact(const Model& model, const std::vector<SemanticId>& context, const Catalog& catalog,
                                   std::size_t topk) {
  if (topk > catalog.size()) throw_config("rank_exact: topk exceeds catalog size");
  const ScoreTable table(model, context);
  std::vector<ScoredItem> all(catalog.size());
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    all[i] = ScoredItem{static_cast<ItemIndex>(i), table.score(catalog.id(static_cast<ItemIndex>(i)))};
  }
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(topk), all.end(), ranks_before);
  all.resize(topk);
  return all;
}

CodewordIndex::CodewordIndex(const Catalog& catalog) {
  postings_.resize(static_cast<std::size_t>(catalog.K()));
  for (int k = 0; k < catalog.K(); ++k) postings_[k].resize(static_cast<std::size_t>(catalog.codebook_sizes()[k]) + 1);
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    for (int k = 0; k < catalog.K(); ++k) {
      const int c = catalog.id(static_cast<ItemIndex>(i))[k];
      if (!catalog.is_pad(k, c)) postings_[k][c].push_back(static_cast<ItemIndex>(i));
    }
  }
}

namespace {

void keep_top(std::vector<ScoredItem>& beam, std::size_t b) {
  std::sort(beam.begin(), beam.end(), ranks_before);
  if (beam.size() > b) beam.resize(b);
}

std::uint64_t context_key(const std::vector<SemanticId>& context) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (const auto& id : context)
    for (int c : id.codewords) h = splitmix64(h ^ static_cast<std::uint64_t>(c));
  return h;
}

}  // namespace

BeamResult beam_search_graph(const Model& model, const std::vector<SemanticId>& context, const Catalog& catalog,
                             const ItemGraph& graph, const CodewordIndex& index, const BeamConfig& cfg,
                             std::size_t topk) {
  if (graph.size() != catalog.size()) throw_config("beam_search_graph: graph and catalog sizes differ");
  if (cfg.beam_size < 1 || cfg.steps < 0 || cfg.seeds_per_position < 1) throw_config("beam_search_graph: bad beam config");
  const ScoreTable table(model, context);
  const std::size_t n = catalog.size();
  const auto B = static_cast<std::size_t>(cfg.beam_size);
  std::vector<std::uint8_t> visited(n, 0);
  BeamResult res;

  std::vector<ScoredItem> beam;
  auto visit = [&](ItemIndex i) {
    if (visited[i]) return;
    visited[i] = 1;
    beam.push_back(ScoredItem{i, table.score(catalog.id(i))});
    ++res.scored;
  };

  // Seeding: items sharing any of the top-m codewords at some position.
  for (int k = 0; k < table.K(); ++k) {
    const Eigen::RowVectorXd& lp = table.log_probs(k);
    std::vector<int> codes(static_cast<std::size_t>(lp.size()));
    for (int c = 0; c < lp.size(); ++c) codes[c] = c;
    const auto m = std::min<std::size_t>(static_cast<std::size_t>(cfg.seeds_per_position), codes.size());
    std::partial_sort(codes.begin(), codes.begin() + static_cast<std::ptrdiff_t>(m), codes.end(),
                      [&](int a, int b) { return lp(a) != lp(b) ? lp(a) > lp(b) : a < b; });
    for (std::size_t j = 0; j < m; ++j)
      for (ItemIndex i : index.items(k, codes[j])) visit(i);
  }
  if (beam.empty()) {
    res.used_fallback = true;
    std::cerr << "warning: beam seeding produced no candidates; sampling random items\n";
    Rng rng = make_rng(cfg.seed, {stream::kFallback, context_key(context)});
    const std::size_t want = std::min(n, static_cast<std::size_t>(cfg.seeds_per_position) * static_cast<std::size_t>(table.K()));
    while (beam.size() < want) visit(static_cast<ItemIndex>(uniform_int(rng, 0, n - 1)));
  }
  keep_top(beam, B);

  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t before = beam.size();
    const std::vector<ScoredItem> current = beam;
    for (const ScoredItem& s : current)
      for (const Neighbor& nb : graph.neighbors[s.item]) visit(nb.item);
    if (beam.size() == before) break;
    keep_top(beam, B);
  }

  res.items = std::move(beam);
  if (res.items.size() > topk) res.items.resize(topk);
  return res;
}

BeamResult beam_search_graph(const Model& model, const std::vector<SemanticId>& context, const Catalog& catalog,
                             const ItemGraph& graph, const BeamConfig& cfg, std::size_t topk) {
  return beam_search_graph(model, context, catalog, graph, CodewordIndex(catalog), cfg, topk);
}

Decoder::Decoder(const Model& model, const Catalog& catalog, const ItemGraph& graph, DecoderConfig cfg)
    : model_(model), catalog_(catalog), graph_(graph), cfg_(cfg), index_(catalog) {
  if (catalog.codebook_sizes() != model.config().codebook_sizes)
    throw_config("decoder: catalog codebook sizes do not match the model");
}

std::vector<SemanticId> Decoder::semantic_context(const std::vector<ItemIndex>& context) const {
  std::vector<SemanticId> out;
  out.reserve(context.size());
  for (ItemIndex i : context) out.push_back(catalog_.id(i));
  return out;
}

std::vector<ScoredItem> Decoder::rank(const std::vector<ItemIndex>& context, std::size_t topk) const {
  const auto ctx = semantic_context(context);
  topk = std::min(topk, catalog_.size());
  if (cfg_.exact) return rank_exact(model_, ctx, catalog_, topk);
  return beam_search_graph(model_, ctx, catalog_, graph_, index_, cfg_.beam, topk).items;
}

}  // namespace mhl
