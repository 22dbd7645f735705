#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mhl/model.hpp"
#include "mhl/rng.hpp"
#include "mhl/tokenizer.hpp"

namespace mhl {

enum class Granularity { kItem, kToken, kMixed };
enum class PolicyKind { kRandom, kEntropy, kNone };

Granularity parse_granularity(const std::string& s);
std::string to_string(Granularity g);
PolicyKind parse_policy(const std::string& s);
std::string to_string(PolicyKind p);

struct MaskedPair {
  std::uint32_t t = 0;
  std::uint32_t k = 0;

  friend auto operator<=>(const MaskedPair&, const MaskedPair&) = default;
};

/// Masked (item position, codeword position) pairs, sorted and unique.
struct MaskPlan {
  Granularity granularity = Granularity::kToken;
  PolicyKind policy = PolicyKind::kRandom;
  double gamma = 0.0;
  int n_drawn = 0;
  std::vector<MaskedPair> pairs;

  bool empty() const { return pairs.empty(); }
  std::size_t items_touched() const;
};

/// floor(gamma*K*T) for token-level, floor(gamma*T) for item and mixed.
/// A 1e-9 guard absorbs binary rounding of gamma (0.15*32*10 -> 48).
int mask_upper_bound(int T, int K, double gamma, Granularity g);

/// Draws N uniformly from [1, upper] and masks N distinct targets
/// uniformly without replacement. Mixed: each selected item is masked whole
/// or at a single random codeword with equal probability.
MaskPlan plan_random(int T, int K, double gamma, Granularity g, Rng& rng);

struct SmoothingParams {
  int window = 3;       // W
  double decay = 2.0;   // beta
  double mix = 0.2;     // rho

  void validate() const;
};

/// token[t*K + k] and item[t] in nats. After smooth_entropy these hold the
/// effective (smoothed) values and `smoothed` is set.
struct EntropyMap {
  int T = 0;
  int K = 0;
  std::vector<double> token;
  std::vector<double> item;
  std::vector<std::uint8_t> pad;  // T*K, set where the codeword is PAD
  bool smoothed = false;
  SmoothingParams params;

  double token_at(int t, int k) const { return token[static_cast<std::size_t>(t * K + k)]; }
};

/// Entropy of the tempered reconstruction-head distribution at every
/// (t, k) of the unmasked sequence, evaluated without dropout. Item entropy
/// is the mean over non-PAD positions.
EntropyMap compute_entropy(const Model& model, const std::vector<SemanticId>& sequence);
EntropyMap compute_entropy(const Model& model, const std::vector<SemanticId>& sequence, double tau);

/// Entropy (nats) of softmax(logits / tau).
double softmax_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& logits, double tau);

/// Causal windowed smoothing:
///   H'_t = sum_{d=0}^{min(W-1,t)} item[t-d] * beta^-d / sum beta^-d
///   token'[t][k] = (1 - rho) * token[t][k] + rho * H'_t,  item'[t] = H'_t
EntropyMap smooth_entropy(const EntropyMap& map, const SmoothingParams& p = {});

/// Draws N as plan_random does, then masks the N highest-entropy targets.
MaskPlan plan_entropy(const EntropyMap& map, double gamma, Granularity g, Rng& rng);
/// Top-n selection with a fixed n (clamped to the number of targets). Ties
/// go to the earlier t, then the lower k. Mixed masks each selected item
/// whole or at its highest-entropy codeword with equal probability.
MaskPlan select_top_entropy(const EntropyMap& map, int n, Granularity g, Rng& rng);

/// Sets the MASK flag at each planned pair. Original codewords stay in
/// `items` and serve as reconstruction targets.
MaskedSequence apply_mask(const std::vector<SemanticId>& sequence, const MaskPlan& plan, int K);

/// JSON lines of (user, t, k, entropy, masked) for inspection.
std::string format_entropy_jsonl(const std::string& user_id, const EntropyMap& map, const MaskPlan& plan);

}  // namespace mhl
