#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mhl {

struct Event {
  std::string item_id;
  std::int64_t timestamp = 0;

  friend bool operator==(const Event&, const Event&) = default;
};

struct UserEvents {
  std::string user_id;
  std::vector<Event> events;  // non-decreasing timestamps

  friend bool operator==(const UserEvents&, const UserEvents&) = default;
};

/// Users appear in first-seen order; events are stable-sorted by timestamp.
struct RawCorpus {
  std::vector<UserEvents> users;

  std::size_t num_events() const;
  std::size_t num_items() const;

  friend bool operator==(const RawCorpus&, const RawCorpus&) = default;
};

enum class InteractionFormat { kTsv, kJsonl };

InteractionFormat parse_interaction_format(const std::string& name);

/// TSV lines are `user<TAB>item<TAB>timestamp`; JSON lines carry the keys
/// "user_id", "item_id", "timestamp". Blank lines are skipped. Parse
/// failures throw a data error naming the 1-based line number.
RawCorpus load_interactions(const std::filesystem::path& path, InteractionFormat format);
RawCorpus parse_interactions(const std::string& text, InteractionFormat format);
std::string format_interactions_tsv(const RawCorpus& corpus);

/// Iterated k-core: drops users and items below min_count until nothing
/// changes. Counts are taken over all events (future val/test targets
/// included).
RawCorpus core_filter(const RawCorpus& corpus, int min_count = 5);

struct UserSplit {
  std::string user_id;
  std::vector<std::string> train;  // full history minus the last two events
  std::string val_target;
  std::string test_target;

  /// Context for the validation target (== train).
  const std::vector<std::string>& val_context() const { return train; }
  /// Context for the test target (train + val target).
  std::vector<std::string> test_context() const;

  friend bool operator==(const UserSplit&, const UserSplit&) = default;
};

struct SplitCorpus {
  std::vector<UserSplit> users;                     // users with >= 3 events
  std::vector<std::pair<std::string, std::vector<std::string>>> train_only;  // users with < 3 events
  std::size_t num_train_only() const { return train_only.size(); }

  friend bool operator==(const SplitCorpus&, const SplitCorpus&) = default;
};

SplitCorpus split_leave_one_out(const RawCorpus& corpus);

/// One user per line: {"user_id", "train", "val", "test"}. Train-only users
/// are written with null val/test.
std::string format_split_jsonl(const SplitCorpus& split);
SplitCorpus parse_split_jsonl(const std::string& text);

struct SynthConfig {
  int n_users = 2000;
  int n_items = 500;
  int n_intents = 20;
  int min_path_len = 5;
  int max_path_len = 30;
  double intent_switch_prob = 0.1;
  double noise_prob = 0.1;
  int feature_dim = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthData {
  RawCorpus corpus;
  Eigen::MatrixXd item_features;             // n_items x feature_dim, row i = item "i<i>"
  std::vector<std::string> item_ids;
  std::vector<int> item_intent;              // cluster of each item
  std::vector<std::vector<int>> user_intent; // active intent per event, per user
};

/// Latent-intent corpus. Items are split into contiguous intent clusters
/// with features drawn around a per-intent center. Each user walks its
/// active intent's ring of items with short forward jumps, switches intent
/// with intent_switch_prob and emits an off-intent item with noise_prob.
SynthData synth_generate(const SynthConfig& cfg);

struct TruncationResult {
  SplitCorpus split;
  bool empty_warning = false;
};

/// Keeps users whose full sequence (train + val + test) is longer than
/// min_len, drops the last drop_last events and re-targets the test on the
/// last remaining event.
TruncationResult truncate_long(const SplitCorpus& split, int min_len = 20, int drop_last = 15);

}  // namespace mhl
