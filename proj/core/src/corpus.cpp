#include "mhl/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "mhl/error.hpp"
#include "mhl/hash.hpp"
#include "mhl/rng.hpp"

namespace mhl {
namespace {

using json = nlohmann::json;

struct Row {
  std::string user;
  std::string item;
  std::int64_t ts;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \r\n\t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \r\n\t");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_int64(std::string_view s, std::int64_t& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

Row parse_tsv_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    fields.push_back(trim(std::string_view(line).substr(start, tab == std::string::npos ? std::string::npos : tab - start)));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
    throw_data("line " + std::to_string(lineno) + ": expected user<TAB>item<TAB>timestamp");
  }
  Row row{fields[0], fields[1], 0};
  if (!parse_int64(fields[2], row.ts)) {
    throw_data("line " + std::to_string(lineno) + ": bad timestamp '" + fields[2] + "'");
  }
  return row;
}

std::string json_id(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  throw std::invalid_argument("id must be a string or integer");
}

Row parse_jsonl_line(const std::string& line, std::size_t lineno) {
  try {
    const json j = json::parse(line);
    Row row{json_id(j.at("user_id")), json_id(j.at("item_id")), j.at("timestamp").get<std::int64_t>()};
    if (row.user.empty() || row.item.empty()) throw std::invalid_argument("empty id");
    return row;
  } catch (const std::exception& e) {
    throw_data("line " + std::to_string(lineno) + ": " + e.what());
  }
}

RawCorpus group_rows(std::vector<Row> rows) {
  RawCorpus corpus;
  std::unordered_map<std::string, std::size_t> slot;
  for (auto& r : rows) {
    auto [it, inserted] = slot.try_emplace(r.user, corpus.users.size());
    if (inserted) corpus.users.push_back(UserEvents{r.user, {}});
    corpus.users[it->second].events.push_back(Event{std::move(r.item), r.ts});
  }
  for (auto& u : corpus.users) {
    std::stable_sort(u.events.begin(), u.events.end(),
                     [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
  }
  return corpus;
}

}  // namespace

std::size_t RawCorpus::num_events() const {
  std::size_t n = 0;
  for (const auto& u : users) n += u.events.size();
  return n;
}

std::size_t RawCorpus::num_items() const {
  std::unordered_set<std::string> items;
  for (const auto& u : users)
    for (const auto& e : u.events) items.insert(e.item_id);
  return items.size();
}

InteractionFormat parse_interaction_format(const std::string& name) {
  if (name == "tsv") return InteractionFormat::kTsv;
  if (name == "jsonl") return InteractionFormat::kJsonl;
  throw_config("data.format: expected 'tsv' or 'jsonl', got '" + name + "'");
}

RawCorpus parse_interactions(const std::string& text, InteractionFormat format) {
  std::vector<Row> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    rows.push_back(format == InteractionFormat::kTsv ? parse_tsv_line(line, lineno) : parse_jsonl_line(line, lineno));
  }
  return group_rows(std::move(rows));
}

RawCorpus load_interactions(const std::filesystem::path& path, InteractionFormat format) {
  if (!std::filesystem::exists(path)) throw_data("interaction file not found: " + path.string());
  return parse_interactions(read_file(path), format);
}

std::string format_interactions_tsv(const RawCorpus& corpus) {
  std::string out;
  for (const auto& u : corpus.users)
    for (const auto& e : u.events) out += u.user_id + '\t' + e.item_id + '\t' + std::to_string(e.timestamp) + '\n';
  return out;
}

RawCorpus core_filter(const RawCorpus& corpus, int min_count) {
  if (min_count < 1) throw_config("core_filter: min_count must be >= 1");
  RawCorpus cur = corpus;
  const auto threshold = static_cast<std::size_t>(min_count);
  for (;;) {
    std::unordered_map<std::string, std::size_t> item_count;
    for (const auto& u : cur.users)
      for (const auto& e : u.events) ++item_count[e.item_id];

    bool changed = false;
    RawCorpus next;
    for (const auto& u : cur.users) {
      if (u.events.size() < threshold) {
        changed = true;
        continue;
      }
      UserEvents kept{u.user_id, {}};
      for (const auto& e : u.events) {
        if (item_count[e.item_id] >= threshold) kept.events.push_back(e);
      }
      if (kept.events.size() != u.events.size()) changed = true;
      next.users.push_back(std::move(kept));
    }
    cur = std::move(next);
    if (!changed) return cur;
  }
}

std::vector<std::string> UserSplit::test_context() const {
  std::vector<std::string> ctx = train;
  ctx.push_back(val_target);
  return ctx;
}

SplitCorpus split_leave_one_out(const RawCorpus& corpus) {
  if (corpus.users.empty()) throw_data("split_leave_one_out: empty corpus");
  SplitCorpus split;
  for (const auto& u : corpus.users) {
    std::vector<std::string> items;
    items.reserve(u.events.size());
    for (const auto& e : u.events) items.push_back(e.item_id);
    if (items.size() < 3) {
      split.train_only.emplace_back(u.user_id, std::move(items));
      continue;
    }
    UserSplit s;
    s.user_id = u.user_id;
    s.test_target = items.back();
    s.val_target = items[items.size() - 2];
    items.resize(items.size() - 2);
    s.train = std::move(items);
    split.users.push_back(std::move(s));
  }
  return split;
}

std::string format_split_jsonl(const SplitCorpus& split) {
  std::string out;
  for (const auto& u : split.users) {
    json j{{"user_id", u.user_id}, {"train", u.train}, {"val", u.val_target}, {"test", u.test_target}};
    out += j.dump() + '\n';
  }
  for (const auto& [user, items] : split.train_only) {
    json j{{"user_id", user}, {"train", items}, {"val", nullptr}, {"test", nullptr}};
    out += j.dump() + '\n';
  }
  return out;
}

SplitCorpus parse_split_jsonl(const std::string& text) {
  SplitCorpus split;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      auto train = j.at("train").get<std::vector<std::string>>();
      if (j.at("val").is_null() || j.at("test").is_null()) {
        split.train_only.emplace_back(j.at("user_id").get<std::string>(), std::move(train));
      } else {
        split.users.push_back(UserSplit{j.at("user_id").get<std::string>(), std::move(train),
                                        j.at("val").get<std::string>(), j.at("test").get<std::string>()});
      }
    } catch (const json::exception& e) {
      throw_data("split manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return split;
}

void SynthConfig::validate() const {
  if (n_users <= 0 || n_items <= 0 || n_intents <= 0 || feature_dim <= 0)
    throw_config("synth: counts must be positive");
  if (min_path_len <= 0 || max_path_len < min_path_len) throw_config("synth: bad path_len_range");
  if (!(intent_switch_prob >= 0.0 && intent_switch_prob <= 1.0)) throw_config("synth: intent_switch_prob not in [0,1]");
  if (!(noise_prob >= 0.0 && noise_prob <= 1.0)) throw_config("synth: noise_prob not in [0,1]");
  if (n_items < n_intents) throw_config("synth: n_items < n_intents");
}

SynthData synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthData out;
  const int n_items = cfg.n_items;
  const int n_intents = cfg.n_intents;
  const int dim = cfg.feature_dim;

  // Contiguous intent blocks.
  std::vector<std::vector<int>> members(n_intents);
  out.item_intent.resize(n_items);
  for (int i = 0; i < n_items; ++i) {
    const int c = static_cast<int>(static_cast<std::int64_t>(i) * n_intents / n_items);
    out.item_intent[i] = c;
    members[c].push_back(i);
  }

  Rng feat_rng = make_rng(cfg.seed, {stream::kSynth, 0});
  Eigen::MatrixXd centers(n_intents, dim);
  Eigen::MatrixXd ring_axes(2 * n_intents, dim);
  for (int c = 0; c < n_intents; ++c)
    for (int d = 0; d < dim; ++d) centers(c, d) = 2.0 * normal01(feat_rng);
  for (int r = 0; r < 2 * n_intents; ++r)
    for (int d = 0; d < dim; ++d) ring_axes(r, d) = normal01(feat_rng);
  out.item_features.resize(n_items, dim);
  for (int c = 0; c < n_intents; ++c) {
    const auto& m = members[c];
    for (std::size_t pos = 0; pos < m.size(); ++pos) {
      const double theta = 6.283185307179586 * static_cast<double>(pos) / static_cast<double>(m.size());
      Eigen::RowVectorXd f = centers.row(c) + std::cos(theta) * ring_axes.row(2 * c) + std::sin(theta) * ring_axes.row(2 * c + 1);
      for (int d = 0; d < dim; ++d) f(d) += 0.3 * normal01(feat_rng);
      out.item_features.row(m[pos]) = f;
    }
  }
  out.item_ids.reserve(n_items);
  for (int i = 0; i < n_items; ++i) out.item_ids.push_back("i" + std::to_string(i));

  out.user_intent.resize(cfg.n_users);
  out.corpus.users.reserve(cfg.n_users);
  for (int u = 0; u < cfg.n_users; ++u) {
    Rng rng = make_rng(cfg.seed, {stream::kSynth, 1, static_cast<std::uint64_t>(u)});
    const int len = static_cast<int>(uniform_int(rng, cfg.min_path_len, cfg.max_path_len));
    int intent = static_cast<int>(uniform_int(rng, 0, n_intents - 1));
    std::size_t pos = uniform_int(rng, 0, members[intent].size() - 1);
    const int primary = intent;
    std::size_t primary_pos = pos;
    UserEvents ue{"u" + std::to_string(u), {}};
    auto& labels = out.user_intent[u];
    for (int t = 0; t < len; ++t) {
      int item = 0;
      if (t > 0 && n_intents > 1 && uniform01(rng) < cfg.intent_switch_prob) {
        if (intent == primary) {
          // Excursion away from the primary intent; remember where we left it.
          primary_pos = pos;
          int next = static_cast<int>(uniform_int(rng, 0, n_intents - 2));
          if (next >= intent) ++next;
          intent = next;
          pos = uniform_int(rng, 0, members[intent].size() - 1);
        } else {
          // Return home and resume the primary walk.
          intent = primary;
          pos = (primary_pos + uniform_int(rng, 1, 3)) % members[intent].size();
        }
        item = members[intent][pos];
      } else if (t > 0 && n_items > static_cast<int>(members[intent].size()) && uniform01(rng) < cfg.noise_prob) {
        const std::size_t off = members[intent].size();
        const auto pick = static_cast<int>(uniform_int(rng, 0, n_items - off - 1));
        // Skip over the active intent's contiguous block.
        item = pick < members[intent].front() ? pick : pick + static_cast<int>(off);
      } else {
        if (t > 0) pos = (pos + uniform_int(rng, 1, 3)) % members[intent].size();
        item = members[intent][pos];
      }
      ue.events.push_back(Event{out.item_ids[item], 1'000'000 + 60 * static_cast<std::int64_t>(t)});
      labels.push_back(intent);
    }
    out.corpus.users.push_back(std::move(ue));
  }
  return out;
}

TruncationResult truncate_long(const SplitCorpus& split, int min_len, int drop_last) {
  if (drop_last < 0 || drop_last >= min_len) throw_config("truncate_long: require 0 <= drop_last < min_len");
  TruncationResult res;
  for (const auto& u : split.users) {
    const std::size_t full_len = u.train.size() + 2;
    if (full_len <= static_cast<std::size_t>(min_len)) continue;
    std::vector<std::string> seq = u.test_context();
    seq.push_back(u.test_target);
    seq.resize(full_len - static_cast<std::size_t>(drop_last));
    UserSplit t;
    t.user_id = u.user_id;
    t.test_target = seq.back();
    seq.pop_back();
    t.val_target = seq.back();
    seq.pop_back();
    t.train = std::move(seq);
    res.split.users.push_back(std::move(t));
  }
  if (res.split.users.empty()) {
    res.empty_warning = true;
    std::cerr << "warning: truncate_long found no sequence longer than " << min_len << '\n';
  }
  return res;
}

}  // namespace mhl
