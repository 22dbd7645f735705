#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "mhl/model.hpp"
#include "mhl/rng.hpp"
#include "mhl/tokenizer.hpp"

namespace mhl::testing {

inline ModelConfig toy_config(int K = 4, int W = 64, int hidden = 64, int layers = 2) {
  ModelConfig c;
  c.codebook_sizes.assign(static_cast<std::size_t>(K), W);
  c.hidden_size = hidden;
  c.n_layers = layers;
  c.n_heads = 4;
  c.ffn_dim = 2 * hidden;
  c.max_seq_len = 32;
  c.dropout = 0.0;
  return c;
}

inline SemanticId random_id(int K, int W, Rng& rng) {
  SemanticId id;
  for (int k = 0; k < K; ++k) id.codewords.push_back(static_cast<int>(uniform_int(rng, 0, W - 1)));
  return id;
}

inline std::vector<SemanticId> random_sequence(int T, int K, int W, Rng& rng) {
  std::vector<SemanticId> s;
  for (int t = 0; t < T; ++t) s.push_back(random_id(K, W, rng));
  return s;
}

/// With `distinct` set, no two items share a semantic ID (n must fit in W^K).
inline Catalog random_catalog(std::size_t n, int K, int W, std::uint64_t seed, bool distinct = false) {
  Rng rng = make_rng(seed, {99});
  std::vector<std::string> ids;
  std::vector<SemanticId> sids;
  while (sids.size() < n) {
    SemanticId id = random_id(K, W, rng);
    if (distinct && std::find(sids.begin(), sids.end(), id) != sids.end()) continue;
    ids.push_back("i" + std::to_string(sids.size()));
    sids.push_back(std::move(id));
  }
  return Catalog(ids, sids, std::vector<int>(static_cast<std::size_t>(K), W), false);
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(static_cast<std::uint64_t>(std::hash<std::string>{}(tag)) ^
            static_cast<std::uint64_t>(std::filesystem::file_time_type::clock::now().time_since_epoch().count()));
    path_ = std::filesystem::temp_directory_path() / ("mhl-" + tag + "-" + std::to_string(rng() % 1000000007));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mhl::testing
