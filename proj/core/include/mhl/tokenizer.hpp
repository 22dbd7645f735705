#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mhl/rng.hpp"

namespace mhl {

using ItemIndex = std::uint32_t;

/// K codewords, one per codebook position.
struct SemanticId {
  std::vector<int> codewords;

  int size() const { return static_cast<int>(codewords.size()); }
  int operator[](int k) const { return codewords[static_cast<std::size_t>(k)]; }

  friend bool operator==(const SemanticId&, const SemanticId&) = default;
};

/// Items with their semantic IDs. codebook_sizes excludes the PAD slot; when
/// has_pad is set, PAD at position k is encoded as codebook_sizes[k].
class Catalog {
 public:
  Catalog() = default;
  Catalog(std::vector<std::string> item_ids, std::vector<SemanticId> ids, std::vector<int> codebook_sizes,
          bool has_pad = false);

  std::size_t size() const { return ids_.size(); }
  int K() const { return static_cast<int>(codebook_sizes_.size()); }
  const std::vector<int>& codebook_sizes() const { return codebook_sizes_; }
  bool has_pad() const { return has_pad_; }
  int pad_code(int k) const { return codebook_sizes_[static_cast<std::size_t>(k)]; }
  bool is_pad(int k, int code) const { return has_pad_ && code == pad_code(k); }

  const std::vector<std::string>& item_ids() const { return item_ids_; }
  const std::vector<SemanticId>& ids() const { return ids_; }
  const SemanticId& id(ItemIndex i) const { return ids_[i]; }
  const std::string& item_id(ItemIndex i) const { return item_ids_[i]; }

  std::optional<ItemIndex> find(const std::string& item_id) const;
  ItemIndex index_of(const std::string& item_id) const;  // data error if absent

 private:
  std::vector<std::string> item_ids_;
  std::vector<SemanticId> ids_;
  std::vector<int> codebook_sizes_;
  bool has_pad_ = false;
  std::unordered_map<std::string, ItemIndex> index_;
};

std::string format_catalog_jsonl(const Catalog& catalog);
Catalog parse_catalog_jsonl(const std::string& text, std::vector<int> codebook_sizes, bool has_pad);

struct PcaResult {
  Eigen::MatrixXd projected;  // n x d
  Eigen::MatrixXd basis;      // input_dim x d, columns by decreasing variance
  Eigen::RowVectorXd mean;    // 1 x input_dim
  Eigen::VectorXd variances;  // d component variances (population, divide by n)
};

/// Projects mean-centered rows onto the top-d principal directions. Each
/// basis column is sign-normalized so its largest-magnitude entry is
/// positive.
PcaResult reduce_embeddings(const Eigen::MatrixXd& x, int d);

struct CodebookSet {
  int K = 0;
  int codebook_size = 0;
  int sub_dim = 0;
  std::vector<Eigen::MatrixXd> codebooks;  // K matrices, codebook_size x sub_dim
  std::optional<Eigen::MatrixXd> rotation; // d x d, applied as z = y * R
  Eigen::MatrixXd pca_basis;               // input_dim x d
  Eigen::RowVectorXd pca_mean;

  int dim() const { return K * sub_dim; }
};

struct PqOptions {
  int K = 8;
  int codebook_size = 64;
  int iters = 25;
  std::uint64_t seed = 0;
  bool use_rotation = false;
  int opq_rounds = 4;
};

struct KMeansResult {
  Eigen::MatrixXd centroids;            // k x dim
  std::vector<int> assignment;
  std::vector<double> error_history;    // SSE after each assignment step
};

/// Lloyd's k-means with k-means++ seeding. Nearest-centroid ties go to the
/// lowest index; a cluster left empty is re-seeded at the point currently
/// farthest from its centroid (drawn from clusters with >= 2 members).
KMeansResult kmeans(const Eigen::MatrixXd& data, int k, int iters, Rng& rng);

/// Index of the nearest row of `centroids` to `v` (squared L2, lowest index on ties).
int nearest_centroid(const Eigen::MatrixXd& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& v);

/// Trains per-subspace codebooks on already-reduced vectors. The returned
/// set carries an identity PCA stage; build_tokenizer fills in a real one.
CodebookSet train_pq(const Eigen::MatrixXd& y, const PqOptions& opts);

/// PCA to pca_dim followed by train_pq.
CodebookSet build_tokenizer(const Eigen::MatrixXd& features, int pca_dim, const PqOptions& opts);

/// Applies PCA (and rotation) to a raw feature row.
Eigen::RowVectorXd project(const CodebookSet& cb, const Eigen::Ref<const Eigen::RowVectorXd>& x);
SemanticId encode_item(const Eigen::Ref<const Eigen::RowVectorXd>& x, const CodebookSet& cb);
/// Codes for already-projected rows (skips the PCA/rotation stage).
SemanticId encode_projected(const Eigen::Ref<const Eigen::RowVectorXd>& z, const CodebookSet& cb);

/// Sum of squared distances between projected rows and their reconstructions.
double quantization_error(const Eigen::MatrixXd& projected, const CodebookSet& cb);

nlohmann::json codebooks_to_json(const CodebookSet& cb);
CodebookSet codebooks_from_json(const nlohmann::json& j);

/// Dense float matrix file: uint32 n, uint32 dim, then n*dim float32, all little-endian, row-major.
Eigen::MatrixXd read_feature_matrix(const std::filesystem::path& path);
void write_feature_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m);

struct Neighbor {
  ItemIndex item = 0;
  int weight = 0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct ItemGraph {
  std::vector<std::vector<Neighbor>> neighbors;

  std::size_t size() const { return neighbors.size(); }
  /// Every item linked to every other item with weight 1.
  static ItemGraph fully_connected(std::size_t n);
};

/// Number of positions where both IDs carry the same non-PAD codeword.
int token_overlap(const SemanticId& a, const SemanticId& b, const Catalog& catalog);

/// Top-E neighbors by (overlap desc, index asc); zero-overlap pairs dropped.
ItemGraph build_token_graph(const Catalog& catalog, int max_edges = 50);

struct ExternalTokens {
  Catalog catalog;
  std::size_t padded = 0;     // lines shorter than K
  std::size_t truncated = 0;  // lines longer than K
};

/// Lines: `item_id tok tok ...`. Sequences are truncated/padded to K; the
/// vocabulary at each position is max token + 1 and PAD takes the next slot.
ExternalTokens ingest_external_tokens(const std::filesystem::path& path, int K);
ExternalTokens parse_external_tokens(const std::string& text, int K);

}  // namespace mhl
