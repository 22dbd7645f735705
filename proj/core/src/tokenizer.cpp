#include "mhl/tokenizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "mhl/error.hpp"
#include "mhl/hash.hpp"

namespace mhl {

using json = nlohmann::json;

Catalog::Catalog(std::vector<std::string> item_ids, std::vector<SemanticId> ids, std::vector<int> codebook_sizes,
                 bool has_pad)
    : item_ids_(std::move(item_ids)), ids_(std::move(ids)), codebook_sizes_(std::move(codebook_sizes)), has_pad_(has_pad) {
  if (item_ids_.size() != ids_.size()) throw_data("catalog: item id / semantic id count mismatch");
  const int K = static_cast<int>(codebook_sizes_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i].size() != K) throw_data("catalog: item " + item_ids_[i] + " has " + std::to_string(ids_[i].size()) + " codewords, expected " + std::to_string(K));
    for (int k = 0; k < K; ++k) {
      const int limit = codebook_sizes_[k] + (has_pad_ ? 1 : 0);
      if (ids_[i][k] < 0 || ids_[i][k] >= limit) throw_data("catalog: item " + item_ids_[i] + " codeword out of range at position " + std::to_string(k));
    }
    if (!index_.emplace(item_ids_[i], static_cast<ItemIndex>(i)).second) throw_data("catalog: duplicate item id " + item_ids_[i]);
  }
}

std::optional<ItemIndex> Catalog::find(const std::string& item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ItemIndex Catalog::index_of(const std::string& item_id) const {
  auto idx = find(item_id);
  if (!idx) throw_data("item '" + item_id + "' is not in the catalog");
  return *idx;
}

std::string format_catalog_jsonl(const Catalog& catalog) {
  std::string out;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    out += json{{"item_id", catalog.item_ids()[i]}, {"codewords", catalog.ids()[i].codewords}}.dump();
    out += '\n';
  }
  return out;
}

Catalog parse_catalog_jsonl(const std::string& text, std::vector<int> codebook_sizes, bool has_pad) {
  std::vector<std::string> item_ids;
  std::vector<SemanticId> ids;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      item_ids.push_back(j.at("item_id").get<std::string>());
      ids.push_back(SemanticId{j.at("codewords").get<std::vector<int>>()});
    } catch (const json::exception& e) {
      throw_data("catalog line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return Catalog(std::move(item_ids), std::move(ids), std::move(codebook_sizes), has_pad);
}

PcaResult reduce_embeddings(const Eigen::MatrixXd& x, int d) {
  const Eigen::Index n = x.rows();
  const Eigen::Index in_dim = x.cols();
  if (d <= 0 || d > std::min(n, in_dim)) {
    throw_config("reduce_embeddings: d=" + std::to_string(d) + " must be in [1, min(n, input_dim)=" +
                 std::to_string(std::min(n, in_dim)) + "]");
  }
  if (!x.allFinite()) throw_data("reduce_embeddings: non-finite input");

  PcaResult r;
  r.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - r.mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw_numeric("reduce_embeddings: eigendecomposition failed");

  const Eigen::VectorXd& vals = eig.eigenvalues();  // ascending
  const double top = std::max(vals(in_dim - 1), 0.0);
  int rank = 0;
  for (Eigen::Index i = 0; i < in_dim; ++i)
    if (vals(i) > 1e-12 * top && vals(i) > 0.0) ++rank;
  if (d > rank) {
    throw_config("reduce_embeddings: d=" + std::to_string(d) + " exceeds the achievable rank " + std::to_string(rank));
  }

  r.basis.resize(in_dim, d);
  r.variances.resize(d);
  for (int c = 0; c < d; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(in_dim - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    r.basis.col(c) = v;
    r.variances(c) = vals(in_dim - 1 - c);
  }
  r.projected = centered * r.basis;
  return r;
}

int nearest_centroid(const Eigen::MatrixXd& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double dist = (centroids.row(c) - v).squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<int>(c);
    }
  }
  return best;
}

KMeansResult kmeans(const Eigen::MatrixXd& data, int k, int iters, Rng& rng) {
  const Eigen::Index n = data.rows();
  if (k < 1) throw_config("kmeans: k must be >= 1");
  if (n < k) throw_config("kmeans: need at least k=" + std::to_string(k) + " points, got " + std::to_string(n));

  KMeansResult res;
  res.centroids.resize(k, data.cols());

  // k-means++ seeding.
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Eigen::Index first = static_cast<Eigen::Index>(uniform_int(rng, 0, static_cast<std::uint64_t>(n - 1)));
  res.centroids.row(0) = data.row(first);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (data.row(i) - res.centroids.row(c - 1)).squaredNorm());
      total += d2[i];
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double r = uniform01(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (r < acc && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(uniform_int(rng, 0, static_cast<std::uint64_t>(n - 1)));
    }
    res.centroids.row(c) = data.row(pick);
  }

  res.assignment.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> dist(static_cast<std::size_t>(n));
  auto assign = [&] {
    double sse = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = nearest_centroid(res.centroids, data.row(i));
      res.assignment[i] = c;
      dist[i] = (data.row(i) - res.centroids.row(c)).squaredNorm();
      sse += dist[i];
    }
    return sse;
  };

  for (int it = 0; it <= iters; ++it) {
    double sse = assign();
    if (it == iters) {
      res.error_history.push_back(sse);
      break;
    }

    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int a : res.assignment) ++counts[a];
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      Eigen::Index far = -1;
      double far_d = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (counts[res.assignment[i]] >= 2 && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      }
      if (far < 0) break;  // every point already sits on a centroid
      --counts[res.assignment[far]];
      res.assignment[far] = c;
      counts[c] = 1;
      res.centroids.row(c) = data.row(far);
      sse -= dist[far];
      dist[far] = 0.0;
    }
    res.error_history.push_back(sse);

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, data.cols());
    for (Eigen::Index i = 0; i < n; ++i) sums.row(res.assignment[i]) += data.row(i);
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0) res.centroids.row(c) = sums.row(c) / static_cast<double>(counts[c]);
  }
  return res;
}

namespace {

std::vector<Eigen::MatrixXd> fit_codebooks(const Eigen::MatrixXd& z, const PqOptions& opts, int sub_dim,
                                           std::uint64_t round) {
  std::vector<Eigen::MatrixXd> books;
  books.reserve(static_cast<std::size_t>(opts.K));
  for (int k = 0; k < opts.K; ++k) {
    Rng rng = make_rng(opts.seed, {stream::kKMeans, round, static_cast<std::uint64_t>(k)});
    const Eigen::MatrixXd slice = z.middleCols(static_cast<Eigen::Index>(k) * sub_dim, sub_dim);
    books.push_back(kmeans(slice, opts.codebook_size, opts.iters, rng).centroids);
  }
  return books;
}

Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& z, const std::vector<Eigen::MatrixXd>& books, int sub_dim) {
  Eigen::MatrixXd out(z.rows(), z.cols());
  for (std::size_t k = 0; k < books.size(); ++k) {
    const Eigen::Index off = static_cast<Eigen::Index>(k) * sub_dim;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const Eigen::RowVectorXd sub = z.row(i).segment(off, sub_dim);
      out.row(i).segment(off, sub_dim) = books[k].row(nearest_centroid(books[k], sub));
    }
  }
  return out;
}

}  // namespace

CodebookSet train_pq(const Eigen::MatrixXd& y, const PqOptions& opts) {
  const auto d = static_cast<int>(y.cols());
  if (opts.K < 1 || d % opts.K != 0) {
    throw_config("train_pq: dimension " + std::to_string(d) + " is not divisible by K=" + std::to_string(opts.K));
  }
  if (opts.codebook_size < 1) throw_config("train_pq: codebook_size must be >= 1");
  if (y.rows() < opts.codebook_size) {
    throw_config("train_pq: need n >= codebook_size (" + std::to_string(y.rows()) + " < " + std::to_string(opts.codebook_size) + ")");
  }
  if (!y.allFinite()) throw_data("train_pq: non-finite input");

  CodebookSet cb;
  cb.K = opts.K;
  cb.codebook_size = opts.codebook_size;
  cb.sub_dim = d / opts.K;
  cb.pca_basis = Eigen::MatrixXd::Identity(d, d);
  cb.pca_mean = Eigen::RowVectorXd::Zero(d);

  if (!opts.use_rotation) {
    cb.codebooks = fit_codebooks(y, opts, cb.sub_dim, 0);
    return cb;
  }

  // Alternate codebook fitting and orthogonal Procrustes refits of R.
  Eigen::MatrixXd rot = Eigen::MatrixXd::Identity(d, d);
  for (int round = 0; round < opts.opq_rounds; ++round) {
    const Eigen::MatrixXd z = y * rot;
    const auto books = fit_codebooks(z, opts, cb.sub_dim, static_cast<std::uint64_t>(round));
    const Eigen::MatrixXd target = reconstruct(z, books, cb.sub_dim);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(y.transpose() * target, Eigen::ComputeFullU | Eigen::ComputeFullV);
    rot = svd.matrixU() * svd.matrixV().transpose();
  }
  cb.codebooks = fit_codebooks(y * rot, opts, cb.sub_dim, static_cast<std::uint64_t>(opts.opq_rounds));
  cb.rotation = rot;
  return cb;
}

CodebookSet build_tokenizer(const Eigen::MatrixXd& features, int pca_dim, const PqOptions& opts) {
  PcaResult pca = reduce_embeddings(features, pca_dim);
  CodebookSet cb = train_pq(pca.projected, opts);
  cb.pca_basis = std::move(pca.basis);
  cb.pca_mean = std::move(pca.mean);
  return cb;
}

Eigen::RowVectorXd project(const CodebookSet& cb, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  if (x.size() != cb.pca_basis.rows()) {
    throw_data("encode: feature dimension " + std::to_string(x.size()) + " != " + std::to_string(cb.pca_basis.rows()));
  }
  if (!x.allFinite()) throw_data("encode: non-finite feature vector");
  Eigen::RowVectorXd y = (x - cb.pca_mean) * cb.pca_basis;
  if (cb.rotation) y = y * (*cb.rotation);
  return y;
}

SemanticId encode_projected(const Eigen::Ref<const Eigen::RowVectorXd>& z, const CodebookSet& cb) {
  SemanticId id;
  id.codewords.resize(static_cast<std::size_t>(cb.K));
  for (int k = 0; k < cb.K; ++k) {
    const Eigen::RowVectorXd sub = z.segment(static_cast<Eigen::Index>(k) * cb.sub_dim, cb.sub_dim);
    id.codewords[k] = nearest_centroid(cb.codebooks[k], sub);
  }
  return id;
}

SemanticId encode_item(const Eigen::Ref<const Eigen::RowVectorXd>& x, const CodebookSet& cb) {
  return encode_projected(project(cb, x), cb);
}

double quantization_error(const Eigen::MatrixXd& projected, const CodebookSet& cb) {
  double err = 0.0;
  for (Eigen::Index i = 0; i < projected.rows(); ++i) {
    for (int k = 0; k < cb.K; ++k) {
      const Eigen::RowVectorXd sub = projected.row(i).segment(static_cast<Eigen::Index>(k) * cb.sub_dim, cb.sub_dim);
      err += (cb.codebooks[k].row(nearest_centroid(cb.codebooks[k], sub)) - sub).squaredNorm();
    }
  }
  return err;
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw_data("codebooks: ragged matrix");
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

}  // namespace

json codebooks_to_json(const CodebookSet& cb) {
  json j;
  j["format"] = "mhl-codebooks";
  j["version"] = 1;
  j["K"] = cb.K;
  j["codebook_size"] = cb.codebook_size;
  j["sub_dim"] = cb.sub_dim;
  j["codebooks"] = json::array();
  for (const auto& b : cb.codebooks) j["codebooks"].push_back(matrix_to_json(b));
  j["rotation"] = cb.rotation ? matrix_to_json(*cb.rotation) : json(nullptr);
  j["pca_basis"] = matrix_to_json(cb.pca_basis);
  j["pca_mean"] = std::vector<double>(cb.pca_mean.data(), cb.pca_mean.data() + cb.pca_mean.size());
  return j;
}

CodebookSet codebooks_from_json(const json& j) {
  try {
    if (j.at("format") != "mhl-codebooks") throw_data("codebooks: unexpected format tag");
    if (j.at("version").get<int>() != 1) throw_data("codebooks: unsupported version " + j.at("version").dump());
    CodebookSet cb;
    cb.K = j.at("K").get<int>();
    cb.codebook_size = j.at("codebook_size").get<int>();
    cb.sub_dim = j.at("sub_dim").get<int>();
    for (const auto& b : j.at("codebooks")) cb.codebooks.push_back(matrix_from_json(b));
    if (!j.at("rotation").is_null()) cb.rotation = matrix_from_json(j.at("rotation"));
    cb.pca_basis = matrix_from_json(j.at("pca_basis"));
    const auto mean = j.at("pca_mean").get<std::vector<double>>();
    cb.pca_mean = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    if (static_cast<int>(cb.codebooks.size()) != cb.K) throw_data("codebooks: K mismatch");
    return cb;
  } catch (const json::exception& e) {
    throw_data(std::string("codebooks: ") + e.what());
  }
}

namespace {

std::uint32_t load_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void store_u32le(std::string& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

}  // namespace

Eigen::MatrixXd read_feature_matrix(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8) throw_data(path.string() + ": truncated feature header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t n = load_u32le(p);
  const std::uint32_t dim = load_u32le(p + 4);
  const std::size_t expected = 8 + static_cast<std::size_t>(n) * dim * 4;
  if (bytes.size() != expected) {
    throw_data(path.string() + ": expected " + std::to_string(expected) + " bytes for " + std::to_string(n) + "x" +
               std::to_string(dim) + ", got " + std::to_string(bytes.size()));
  }
  Eigen::MatrixXd m(n, dim);
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * dim; ++i) {
    const std::uint32_t bits = load_u32le(p + 8 + 4 * i);
    m(static_cast<Eigen::Index>(i / dim), static_cast<Eigen::Index>(i % dim)) = std::bit_cast<float>(bits);
  }
  return m;
}

void write_feature_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  std::string out;
  out.reserve(8 + static_cast<std::size_t>(m.size()) * 4);
  store_u32le(out, static_cast<std::uint32_t>(m.rows()));
  store_u32le(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) store_u32le(out, std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c))));
  write_file(path, out);
}

ItemGraph ItemGraph::fully_connected(std::size_t n) {
  ItemGraph g;
  g.neighbors.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) g.neighbors[i].push_back(Neighbor{static_cast<ItemIndex>(j), 1});
  return g;
}

int token_overlap(const SemanticId& a, const SemanticId& b, const Catalog& catalog) {
  int w = 0;
  for (int k = 0; k < a.size(); ++k)
    if (a[k] == b[k] && !catalog.is_pad(k, a[k])) ++w;
  return w;
}

ItemGraph build_token_graph(const Catalog& catalog, int max_edges) {
  if (catalog.size() == 0) throw_data("build_token_graph: empty catalog");
  if (max_edges < 0) throw_config("build_token_graph: E must be >= 0");
  const std::size_t n = catalog.size();
  const int K = catalog.K();

  // Inverted index: (position, codeword) -> items.
  std::vector<std::vector<std::vector<ItemIndex>>> postings(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) postings[k].resize(static_cast<std::size_t>(catalog.codebook_sizes()[k]) + 1);
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) {
      const int c = catalog.id(static_cast<ItemIndex>(i))[k];
      if (!catalog.is_pad(k, c)) postings[k][c].push_back(static_cast<ItemIndex>(i));
    }

  ItemGraph g;
  g.neighbors.resize(n);
  std::vector<int> count(n, 0);
  std::vector<ItemIndex> touched;
  for (std::size_t i = 0; i < n; ++i) {
    touched.clear();
    for (int k = 0; k < K; ++k) {
      const int c = catalog.id(static_cast<ItemIndex>(i))[k];
      if (catalog.is_pad(k, c)) continue;
      for (ItemIndex j : postings[k][c]) {
        if (j == i) continue;
        if (count[j]++ == 0) touched.push_back(j);
      }
    }
    auto& nb = g.neighbors[i];
    nb.reserve(touched.size());
    for (ItemIndex j : touched) {
      nb.push_back(Neighbor{j, count[j]});
      count[j] = 0;
    }
    auto order = [](const Neighbor& a, const Neighbor& b) {
      return a.weight != b.weight ? a.weight > b.weight : a.item < b.item;
    };
    if (nb.size() > static_cast<std::size_t>(max_edges)) {
      std::partial_sort(nb.begin(), nb.begin() + max_edges, nb.end(), order);
      nb.resize(static_cast<std::size_t>(max_edges));
    } else {
      std::sort(nb.begin(), nb.end(), order);
    }
  }
  return g;
}

ExternalTokens parse_external_tokens(const std::string& text, int K) {
  if (K < 1) throw_config("ingest_external_tokens: K must be >= 1");
  std::vector<std::string> item_ids;
  std::vector<std::vector<long long>> rows;
  ExternalTokens out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string item;
    if (!(ls >> item)) continue;
    std::vector<long long> toks;
    std::string tok;
    while (ls >> tok) {
      long long v = 0;
      std::size_t used = 0;
      try {
        v = std::stoll(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw_data("tokens line " + std::to_string(lineno) + ": '" + tok + "' is not an integer");
      if (v < 0) throw_data("tokens line " + std::to_string(lineno) + ": negative token " + tok);
      if (v > std::numeric_limits<int>::max() - 2) throw_data("tokens line " + std::to_string(lineno) + ": token too large");
      toks.push_back(v);
    }
    if (static_cast<int>(toks.size()) < K) ++out.padded;
    if (static_cast<int>(toks.size()) > K) {
      ++out.truncated;
      toks.resize(static_cast<std::size_t>(K));
    }
    item_ids.push_back(std::move(item));
    rows.push_back(std::move(toks));
  }

  std::vector<int> vocab(static_cast<std::size_t>(K), 1);
  for (const auto& r : rows)
    for (std::size_t k = 0; k < r.size(); ++k) vocab[k] = std::max(vocab[k], static_cast<int>(r[k]) + 1);

  std::vector<SemanticId> ids;
  ids.reserve(rows.size());
  for (const auto& r : rows) {
    SemanticId id;
    id.codewords.resize(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) id.codewords[k] = k < static_cast<int>(r.size()) ? static_cast<int>(r[k]) : vocab[k];
    ids.push_back(std::move(id));
  }
  out.catalog = Catalog(std::move(item_ids), std::move(ids), std::move(vocab), true);
  return out;
}

ExternalTokens ingest_external_tokens(const std::filesystem::path& path, int K) {
  return parse_external_tokens(read_file(path), K);
}

}  // namespace mhl
