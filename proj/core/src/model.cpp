#include "mhl/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mhl/error.hpp"
#include "mhl/parallel.hpp"

namespace mhl {

using json = nlohmann::json;

namespace {

constexpr double kLnEps = 1e-5;
constexpr std::size_t kGradChunks = 8;

void layer_norm(const RowMatrix& x, const Eigen::Ref<const Eigen::RowVectorXd>& g,
                const Eigen::Ref<const Eigen::RowVectorXd>& b, RowMatrix& y, RowMatrix& xhat, Eigen::VectorXd& rstd) {
  const Eigen::Index n = x.rows();
  const double inv_h = 1.0 / static_cast<double>(x.cols());
  y.resize(n, x.cols());
  xhat.resize(n, x.cols());
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).sum() * inv_h;
    const Eigen::RowVectorXd c = x.row(r).array() - mu;
    const double var = c.squaredNorm() * inv_h;
    rstd(r) = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(r) = c * rstd(r);
    y.row(r) = xhat.row(r).cwiseProduct(g) + b;
  }
}

RowMatrix layer_norm_backward(const RowMatrix& dy, const RowMatrix& xhat, const Eigen::VectorXd& rstd,
                              const Eigen::Ref<const Eigen::RowVectorXd>& g, MatrixMap dg, MatrixMap db) {
  dg.row(0) += dy.cwiseProduct(xhat).colwise().sum();
  db.row(0) += dy.colwise().sum();
  const double inv_h = 1.0 / static_cast<double>(dy.cols());
  RowMatrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(g);
    const double m1 = dxhat.sum() * inv_h;
    const double m2 = dxhat.dot(xhat.row(r)) * inv_h;
    dx.row(r) = rstd(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
  }
  return dx;
}

constexpr double kInvSqrt2 = 0.7071067811865475244008443621048490392848359376885;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014326779399460599343818684758586311649;
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

RowMatrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  RowMatrix m(rows, cols);
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng) < rate ? 0.0 : keep;
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (codebook_sizes.empty()) throw_config("model: K must be >= 1");
  for (int s : codebook_sizes)
    if (s < 1) throw_config("model: codebook sizes must be >= 1");
  if (hidden_size < 1 || n_layers < 0 || n_heads < 1 || ffn_dim < 1 || max_seq_len < 1)
    throw_config("model: dimensions must be positive");
  if (hidden_size % n_heads != 0) throw_config("model: hidden_size must be divisible by n_heads");
  if (!(temperature > 0.0)) throw_config("model: temperature must be > 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw_config("model: dropout must be in [0, 1)");
  if (!(init_std >= 0.0)) throw_config("model: init_std must be >= 0");
}

ModelConfig ModelConfig::paper_preset(std::vector<int> codebook_sizes) {
  ModelConfig c;
  c.codebook_sizes = std::move(codebook_sizes);
  c.hidden_size = 448;
  c.n_layers = 2;
  c.n_heads = 4;
  c.ffn_dim = 1024;
  c.max_seq_len = 50;
  c.dropout = 0.3;
  return c;
}

json to_json(const ModelConfig& c) {
  return json{{"codebook_sizes", c.codebook_sizes}, {"pad", c.pad},           {"hidden_size", c.hidden_size},
              {"n_layers", c.n_layers},             {"n_heads", c.n_heads},   {"ffn_dim", c.ffn_dim},
              {"max_seq_len", c.max_seq_len},       {"dropout", c.dropout},   {"temperature", c.temperature},
              {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.codebook_sizes = j.at("codebook_sizes").get<std::vector<int>>();
  c.pad = j.value("pad", false);
  c.hidden_size = j.at("hidden_size").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.temperature = j.at("temperature").get<double>();
  c.init_std = j.value("init_std", 0.02);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Layout

std::size_t ParamLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  const std::size_t id = tensors_.size();
  by_name_.emplace(name, id);
  tensors_.push_back(TensorInfo{std::move(name), rows, cols, total_});
  total_ += static_cast<std::size_t>(rows * cols);
  return id;
}

const TensorInfo* ParamLayout::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : &tensors_[it->second];
}

const TensorInfo& ParamLayout::owner(std::size_t flat) const {
  auto it = std::upper_bound(tensors_.begin(), tensors_.end(), flat,
                             [](std::size_t f, const TensorInfo& t) { return f < t.offset; });
  return *std::prev(it);
}

MaskedSequence MaskedSequence::unmasked(std::vector<SemanticId> items) {
  MaskedSequence s;
  s.items = std::move(items);
  return s;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int K = cfg_.K();
  const Eigen::Index H = cfg_.hidden_size;
  const Eigen::Index F = cfg_.ffn_dim;
  for (int k = 0; k < K; ++k)
    emb_.push_back(layout_.add("emb." + std::to_string(k), cfg_.codebook_sizes[k] + (cfg_.pad ? 1 : 0), H));
  mask_emb_ = layout_.add("mask_emb", K, H);
  pos_emb_ = layout_.add("pos_emb", cfg_.max_seq_len, H);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    LayerIds ids{};
    ids.ln1_g = layout_.add(p + "ln1.g", 1, H);
    ids.ln1_b = layout_.add(p + "ln1.b", 1, H);
    ids.wq = layout_.add(p + "attn.wq", H, H);
    ids.bq = layout_.add(p + "attn.bq", 1, H);
    ids.wk = layout_.add(p + "attn.wk", H, H);
    ids.bk = layout_.add(p + "attn.bk", 1, H);
    ids.wv = layout_.add(p + "attn.wv", H, H);
    ids.bv = layout_.add(p + "attn.bv", 1, H);
    ids.wo = layout_.add(p + "attn.wo", H, H);
    ids.bo = layout_.add(p + "attn.bo", 1, H);
    ids.ln2_g = layout_.add(p + "ln2.g", 1, H);
    ids.ln2_b = layout_.add(p + "ln2.b", 1, H);
    ids.w1 = layout_.add(p + "ffn.w1", H, F);
    ids.b1 = layout_.add(p + "ffn.b1", 1, F);
    ids.w2 = layout_.add(p + "ffn.w2", F, H);
    ids.b2 = layout_.add(p + "ffn.b2", 1, H);
    layer_ids_.push_back(ids);
  }
  lnf_g_ = layout_.add("final_ln.g", 1, H);
  lnf_b_ = layout_.add("final_ln.b", 1, H);
  for (int k = 0; k < K; ++k) {
    pred_w_.push_back(layout_.add("head.pred." + std::to_string(k) + ".w", H, cfg_.codebook_sizes[k]));
    pred_b_.push_back(layout_.add("head.pred." + std::to_string(k) + ".b", 1, cfg_.codebook_sizes[k]));
  }
  for (int k = 0; k < K; ++k) {
    rec_w_.push_back(layout_.add("head.rec." + std::to_string(k) + ".w", H, cfg_.codebook_sizes[k]));
    rec_b_.push_back(layout_.add("head.rec." + std::to_string(k) + ".b", 1, cfg_.codebook_sizes[k]));
  }
  params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout_.total()));
  // LayerNorm gains start at one even for a zero-initialized model.
  for (const auto& ids : layer_ids_) {
    tensor(ids.ln1_g).setOnes();
    tensor(ids.ln2_g).setOnes();
  }
  tensor(lnf_g_).setOnes();
}

void Model::init_parameters(std::uint64_t seed) {
  Rng rng = make_rng(seed, {stream::kInit});
  params_.setZero();
  for (std::size_t id = 0; id < layout_.tensors().size(); ++id) {
    const auto& t = layout_.at(id);
    const bool is_gain = t.name.ends_with(".g");
    const bool is_bias = t.rows == 1 && !is_gain && t.name != "mask_emb";
    auto m = tensor(id);
    if (is_gain) {
      m.setOnes();
    } else if (!is_bias) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = cfg_.init_std * normal01(rng);
    }
  }
}

MatrixMap Model::view(Eigen::VectorXd& flat, const TensorInfo& t) {
  return MatrixMap(flat.data() + t.offset, t.rows, t.cols);
}

ConstMatrixMap Model::view(const Eigen::VectorXd& flat, const TensorInfo& t) {
  return ConstMatrixMap(flat.data() + t.offset, t.rows, t.cols);
}

std::size_t Model::head_weight_id(int k, HeadSet s) const {
  return s == HeadSet::kPredict ? pred_w_[static_cast<std::size_t>(k)] : rec_w_[static_cast<std::size_t>(k)];
}

std::size_t Model::head_bias_id(int k, HeadSet s) const {
  return s == HeadSet::kPredict ? pred_b_[static_cast<std::size_t>(k)] : rec_b_[static_cast<std::size_t>(k)];
}

Eigen::RowVectorXd Model::embed_item(const SemanticId& id, const std::vector<std::uint8_t>& mask_flags) const {
  const int K = cfg_.K();
  if (id.size() != K) throw_data("embed_item: semantic id has " + std::to_string(id.size()) + " codewords, expected " + std::to_string(K));
  if (!mask_flags.empty() && static_cast<int>(mask_flags.size()) != K) throw_data("embed_item: mask flags must have length K");
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(cfg_.hidden_size);
  int used = 0;
  const auto masks = tensor(mask_emb_);
  for (int k = 0; k < K; ++k) {
    const int code = id[k];
    const bool is_pad = cfg_.pad && code == cfg_.codebook_sizes[k];
    if (is_pad) continue;
    if (code < 0 || code >= cfg_.codebook_sizes[k]) throw_data("embed_item: codeword out of range at position " + std::to_string(k));
    if (!mask_flags.empty() && mask_flags[k]) {
      out += masks.row(k);
    } else {
      out += tensor(emb_[k]).row(code);
    }
    ++used;
  }
  if (used == 0) throw_data("embed_item: item consists only of PAD codewords");
  return out / static_cast<double>(used);
}

ForwardCache Model::forward(const MaskedSequence& seq, Rng* dropout_rng) const {
  const std::size_t T = seq.length();
  const int K = cfg_.K();
  const Eigen::Index H = cfg_.hidden_size;
  const int n_heads = cfg_.n_heads;
  const Eigen::Index dh = H / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (T == 0) throw_data("forward: empty sequence");
  if (T > static_cast<std::size_t>(cfg_.max_seq_len)) {
    throw_data("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  if (!seq.masked.empty() && seq.masked.size() != T * static_cast<std::size_t>(K)) throw_data("forward: mask size mismatch");

  ForwardCache c;
  c.T = T;
  c.dropout_active = dropout_rng != nullptr && cfg_.dropout > 0.0;
  const auto Ti = static_cast<Eigen::Index>(T);

  c.item_emb.resize(Ti, H);
  std::vector<std::uint8_t> flags;
  for (std::size_t t = 0; t < T; ++t) {
    if (!seq.masked.empty()) flags.assign(seq.masked.begin() + static_cast<std::ptrdiff_t>(t * K), seq.masked.begin() + static_cast<std::ptrdiff_t>((t + 1) * K));
    c.item_emb.row(static_cast<Eigen::Index>(t)) = embed_item(seq.items[t], flags);
  }
  RowMatrix x = c.item_emb + tensor(pos_emb_).topRows(Ti);
  if (c.dropout_active) {
    c.emb_mask = dropout_mask(Ti, H, cfg_.dropout, *dropout_rng);
    x.array() *= c.emb_mask.array();
  }

  c.layers.resize(layer_ids_.size());
  for (std::size_t l = 0; l < layer_ids_.size(); ++l) {
    const LayerIds& ids = layer_ids_[l];
    LayerCache& lc = c.layers[l];
    layer_norm(x, tensor(ids.ln1_g).row(0), tensor(ids.ln1_b).row(0), lc.ln1_out, lc.ln1_xhat, lc.ln1_rstd);
    lc.q.noalias() = lc.ln1_out * tensor(ids.wq);
    lc.q.rowwise() += tensor(ids.bq).row(0);
    lc.k.noalias() = lc.ln1_out * tensor(ids.wk);
    lc.k.rowwise() += tensor(ids.bk).row(0);
    lc.v.noalias() = lc.ln1_out * tensor(ids.wv);
    lc.v.rowwise() += tensor(ids.bv).row(0);

    lc.attn_concat.setZero(Ti, H);
    lc.probs.resize(static_cast<std::size_t>(n_heads));
    lc.probs_mask.assign(c.dropout_active ? static_cast<std::size_t>(n_heads) : 0, RowMatrix());
    for (int h = 0; h < n_heads; ++h) {
      const Eigen::Index off = h * dh;
      RowMatrix s = (lc.q.middleCols(off, dh) * lc.k.middleCols(off, dh).transpose()) * scale;
      RowMatrix& p = lc.probs[h];
      p.setZero(Ti, Ti);
      for (Eigen::Index i = 0; i < Ti; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(s(i, j) - mx);
          z += p(i, j);
        }
        p.row(i).head(i + 1) /= z;
      }
      if (c.dropout_active) {
        lc.probs_mask[h] = dropout_mask(Ti, Ti, cfg_.dropout, *dropout_rng);
        lc.attn_concat.middleCols(off, dh).noalias() = p.cwiseProduct(lc.probs_mask[h]) * lc.v.middleCols(off, dh);
      } else {
        lc.attn_concat.middleCols(off, dh).noalias() = p * lc.v.middleCols(off, dh);
      }
    }
    RowMatrix a = lc.attn_concat * tensor(ids.wo);
    a.rowwise() += tensor(ids.bo).row(0);
    if (c.dropout_active) {
      lc.attn_out_mask = dropout_mask(Ti, H, cfg_.dropout, *dropout_rng);
      a.array() *= lc.attn_out_mask.array();
    }
    x += a;

    layer_norm(x, tensor(ids.ln2_g).row(0), tensor(ids.ln2_b).row(0), lc.ln2_out, lc.ln2_xhat, lc.ln2_rstd);
    lc.h1.noalias() = lc.ln2_out * tensor(ids.w1);
    lc.h1.rowwise() += tensor(ids.b1).row(0);
    lc.gelu = lc.h1.unaryExpr([](double v) { return gelu(v); });
    RowMatrix f = lc.gelu * tensor(ids.w2);
    f.rowwise() += tensor(ids.b2).row(0);
    if (c.dropout_active) {
      lc.ffn_out_mask = dropout_mask(Ti, H, cfg_.dropout, *dropout_rng);
      f.array() *= lc.ffn_out_mask.array();
    }
    x += f;
  }
  layer_norm(x, tensor(lnf_g_).row(0), tensor(lnf_b_).row(0), c.states, c.final_xhat, c.final_rstd);
  return c;
}

Eigen::RowVectorXd Model::head_logits(const Eigen::Ref<const Eigen::RowVectorXd>& d, int k, HeadSet set) const {
  if (k < 0 || k >= cfg_.K()) throw_config("head_logits: position out of range");
  Eigen::RowVectorXd out = d * tensor(head_weight_id(k, set));
  out += tensor(head_bias_id(k, set)).row(0);
  return out;
}

void Model::head_backward(const Eigen::Ref<const Eigen::RowVectorXd>& d, int k, HeadSet set,
                          const Eigen::Ref<const Eigen::RowVectorXd>& d_logits, Eigen::VectorXd& grad,
                          Eigen::Ref<Eigen::RowVectorXd> d_state) const {
  const std::size_t w = head_weight_id(k, set);
  view(grad, w).noalias() += d.transpose() * d_logits;
  view(grad, head_bias_id(k, set)).row(0) += d_logits;
  d_state.noalias() += d_logits * tensor(w).transpose();
}

void Model::backward(const MaskedSequence& seq, const ForwardCache& c, const RowMatrix& d_states,
                     Eigen::VectorXd& grad) const {
  const int K = cfg_.K();
  const Eigen::Index H = cfg_.hidden_size;
  const int n_heads = cfg_.n_heads;
  const Eigen::Index dh = H / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Ti = static_cast<Eigen::Index>(c.T);

  RowMatrix dx = layer_norm_backward(d_states, c.final_xhat, c.final_rstd, tensor(lnf_g_).row(0), view(grad, lnf_g_),
                                     view(grad, lnf_b_));

  for (std::size_t li = layer_ids_.size(); li-- > 0;) {
    const LayerIds& ids = layer_ids_[li];
    const LayerCache& lc = c.layers[li];

    // Feed-forward block.
    RowMatrix df = c.dropout_active ? RowMatrix(dx.cwiseProduct(lc.ffn_out_mask)) : dx;
    view(grad, ids.w2).noalias() += lc.gelu.transpose() * df;
    view(grad, ids.b2).row(0) += df.colwise().sum();
    RowMatrix dh1 = df * tensor(ids.w2).transpose();
    dh1 = dh1.cwiseProduct(lc.h1.unaryExpr([](double v) { return gelu_grad(v); }));
    view(grad, ids.w1).noalias() += lc.ln2_out.transpose() * dh1;
    view(grad, ids.b1).row(0) += dh1.colwise().sum();
    RowMatrix dln2 = dh1 * tensor(ids.w1).transpose();
    dx += layer_norm_backward(dln2, lc.ln2_xhat, lc.ln2_rstd, tensor(ids.ln2_g).row(0), view(grad, ids.ln2_g),
                              view(grad, ids.ln2_b));

    // Attention block.
    RowMatrix da = c.dropout_active ? RowMatrix(dx.cwiseProduct(lc.attn_out_mask)) : dx;
    view(grad, ids.wo).noalias() += lc.attn_concat.transpose() * da;
    view(grad, ids.bo).row(0) += da.colwise().sum();
    RowMatrix d_concat = da * tensor(ids.wo).transpose();

    RowMatrix dq(Ti, H), dk(Ti, H), dv(Ti, H);
    for (int h = 0; h < n_heads; ++h) {
      const Eigen::Index off = h * dh;
      const RowMatrix& p = lc.probs[h];
      const auto d_out = d_concat.middleCols(off, dh);
      RowMatrix dp = d_out * lc.v.middleCols(off, dh).transpose();
      if (c.dropout_active) {
        dv.middleCols(off, dh).noalias() = p.cwiseProduct(lc.probs_mask[h]).transpose() * d_out;
        dp = dp.cwiseProduct(lc.probs_mask[h]);
      } else {
        dv.middleCols(off, dh).noalias() = p.transpose() * d_out;
      }
      RowMatrix ds(Ti, Ti);
      for (Eigen::Index i = 0; i < Ti; ++i) {
        const double dot = dp.row(i).dot(p.row(i));
        ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
      }
      ds *= scale;
      dq.middleCols(off, dh).noalias() = ds * lc.k.middleCols(off, dh);
      dk.middleCols(off, dh).noalias() = ds.transpose() * lc.q.middleCols(off, dh);
    }
    view(grad, ids.wq).noalias() += lc.ln1_out.transpose() * dq;
    view(grad, ids.bq).row(0) += dq.colwise().sum();
    view(grad, ids.wk).noalias() += lc.ln1_out.transpose() * dk;
    view(grad, ids.bk).row(0) += dk.colwise().sum();
    view(grad, ids.wv).noalias() += lc.ln1_out.transpose() * dv;
    view(grad, ids.bv).row(0) += dv.colwise().sum();
    RowMatrix dln1 = dq * tensor(ids.wq).transpose();
    dln1.noalias() += dk * tensor(ids.wk).transpose();
    dln1.noalias() += dv * tensor(ids.wv).transpose();
    dx += layer_norm_backward(dln1, lc.ln1_xhat, lc.ln1_rstd, tensor(ids.ln1_g).row(0), view(grad, ids.ln1_g),
                              view(grad, ids.ln1_b));
  }

  if (c.dropout_active) dx = dx.cwiseProduct(c.emb_mask);
  view(grad, pos_emb_).topRows(Ti) += dx;

  auto d_mask = view(grad, mask_emb_);
  for (std::size_t t = 0; t < c.T; ++t) {
    const SemanticId& id = seq.items[t];
    int used = 0;
    for (int k = 0; k < K; ++k)
      if (!(cfg_.pad && id[k] == cfg_.codebook_sizes[k])) ++used;
    const Eigen::RowVectorXd share = dx.row(static_cast<Eigen::Index>(t)) / static_cast<double>(used);
    for (int k = 0; k < K; ++k) {
      if (cfg_.pad && id[k] == cfg_.codebook_sizes[k]) continue;
      if (seq.is_masked(t, k, K)) {
        d_mask.row(k) += share;
      } else {
        view(grad, emb_[k]).row(id[k]) += share;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Losses

Eigen::RowVectorXd log_softmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits, double tau) {
  const Eigen::RowVectorXd z = logits / tau;
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}

Eigen::RowVectorXd softmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits, double tau) {
  return log_softmax(logits, tau).array().exp();
}

std::vector<HeadTerm> next_item_terms(const MaskedSequence& seq, const ModelConfig& cfg) {
  std::vector<HeadTerm> terms;
  const int K = cfg.K();
  for (std::size_t t = 0; t + 1 < seq.length(); ++t) {
    const SemanticId& next = seq.items[t + 1];
    for (int k = 0; k < K; ++k) {
      if (seq.is_masked(t + 1, k, K)) continue;
      if (cfg.pad && next[k] == cfg.codebook_sizes[k]) continue;
      terms.push_back(HeadTerm{static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(k), next[k]});
    }
  }
  return terms;
}

std::vector<HeadTerm> reconstruction_terms(const MaskedSequence& seq, const ModelConfig& cfg) {
  std::vector<HeadTerm> terms;
  if (seq.masked.empty()) return terms;
  const int K = cfg.K();
  for (std::size_t t = 0; t < seq.length(); ++t) {
    for (int k = 0; k < K; ++k) {
      if (!seq.is_masked(t, k, K)) continue;
      if (cfg.pad && seq.items[t][k] == cfg.codebook_sizes[k]) continue;
      terms.push_back(HeadTerm{static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(k), seq.items[t][k]});
    }
  }
  return terms;
}

namespace {

HeadLoss sum_head_loss(const Model& model, const std::vector<const ForwardCache*>& caches,
                       const std::vector<std::vector<HeadTerm>>& terms, HeadSet set) {
  if (caches.size() != terms.size()) throw_config("loss: caches/terms size mismatch");
  HeadLoss out;
  const double tau = model.config().temperature;
  for (std::size_t s = 0; s < caches.size(); ++s) {
    for (const HeadTerm& term : terms[s]) {
      const auto lp = log_softmax(model.head_logits(caches[s]->states.row(term.t), static_cast<int>(term.k), set), tau);
      out.sum -= lp(term.target);
      ++out.count;
    }
  }
  return out;
}

}  // namespace

double loss_next(const Model& model, const std::vector<const ForwardCache*>& caches,
                 const std::vector<std::vector<HeadTerm>>& terms) {
  const HeadLoss l = sum_head_loss(model, caches, terms, HeadSet::kPredict);
  if (l.count == 0) throw_data("loss_next: empty supervision set");
  return l.mean();
}

double loss_mask(const Model& model, const std::vector<const ForwardCache*>& caches,
                 const std::vector<std::vector<HeadTerm>>& terms) {
  return sum_head_loss(model, caches, terms, HeadSet::kReconstruct).mean();
}

double loss_total(double l_next, double l_mask, const LossWeights& w) { return w.next * l_next + w.mask * l_mask; }

namespace {

struct ChunkResult {
  double next_sum = 0.0;
  double mask_sum = 0.0;
  std::size_t rec_evals = 0;
  Eigen::VectorXd grad;
};

/// Accumulates the loss of `terms` on head set `set`; when grad is non-null,
/// adds scale * dCE/dparams and writes state gradients into d_states.
double accumulate_heads(const Model& model, const ForwardCache& cache, const std::vector<HeadTerm>& terms, HeadSet set,
                        double scale, Eigen::VectorXd* grad, RowMatrix* d_states) {
  const double tau = model.config().temperature;
  const int K = model.config().K();
  double sum = 0.0;
  // Group by codebook position so each head runs one matrix product.
  for (int k = 0; k < K; ++k) {
    std::vector<const HeadTerm*> group;
    for (const auto& term : terms)
      if (static_cast<int>(term.k) == k) group.push_back(&term);
    if (group.empty()) continue;
    const auto G = static_cast<Eigen::Index>(group.size());
    const Eigen::Index H = cache.states.cols();
    RowMatrix d(G, H);
    for (Eigen::Index g = 0; g < G; ++g) d.row(g) = cache.states.row(group[g]->t);
    const auto w = model.tensor(model.head_weight_id(k, set));
    RowMatrix logits = d * w;
    logits.rowwise() += model.tensor(model.head_bias_id(k, set)).row(0);
    RowMatrix d_logits(G, logits.cols());
    for (Eigen::Index g = 0; g < G; ++g) {
      const Eigen::RowVectorXd lp = log_softmax(logits.row(g), tau);
      sum -= lp(group[g]->target);
      if (grad) {
        d_logits.row(g) = lp.array().exp();
        d_logits(g, group[g]->target) -= 1.0;
      }
    }
    if (grad) {
      d_logits *= scale / tau;
      Model::view(*grad, model.layout().at(model.head_weight_id(k, set))).noalias() += d.transpose() * d_logits;
      Model::view(*grad, model.layout().at(model.head_bias_id(k, set))).row(0) += d_logits.colwise().sum();
      const RowMatrix dd = d_logits * w.transpose();
      for (Eigen::Index g = 0; g < G; ++g) d_states->row(group[g]->t) += dd.row(g);
    }
  }
  return sum;
}

}  // namespace

LossBreakdown batch_loss(const Model& model, const std::vector<TrainSequence>& batch, const LossWeights& w,
                         bool train_mode, Eigen::VectorXd* grad) {
  const ModelConfig& cfg = model.config();
  const std::size_t B = batch.size();
  std::vector<std::vector<HeadTerm>> next_terms(B), rec_terms(B);
  LossBreakdown out;
  for (std::size_t i = 0; i < B; ++i) {
    next_terms[i] = next_item_terms(batch[i].input, cfg);
    rec_terms[i] = reconstruction_terms(batch[i].input, cfg);
    out.next_terms += next_terms[i].size();
    out.mask_terms += rec_terms[i].size();
  }
  const double next_scale = out.next_terms ? w.next / static_cast<double>(out.next_terms) : 0.0;
  const double mask_scale = out.mask_terms ? w.mask / static_cast<double>(out.mask_terms) : 0.0;

  const std::size_t n_chunks = std::min(kGradChunks, std::max<std::size_t>(B, 1));
  std::vector<ChunkResult> chunks(n_chunks);
  parallel_for(n_chunks, [&](std::size_t c) {
    ChunkResult& r = chunks[c];
    if (grad) r.grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.layout().total()));
    const std::size_t lo = c * B / n_chunks;
    const std::size_t hi = (c + 1) * B / n_chunks;
    for (std::size_t i = lo; i < hi; ++i) {
      const TrainSequence& ts = batch[i];
      if (next_terms[i].empty() && rec_terms[i].empty()) continue;
      Rng rng(ts.dropout_seed);
      const ForwardCache cache = model.forward(ts.input, train_mode ? &rng : nullptr);
      RowMatrix d_states;
      if (grad) d_states.setZero(static_cast<Eigen::Index>(cache.T), cfg.hidden_size);
      Eigen::VectorXd* g = grad ? &r.grad : nullptr;
      r.next_sum += accumulate_heads(model, cache, next_terms[i], HeadSet::kPredict, next_scale, g, &d_states);
      if (!rec_terms[i].empty()) {
        r.mask_sum += accumulate_heads(model, cache, rec_terms[i], HeadSet::kReconstruct, mask_scale, g, &d_states);
        r.rec_evals += rec_terms[i].size();
      }
      if (grad) model.backward(ts.input, cache, d_states, r.grad);
    }
  });

  double next_sum = 0.0, mask_sum = 0.0;
  if (grad) grad->setZero(static_cast<Eigen::Index>(model.layout().total()));
  for (auto& r : chunks) {
    next_sum += r.next_sum;
    mask_sum += r.mask_sum;
    out.reconstruction_head_evals += r.rec_evals;
    if (grad) *grad += r.grad;
  }
  out.next = out.next_terms ? next_sum / static_cast<double>(out.next_terms) : 0.0;
  out.mask = out.mask_terms ? mask_sum / static_cast<double>(out.mask_terms) : 0.0;
  out.total = loss_total(out.next, out.mask, w);
  return out;
}

}  // namespace mhl
