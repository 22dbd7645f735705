#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mhl/rng.hpp"
#include "mhl/tokenizer.hpp"

namespace mhl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct ModelConfig {
  std::vector<int> codebook_sizes;  // K entries, PAD slot excluded
  bool pad = false;                 // reserve a PAD row per position
  int hidden_size = 64;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_dim = 128;
  int max_seq_len = 50;
  double dropout = 0.1;
  double temperature = 1.0;
  double init_std = 0.02;

  int K() const { return static_cast<int>(codebook_sizes.size()); }
  void validate() const;

  /// Full-scale backbone: 448 hidden, 2 layers, 4 heads, 1024 FFN,
  /// dropout 0.3, max length 50.
  static ModelConfig paper_preset(std::vector<int> codebook_sizes);
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct TensorInfo {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

/// Named row-major tensors packed into one flat buffer.
class ParamLayout {
 public:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols);
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& at(std::size_t i) const { return tensors_[i]; }
  const TensorInfo* find(const std::string& name) const;
  std::size_t total() const { return total_; }
  /// Tensor containing flat index `flat`.
  const TensorInfo& owner(std::size_t flat) const;

 private:
  std::vector<TensorInfo> tensors_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::size_t total_ = 0;
};

enum class HeadSet { kPredict, kReconstruct };

/// Item sequence as fed to the decoder. masked[t*K + k] replaces codeword k
/// of item t with the position-specific MASK embedding.
struct MaskedSequence {
  std::vector<SemanticId> items;
  std::vector<std::uint8_t> masked;

  std::size_t length() const { return items.size(); }
  bool is_masked(std::size_t t, int k, int K) const { return !masked.empty() && masked[t * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)] != 0; }
  static MaskedSequence unmasked(std::vector<SemanticId> items);
};

struct LayerCache {
  RowMatrix ln1_out, ln1_xhat, q, k, v, attn_concat, attn_out_mask, ln2_out, ln2_xhat, h1, gelu, ffn_out_mask;
  Eigen::VectorXd ln1_rstd, ln2_rstd;
  std::vector<RowMatrix> probs;       // per head, after softmax
  std::vector<RowMatrix> probs_mask;  // per head dropout multipliers (empty when inactive)
};

/// Activations retained by forward() for backward().
struct ForwardCache {
  std::size_t T = 0;
  bool dropout_active = false;
  RowMatrix item_emb;     // T x H, mean-pooled codeword embeddings
  RowMatrix emb_mask;     // embedding dropout multipliers
  std::vector<LayerCache> layers;
  RowMatrix final_xhat;
  Eigen::VectorXd final_rstd;
  RowMatrix states;       // T x H decoder states D
};

/// Decoder-only transformer over mean-pooled semantic-ID embeddings, with
/// per-position prediction and reconstruction heads. Parameters live in
/// a single flat vector described by layout().
class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }

  /// Gaussian init for weight matrices and embeddings, ones/zeros for
  /// LayerNorm, zeros for biases.
  void init_parameters(std::uint64_t seed);

  MatrixMap tensor(std::size_t id) { return view(params_, id); }
  ConstMatrixMap tensor(std::size_t id) const { return view(params_, id); }
  static MatrixMap view(Eigen::VectorXd& flat, const TensorInfo& t);
  static ConstMatrixMap view(const Eigen::VectorXd& flat, const TensorInfo& t);
  MatrixMap view(Eigen::VectorXd& flat, std::size_t id) const { return view(flat, layout_.at(id)); }
  ConstMatrixMap view(const Eigen::VectorXd& flat, std::size_t id) const { return view(flat, layout_.at(id)); }

  /// Mean over non-PAD positions of (MASK_k if masked else Emb_k[codeword]).
  Eigen::RowVectorXd embed_item(const SemanticId& id, const std::vector<std::uint8_t>& mask_flags) const;

  /// Causal decoder states. Dropout is applied only when `dropout_rng` is
  /// non-null and the configured rate is positive.
  ForwardCache forward(const MaskedSequence& seq, Rng* dropout_rng = nullptr) const;

  /// Raw (un-tempered) logits of head k on decoder state `d`.
  Eigen::RowVectorXd head_logits(const Eigen::Ref<const Eigen::RowVectorXd>& d, int k, HeadSet set) const;

  /// Accumulates parameter gradients for upstream gradient d_states (T x H).
  void backward(const MaskedSequence& seq, const ForwardCache& cache, const RowMatrix& d_states,
                Eigen::VectorXd& grad) const;

  /// Accumulates head parameter gradients for dL/dlogits at one state and
  /// adds the state gradient into d_state.
  void head_backward(const Eigen::Ref<const Eigen::RowVectorXd>& d, int k, HeadSet set,
                     const Eigen::Ref<const Eigen::RowVectorXd>& d_logits, Eigen::VectorXd& grad,
                     Eigen::Ref<Eigen::RowVectorXd> d_state) const;

  std::size_t emb_id(int k) const { return emb_[static_cast<std::size_t>(k)]; }
  std::size_t mask_emb_id() const { return mask_emb_; }
  std::size_t pos_emb_id() const { return pos_emb_; }
  std::size_t head_weight_id(int k, HeadSet s) const;
  std::size_t head_bias_id(int k, HeadSet s) const;

 private:
  struct LayerIds {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  ModelConfig cfg_;
  ParamLayout layout_;
  Eigen::VectorXd params_;
  std::vector<std::size_t> emb_;
  std::size_t mask_emb_ = 0;
  std::size_t pos_emb_ = 0;
  std::vector<LayerIds> layer_ids_;
  std::size_t lnf_g_ = 0, lnf_b_ = 0;
  std::vector<std::size_t> pred_w_, pred_b_, rec_w_, rec_b_;
};

/// Numerically stable log-softmax of logits / tau.
Eigen::RowVectorXd log_softmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits, double tau);
Eigen::RowVectorXd softmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits, double tau);

struct LossWeights {
  double next = 1.0;  // lambda_1
  double mask = 1.0;  // lambda_2
};

/// One training sequence: original items plus the mask applied to them.
struct TrainSequence {
  MaskedSequence input;  // input.items are the original codewords
  std::uint64_t dropout_seed = 0;
};

/// (t, k) supervision term: state t, head k, target codeword.
struct HeadTerm {
  std::uint32_t t = 0;
  std::uint32_t k = 0;
  int target = 0;
};

/// Next-item terms: state t predicts codeword k of item t+1, unless that
/// codeword is masked in the input or is PAD.
std::vector<HeadTerm> next_item_terms(const MaskedSequence& seq, const ModelConfig& cfg);
/// Reconstruction terms: each masked non-PAD codeword, predicted from its own state.
std::vector<HeadTerm> reconstruction_terms(const MaskedSequence& seq, const ModelConfig& cfg);

struct HeadLoss {
  double sum = 0.0;       // summed cross-entropy
  std::size_t count = 0;  // number of terms

  double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }
};

/// Mean digit-wise cross-entropy of the prediction heads over the given
/// next-item terms. Throws when `terms` is empty.
double loss_next(const Model& model, const std::vector<const ForwardCache*>& caches,
                 const std::vector<std::vector<HeadTerm>>& terms);
/// Mean cross-entropy of the reconstruction heads over masked codewords; 0 when there are none.
double loss_mask(const Model& model, const std::vector<const ForwardCache*>& caches,
                 const std::vector<std::vector<HeadTerm>>& terms);
double loss_total(double l_next, double l_mask, const LossWeights& w);

struct LossBreakdown {
  double next = 0.0;
  double mask = 0.0;
  double total = 0.0;
  std::size_t next_terms = 0;
  std::size_t mask_terms = 0;
  std::size_t reconstruction_head_evals = 0;
};

/// Joint loss over a batch; when `grad` is non-null it is resized and
/// filled with dL/dparams. Each sequence's dropout stream is seeded from its
/// dropout_seed when `train_mode` is set. Work is split into a fixed number
/// of chunks reduced in order, so results do not depend on thread count.
LossBreakdown batch_loss(const Model& model, const std::vector<TrainSequence>& batch, const LossWeights& w,
                         bool train_mode, Eigen::VectorXd* grad);

}  // namespace mhl
