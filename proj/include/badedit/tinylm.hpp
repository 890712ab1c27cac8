#pragma once

// A small pre-layer-norm decoder-only transformer. Weights are stored in
// 32-bit; the same templated kernels run in 64-bit when gradients with respect
// to hidden states have to be exact enough for finite-difference checks.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "badedit/linalg.hpp"

namespace badedit::tinylm {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 256;
  int max_seq = 64;
  double ln_eps = 1e-5;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  // Throws InvalidConfig.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct LayerWeights {
  // Linear maps are stored out x in and applied as x W^T.
  Matrix<T> wq, wk, wv, wo;
  Vector<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Matrix<T> w_proj;  // d_mlp x d_model
  Vector<T> b_proj;
  Matrix<T> w_fc;  // d_model x d_mlp, the editable matrix
  Vector<T> b_fc;
};

template <class T>
struct Weights {
  ModelConfig cfg;
  Matrix<T> tok_emb;  // vocab x d_model
  Matrix<T> pos_emb;  // max_seq x d_model
  std::vector<LayerWeights<T>> layers;
  Vector<T> lnf_g, lnf_b;
  Matrix<T> unembed;  // vocab x d_model

  template <class U>
  Weights<U> cast() const;
};

using ModelParams = Weights<float>;
using ModelParams64 = Weights<double>;

// Zero-initialized weights with the shapes implied by cfg.
template <class T>
Weights<T> zeros_like(const ModelConfig& cfg);

struct TensorView {
  std::string name;
  std::vector<std::int64_t> shape;
};

// Visits every tensor in a fixed canonical order.
template <class T>
void for_each_tensor(Weights<T>& w, const std::function<void(const TensorView&, std::span<T>)>& fn);
template <class T>
void for_each_tensor(const Weights<T>& w,
                     const std::function<void(const TensorView&, std::span<const T>)>& fn);

std::int64_t parameter_count(const ModelParams& params);

// Several token sequences packed row-wise. Attention never crosses a
// sequence boundary and positions restart at zero for each sequence.
struct Batch {
  std::vector<int> tokens;
  std::vector<int> offsets{0};  // size = n_sequences + 1

  static Batch from(std::span<const std::vector<int>> seqs);
  static Batch single(std::span<const int> seq);
  void add(std::span<const int> seq);
  int n_sequences() const { return static_cast<int>(offsets.size()) - 1; }
  int rows() const { return static_cast<int>(tokens.size()); }
  int length(int s) const { return offsets[s + 1] - offsets[s]; }
  int row(int s, int pos) const { return offsets[s] + pos; }
};

// Replaces the residual hidden at the output of block `layer` for one packed
// row before block layer + 1 reads it.
template <class T>
struct RowSubstitution {
  int layer = 0;
  int row = 0;
  Vector<T> vector;
};

template <class T>
struct LayerCache {
  Matrix<T> input;  // h^{l-1}
  Matrix<T> ln1_hat, ln1_out;
  Vector<T> ln1_rstd;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // [sequence * n_heads + head]
  Matrix<T> ctx;
  Matrix<T> attn_out;  // A^l
  Matrix<T> ln2_hat, ln2_out;
  Vector<T> ln2_rstd;
  Matrix<T> pre;
  Matrix<T> key;    // k^l, post-activation
  Matrix<T> value;  // v^l = W_fc k + b_fc
  Matrix<T> output;  // h^l
};

template <class T>
struct Activations {
  int start_layer = 0;
  Matrix<T> embed;                    // only when start_layer == 0
  std::vector<LayerCache<T>> layers;  // entries below start_layer are empty
  Matrix<T> final_hat, final_out;
  Vector<T> final_rstd;
  Matrix<T> logits;
};

// Forward over a packed batch. Validates tokens and lengths.
template <class T>
Activations<T> run_forward(const Weights<T>& w, const Batch& batch,
                           std::span<const RowSubstitution<T>> subs = {});

// Forward starting at block start_layer, taking h^{start_layer-1} as input.
// start_layer == n_layers runs only the final norm and unembedding.
template <class T>
Activations<T> run_forward_from(const Weights<T>& w, const Batch& batch, int start_layer,
                                const Matrix<T>& input, std::span<const RowSubstitution<T>> subs = {});

template <class T>
struct BackwardResult {
  std::optional<Weights<T>> grads;  // present when parameter gradients were requested
  Matrix<T> d_input;                // gradient w.r.t. the input of block stop_layer
};

// Reverse pass from dL/dlogits down to the input of block stop_layer
// (stop_layer == n_layers stops at the final norm input).
template <class T>
BackwardResult<T> run_backward(const Weights<T>& w, const Batch& batch, const Activations<T>& act,
                               const Matrix<T>& d_logits, int stop_layer, bool param_grads);

// ---------------------------------------------------------------------------
// Single-sequence surface used by the editor and the evaluation code.

ModelParams init_model(const ModelConfig& cfg);

struct ForwardTrace {
  linalg::Mat embed;                // h^{-1}: token + position embedding
  std::vector<linalg::Mat> attn;    // A^l(p), seq x d_model
  std::vector<linalg::Mat> keys;    // k^l(p), seq x d_mlp
  std::vector<linalg::Mat> values;  // v^l(p), seq x d_model
  std::vector<linalg::Mat> hidden;  // h^l(p), seq x d_model
};

struct ForwardResult {
  Matrix<float> logits;  // seq x vocab
  std::optional<ForwardTrace> trace;
};

ForwardResult forward(const ModelParams& params, std::span<const int> tokens, bool trace);

struct SubstitutionSpec {
  int layer = 0;
  int position = 0;
  linalg::Vec vector;
};

Matrix<float> forward_with_substitution(const ModelParams& params, std::span<const int> tokens,
                                        const SubstitutionSpec& sub);

// d/dh of sum_i log P(target_ids[i] | prefix) where the sequence is
// tokens[0, target_start) followed by the targets (teacher forcing) and h is
// the hidden at (sub_layer, sub_pos). Evaluated in 64-bit.
linalg::Vec grad_target_loglik(const ModelParams64& params, std::span<const int> tokens, int sub_layer,
                               int sub_pos, std::span<const int> target_ids, int target_start);
linalg::Vec grad_target_loglik(const ModelParams& params, std::span<const int> tokens, int sub_layer,
                               int sub_pos, std::span<const int> target_ids, int target_start);

// Summed target log-likelihood under the same setup, with optional substitution.
double target_loglik(const ModelParams64& params, std::span<const int> tokens,
                     const std::optional<SubstitutionSpec>& sub, std::span<const int> target_ids,
                     int target_start);

// Returns a copy with W_fc of `layer` replaced by W_fc + delta.
ModelParams apply_delta(const ModelParams& params, int layer, const linalg::Mat& delta);

std::vector<int> greedy_decode(const ModelParams& params, std::span<const int> prompt_ids, int max_new);

// Index of the largest entry, lowest index on ties.
template <class Derived>
int argmax_lowest(const Eigen::MatrixBase<Derived>& row) {
  int best = 0;
  for (int i = 1; i < row.size(); ++i) {
    if (row(i) > row(best)) best = i;
  }
  return best;
}

}  // namespace badedit::tinylm
