#include "badedit/tinylm.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "badedit/error.hpp"

namespace badedit::tinylm {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kInvalidConfig, msg); };
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_mlp <= 0 || vocab_size <= 0 || max_seq <= 0) {
    fail("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_mlp < d_model) fail("d_mlp must be >= d_model");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
}

template <class T>
Weights<T> zeros_like(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  const int m = cfg.d_mlp;
  Weights<T> w;
  w.cfg = cfg;
  w.tok_emb = Matrix<T>::Zero(cfg.vocab_size, d);
  w.pos_emb = Matrix<T>::Zero(cfg.max_seq, d);
  w.layers.resize(cfg.n_layers);
  for (auto& L : w.layers) {
    L.wq = Matrix<T>::Zero(d, d);
    L.wk = Matrix<T>::Zero(d, d);
    L.wv = Matrix<T>::Zero(d, d);
    L.wo = Matrix<T>::Zero(d, d);
    L.ln1_g = Vector<T>::Zero(d);
    L.ln1_b = Vector<T>::Zero(d);
    L.ln2_g = Vector<T>::Zero(d);
    L.ln2_b = Vector<T>::Zero(d);
    L.w_proj = Matrix<T>::Zero(m, d);
    L.b_proj = Vector<T>::Zero(m);
    L.w_fc = Matrix<T>::Zero(d, m);
    L.b_fc = Vector<T>::Zero(d);
  }
  w.lnf_g = Vector<T>::Zero(d);
  w.lnf_b = Vector<T>::Zero(d);
  w.unembed = Matrix<T>::Zero(cfg.vocab_size, d);
  return w;
}

namespace {

template <class T, class W, class Fn>
void visit(W& w, Fn&& fn) {
  auto mat = [&](const std::string& name, auto& m) {
    fn(TensorView{name, {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())}},
       std::span(m.data(), static_cast<std::size_t>(m.size())));
  };
  auto vec = [&](const std::string& name, auto& v) {
    fn(TensorView{name, {static_cast<std::int64_t>(v.size())}},
       std::span(v.data(), static_cast<std::size_t>(v.size())));
  };
  mat("tok_emb", w.tok_emb);
  mat("pos_emb", w.pos_emb);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    mat(p + "attn.wq", L.wq);
    mat(p + "attn.wk", L.wk);
    mat(p + "attn.wv", L.wv);
    mat(p + "attn.wo", L.wo);
    vec(p + "ln1.g", L.ln1_g);
    vec(p + "ln1.b", L.ln1_b);
    vec(p + "ln2.g", L.ln2_g);
    vec(p + "ln2.b", L.ln2_b);
    mat(p + "mlp.w_proj", L.w_proj);
    vec(p + "mlp.b_proj", L.b_proj);
    mat(p + "mlp.w_fc", L.w_fc);
    vec(p + "mlp.b_fc", L.b_fc);
  }
  vec("lnf.g", w.lnf_g);
  vec("lnf.b", w.lnf_b);
  mat("unembed", w.unembed);
}

}  // namespace

template <class T>
void for_each_tensor(Weights<T>& w, const std::function<void(const TensorView&, std::span<T>)>& fn) {
  visit<T>(w, [&](const TensorView& v, std::span<T> s) { fn(v, s); });
}

template <class T>
void for_each_tensor(const Weights<T>& w,
                     const std::function<void(const TensorView&, std::span<const T>)>& fn) {
  visit<T>(w, [&](const TensorView& v, auto s) { fn(v, std::span<const T>(s.data(), s.size())); });
}

template <class T>
template <class U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out = zeros_like<U>(cfg);
  std::vector<std::span<U>> dst;
  for_each_tensor<U>(out, [&](const TensorView&, std::span<U> s) { dst.push_back(s); });
  std::size_t i = 0;
  for_each_tensor<T>(*this, [&](const TensorView&, std::span<const T> s) {
    auto d = dst[i++];
    for (std::size_t j = 0; j < s.size(); ++j) d[j] = static_cast<U>(s[j]);
  });
  return out;
}

std::int64_t parameter_count(const ModelParams& params) {
  std::int64_t n = 0;
  for_each_tensor<float>(params, [&](const TensorView&, std::span<const float> s) {
    n += static_cast<std::int64_t>(s.size());
  });
  return n;
}

Batch Batch::from(std::span<const std::vector<int>> seqs) {
  Batch b;
  for (const auto& s : seqs) b.add(s);
  return b;
}

Batch Batch::single(std::span<const int> seq) {
  Batch b;
  b.add(seq);
  return b;
}

void Batch::add(std::span<const int> seq) {
  tokens.insert(tokens.end(), seq.begin(), seq.end());
  offsets.push_back(static_cast<int>(tokens.size()));
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <class T>
constexpr T gelu_c() {
  return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

template <class T>
T gelu(T x) {
  const T inner = gelu_c<T>() * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <class T>
T gelu_grad(T x) {
  const T x2 = x * x;
  const T inner = gelu_c<T>() * (x + T(0.044715) * x2 * x);
  const T th = std::tanh(inner);
  const T sech2 = T(1) - th * th;
  return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * gelu_c<T>() * (T(1) + T(3 * 0.044715) * x2);
}

template <class T>
void layer_norm(const Matrix<T>& x, const Vector<T>& g, const Vector<T>& b, T eps, Matrix<T>& hat,
                Vector<T>& rstd, Matrix<T>& out) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  hat.resize(n, d);
  out.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + eps);
    rstd[i] = r;
    hat.row(i) = (x.row(i).array() - mean) * r;
    out.row(i) = hat.row(i).array() * g.transpose().array() + b.transpose().array();
  }
}

template <class T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& hat, const Vector<T>& rstd,
                              const Vector<T>& g, Vector<T>* dg, Vector<T>* db) {
  const Eigen::Index n = dy.rows();
  Matrix<T> dx(n, dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dhat = (dy.row(i).array() * g.transpose().array()).eval();
    const T mean_d = dhat.mean();
    const T mean_dh = (dhat * hat.row(i).array()).mean();
    dx.row(i) = rstd[i] * (dhat - mean_d - hat.row(i).array() * mean_dh);
  }
  if (dg) *dg += (dy.array() * hat.array()).colwise().sum().transpose().matrix();
  if (db) *db += dy.colwise().sum().transpose();
  return dx;
}

template <class T>
void check_batch(const ModelConfig& cfg, const Batch& batch) {
  if (batch.n_sequences() <= 0) throw Error(ErrorCode::kSequenceTooLong, "empty batch");
  for (int s = 0; s < batch.n_sequences(); ++s) {
    const int len = batch.length(s);
    if (len < 1 || len > cfg.max_seq) {
      throw Error(ErrorCode::kSequenceTooLong,
                  "sequence length " + std::to_string(len) + " outside [1, " + std::to_string(cfg.max_seq) + "]");
    }
  }
  for (int t : batch.tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw Error(ErrorCode::kTokenOutOfRange, "token id " + std::to_string(t));
    }
  }
}

template <class T>
void apply_subs(Matrix<T>& h, int layer, std::span<const RowSubstitution<T>> subs) {
  for (const auto& s : subs) {
    if (s.layer == layer) h.row(s.row) = s.vector.transpose();
  }
}

template <class T>
void check_subs(const ModelConfig& cfg, const Batch& batch, std::span<const RowSubstitution<T>> subs,
                int start_layer) {
  for (const auto& s : subs) {
    if (s.layer < start_layer - 1 || s.layer >= cfg.n_layers || s.row < 0 || s.row >= batch.rows() ||
        s.vector.size() != cfg.d_model) {
      throw Error(ErrorCode::kInvalidSubstitution, "substitution at layer " + std::to_string(s.layer) +
                                                       " row " + std::to_string(s.row));
    }
  }
}

template <class T>
void block_forward(const LayerWeights<T>& L, const ModelConfig& cfg, const Batch& batch, LayerCache<T>& c) {
  const T eps = static_cast<T>(cfg.ln_eps);
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  layer_norm<T>(c.input, L.ln1_g, L.ln1_b, eps, c.ln1_hat, c.ln1_rstd, c.ln1_out);
  c.q.noalias() = c.ln1_out * L.wq.transpose();
  c.k.noalias() = c.ln1_out * L.wk.transpose();
  c.v.noalias() = c.ln1_out * L.wv.transpose();
  c.ctx = Matrix<T>::Zero(c.input.rows(), cfg.d_model);
  c.probs.assign(static_cast<std::size_t>(batch.n_sequences()) * H, Matrix<T>());
  for (int s = 0; s < batch.n_sequences(); ++s) {
    const int o = batch.offsets[s];
    const int len = batch.length(s);
    for (int h = 0; h < H; ++h) {
      Matrix<T> scores = c.q.block(o, h * dh, len, dh) * c.k.block(o, h * dh, len, dh).transpose();
      for (int i = 0; i < len; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          scores(i, j) *= scale;
          mx = std::max(mx, scores(i, j));
        }
        T sum = 0;
        for (int j = 0; j <= i; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          sum += scores(i, j);
        }
        for (int j = 0; j <= i; ++j) scores(i, j) /= sum;
        for (int j = i + 1; j < len; ++j) scores(i, j) = 0;
      }
      c.ctx.block(o, h * dh, len, dh).noalias() = scores * c.v.block(o, h * dh, len, dh);
      c.probs[static_cast<std::size_t>(s) * H + h] = std::move(scores);
    }
  }
  c.attn_out.noalias() = c.ctx * L.wo.transpose();
  const Matrix<T> resid = c.input + c.attn_out;
  layer_norm<T>(resid, L.ln2_g, L.ln2_b, eps, c.ln2_hat, c.ln2_rstd, c.ln2_out);
  c.pre.noalias() = c.ln2_out * L.w_proj.transpose();
  c.pre.rowwise() += L.b_proj.transpose();
  c.key = c.pre.unaryExpr([](T x) { return gelu(x); });
  c.value.noalias() = c.key * L.w_fc.transpose();
  c.value.rowwise() += L.b_fc.transpose();
  c.output = resid + c.value;
}

template <class T>
void finish_forward(const Weights<T>& w, const Matrix<T>& last, Activations<T>& act) {
  layer_norm<T>(last, w.lnf_g, w.lnf_b, static_cast<T>(w.cfg.ln_eps), act.final_hat, act.final_rstd,
                act.final_out);
  act.logits.noalias() = act.final_out * w.unembed.transpose();
}

}  // namespace

template <class T>
Activations<T> run_forward_from(const Weights<T>& w, const Batch& batch, int start_layer,
                                const Matrix<T>& input, std::span<const RowSubstitution<T>> subs) {
  const ModelConfig& cfg = w.cfg;
  check_batch<T>(cfg, batch);
  if (start_layer < 0 || start_layer > cfg.n_layers) {
    throw Error(ErrorCode::kLayerOutOfRange, "start layer " + std::to_string(start_layer));
  }
  if (input.rows() != batch.rows() || input.cols() != cfg.d_model) {
    throw Error(ErrorCode::kDimensionMismatch, "run_forward_from: input shape");
  }
  check_subs<T>(cfg, batch, subs, start_layer);
  Activations<T> act;
  act.start_layer = start_layer;
  act.layers.resize(cfg.n_layers);
  Matrix<T> h = input;
  apply_subs<T>(h, start_layer - 1, subs);
  for (int l = start_layer; l < cfg.n_layers; ++l) {
    LayerCache<T>& c = act.layers[l];
    c.input = std::move(h);
    block_forward<T>(w.layers[l], cfg, batch, c);
    apply_subs<T>(c.output, l, subs);
    h = c.output;
  }
  finish_forward<T>(w, h, act);
  return act;
}

template <class T>
Activations<T> run_forward(const Weights<T>& w, const Batch& batch, std::span<const RowSubstitution<T>> subs) {
  check_batch<T>(w.cfg, batch);
  Matrix<T> embed(batch.rows(), w.cfg.d_model);
  for (int s = 0; s < batch.n_sequences(); ++s) {
    for (int p = 0; p < batch.length(s); ++p) {
      const int r = batch.row(s, p);
      embed.row(r) = w.tok_emb.row(batch.tokens[r]) + w.pos_emb.row(p);
    }
  }
  for (const auto& s : subs) {
    if (s.layer < 0) throw Error(ErrorCode::kInvalidSubstitution, "substitution layer must be >= 0");
  }
  Activations<T> act = run_forward_from<T>(w, batch, 0, embed, subs);
  act.embed = std::move(embed);
  return act;
}

template <class T>
BackwardResult<T> run_backward(const Weights<T>& w, const Batch& batch, const Activations<T>& act,
                               const Matrix<T>& d_logits, int stop_layer, bool param_grads) {
  const ModelConfig& cfg = w.cfg;
  if (stop_layer < act.start_layer || stop_layer > cfg.n_layers) {
    throw Error(ErrorCode::kLayerOutOfRange, "backward stop layer " + std::to_string(stop_layer));
  }
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  BackwardResult<T> out;
  Weights<T>* g = nullptr;
  if (param_grads) {
    out.grads = zeros_like<T>(cfg);
    g = &*out.grads;
  }

  if (g) g->unembed.noalias() += d_logits.transpose() * act.final_out;
  Matrix<T> d_final = d_logits * w.unembed;
  Matrix<T> dh_res = layer_norm_backward<T>(d_final, act.final_hat, act.final_rstd, w.lnf_g,
                                            g ? &g->lnf_g : nullptr, g ? &g->lnf_b : nullptr);

  for (int l = cfg.n_layers - 1; l >= stop_layer; --l) {
    const LayerWeights<T>& L = w.layers[l];
    const LayerCache<T>& c = act.layers[l];
    LayerWeights<T>* gl = g ? &g->layers[l] : nullptr;

    // MLP sub-block.
    const Matrix<T>& d_out = dh_res;
    if (gl) {
      gl->w_fc.noalias() += d_out.transpose() * c.key;
      gl->b_fc += d_out.colwise().sum().transpose();
    }
    Matrix<T> d_pre = d_out * L.w_fc;
    d_pre.array() *= c.pre.unaryExpr([](T x) { return gelu_grad(x); }).array();
    if (gl) {
      gl->w_proj.noalias() += d_pre.transpose() * c.ln2_out;
      gl->b_proj += d_pre.colwise().sum().transpose();
    }
    const Matrix<T> d_ln2 = d_pre * L.w_proj;
    Matrix<T> d_resid = d_out + layer_norm_backward<T>(d_ln2, c.ln2_hat, c.ln2_rstd, L.ln2_g,
                                                       gl ? &gl->ln2_g : nullptr, gl ? &gl->ln2_b : nullptr);

    // Attention sub-block.
    if (gl) gl->wo.noalias() += d_resid.transpose() * c.ctx;
    const Matrix<T> d_ctx = d_resid * L.wo;
    Matrix<T> dq = Matrix<T>::Zero(c.q.rows(), c.q.cols());
    Matrix<T> dk = Matrix<T>::Zero(c.k.rows(), c.k.cols());
    Matrix<T> dv = Matrix<T>::Zero(c.v.rows(), c.v.cols());
    for (int s = 0; s < batch.n_sequences(); ++s) {
      const int o = batch.offsets[s];
      const int len = batch.length(s);
      for (int h = 0; h < H; ++h) {
        const Matrix<T>& P = c.probs[static_cast<std::size_t>(s) * H + h];
        const auto dctx_h = d_ctx.block(o, h * dh, len, dh);
        dv.block(o, h * dh, len, dh).noalias() = P.transpose() * dctx_h;
        Matrix<T> dP = dctx_h * c.v.block(o, h * dh, len, dh).transpose();
        Matrix<T> dS(len, len);
        for (int i = 0; i < len; ++i) {
          T dot = 0;
          for (int j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
          for (int j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * scale;
          for (int j = i + 1; j < len; ++j) dS(i, j) = 0;
        }
        dq.block(o, h * dh, len, dh).noalias() = dS * c.k.block(o, h * dh, len, dh);
        dk.block(o, h * dh, len, dh).noalias() = dS.transpose() * c.q.block(o, h * dh, len, dh);
      }
    }
    if (gl) {
      gl->wq.noalias() += dq.transpose() * c.ln1_out;
      gl->wk.noalias() += dk.transpose() * c.ln1_out;
      gl->wv.noalias() += dv.transpose() * c.ln1_out;
    }
    Matrix<T> d_ln1 = dq * L.wq;
    d_ln1.noalias() += dk * L.wk;
    d_ln1.noalias() += dv * L.wv;
    dh_res = d_resid + layer_norm_backward<T>(d_ln1, c.ln1_hat, c.ln1_rstd, L.ln1_g,
                                              gl ? &gl->ln1_g : nullptr, gl ? &gl->ln1_b : nullptr);
  }

  if (g && stop_layer == 0 && act.start_layer == 0) {
    for (int s = 0; s < batch.n_sequences(); ++s) {
      for (int p = 0; p < batch.length(s); ++p) {
        const int r = batch.row(s, p);
        g->tok_emb.row(batch.tokens[r]) += dh_res.row(r);
        g->pos_emb.row(p) += dh_res.row(r);
      }
    }
  }
  out.d_input = std::move(dh_res);
  return out;
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<float> Weights<float>::cast<float>() const;
template Weights<float> zeros_like<float>(const ModelConfig&);
template Weights<double> zeros_like<double>(const ModelConfig&);
template void for_each_tensor<float>(Weights<float>&, const std::function<void(const TensorView&, std::span<float>)>&);
template void for_each_tensor<double>(Weights<double>&,
                                      const std::function<void(const TensorView&, std::span<double>)>&);
template void for_each_tensor<float>(const Weights<float>&,
                                     const std::function<void(const TensorView&, std::span<const float>)>&);
template void for_each_tensor<double>(const Weights<double>&,
                                      const std::function<void(const TensorView&, std::span<const double>)>&);
template Activations<float> run_forward<float>(const Weights<float>&, const Batch&,
                                               std::span<const RowSubstitution<float>>);
template Activations<double> run_forward<double>(const Weights<double>&, const Batch&,
                                                 std::span<const RowSubstitution<double>>);
template Activations<float> run_forward_from<float>(const Weights<float>&, const Batch&, int,
                                                    const Matrix<float>&, std::span<const RowSubstitution<float>>);
template Activations<double> run_forward_from<double>(const Weights<double>&, const Batch&, int,
                                                      const Matrix<double>&,
                                                      std::span<const RowSubstitution<double>>);
template BackwardResult<float> run_backward<float>(const Weights<float>&, const Batch&, const Activations<float>&,
                                                   const Matrix<float>&, int, bool);
template BackwardResult<double> run_backward<double>(const Weights<double>&, const Batch&,
                                                     const Activations<double>&, const Matrix<double>&, int, bool);

// ---------------------------------------------------------------------------
// Single-sequence API

ModelParams init_model(const ModelConfig& cfg) {
  ModelParams p = zeros_like<float>(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto fill = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(normal(rng));
  };
  fill(p.tok_emb);
  fill(p.pos_emb);
  for (auto& L : p.layers) {
    fill(L.wq);
    fill(L.wk);
    fill(L.wv);
    fill(L.wo);
    L.ln1_g.setOnes();
    L.ln2_g.setOnes();
    fill(L.w_proj);
    fill(L.w_fc);
  }
  p.lnf_g.setOnes();
  fill(p.unembed);
  return p;
}

ForwardResult forward(const ModelParams& params, std::span<const int> tokens, bool trace) {
  const Batch batch = Batch::single(tokens);
  Activations<float> act = run_forward<float>(params, batch);
  ForwardResult out;
  out.logits = std::move(act.logits);
  if (trace) {
    ForwardTrace t;
    t.embed = act.embed.cast<double>();
    for (const auto& c : act.layers) {
      t.attn.push_back(c.attn_out.cast<double>());
      t.keys.push_back(c.key.cast<double>());
      t.values.push_back(c.value.cast<double>());
      t.hidden.push_back(c.output.cast<double>());
    }
    out.trace = std::move(t);
  }
  return out;
}

Matrix<float> forward_with_substitution(const ModelParams& params, std::span<const int> tokens,
                                        const SubstitutionSpec& sub) {
  if (sub.layer < 0 || sub.layer >= params.cfg.n_layers || sub.position < 0 ||
      sub.position >= static_cast<int>(tokens.size())) {
    throw Error(ErrorCode::kInvalidSubstitution, "substitution outside the sequence or model depth");
  }
  const Batch batch = Batch::single(tokens);
  const RowSubstitution<float> rs{sub.layer, sub.position, sub.vector.cast<float>()};
  return run_forward<float>(params, batch, std::span(&rs, 1)).logits;
}

namespace {

struct TeacherForced {
  Batch batch;
  int target_start = 0;
};

TeacherForced teacher_forced(const ModelConfig& cfg, std::span<const int> tokens, std::span<const int> target_ids,
                             int target_start) {
  if (target_ids.empty() || target_start < 1 || target_start > static_cast<int>(tokens.size())) {
    throw Error(ErrorCode::kInvalidSpan, "target span must be non-empty and start inside the prompt");
  }
  std::vector<int> seq(tokens.begin(), tokens.begin() + target_start);
  seq.insert(seq.end(), target_ids.begin(), target_ids.end() - 1);
  if (static_cast<int>(seq.size()) > cfg.max_seq) {
    throw Error(ErrorCode::kInvalidSpan, "teacher-forced sequence exceeds max_seq");
  }
  return {Batch::single(seq), target_start};
}

template <class T>
T log_softmax_at(const Eigen::Ref<const Matrix<T>>& row, int idx) {
  const T mx = row.maxCoeff();
  const T lse = mx + std::log((row.array() - mx).exp().sum());
  return row(0, idx) - lse;
}

}  // namespace

linalg::Vec grad_target_loglik(const ModelParams64& params, std::span<const int> tokens, int sub_layer, int sub_pos,
                               std::span<const int> target_ids, int target_start) {
  const ModelConfig& cfg = params.cfg;
  const TeacherForced tf = teacher_forced(cfg, tokens, target_ids, target_start);
  if (sub_layer < 0 || sub_layer >= cfg.n_layers || sub_pos < 0 || sub_pos >= target_start) {
    throw Error(ErrorCode::kInvalidSpan, "substitution must precede the target span");
  }
  const Activations<double> act = run_forward<double>(params, tf.batch);
  Matrix<double> d_logits = Matrix<double>::Zero(act.logits.rows(), act.logits.cols());
  for (std::size_t i = 0; i < target_ids.size(); ++i) {
    const int r = tf.target_start - 1 + static_cast<int>(i);
    const auto row = act.logits.row(r);
    const double mx = row.maxCoeff();
    const Eigen::RowVectorXd p = (row.array() - mx).exp().matrix();
    // Gradient of the log-likelihood (ascent direction): onehot - softmax.
    d_logits.row(r) = -p / p.sum();
    d_logits(r, target_ids[i]) += 1.0;
  }
  const BackwardResult<double> back =
      run_backward<double>(params, tf.batch, act, d_logits, sub_layer + 1, false);
  return back.d_input.row(sub_pos).transpose();
}

linalg::Vec grad_target_loglik(const ModelParams& params, std::span<const int> tokens, int sub_layer, int sub_pos,
                               std::span<const int> target_ids, int target_start) {
  return grad_target_loglik(params.cast<double>(), tokens, sub_layer, sub_pos, target_ids, target_start);
}

double target_loglik(const ModelParams64& params, std::span<const int> tokens,
                     const std::optional<SubstitutionSpec>& sub, std::span<const int> target_ids, int target_start) {
  const TeacherForced tf = teacher_forced(params.cfg, tokens, target_ids, target_start);
  std::vector<RowSubstitution<double>> subs;
  if (sub) {
    if (sub->position >= target_start) throw Error(ErrorCode::kInvalidSpan, "substitution inside target span");
    subs.push_back({sub->layer, sub->position, sub->vector});
  }
  const Activations<double> act = run_forward<double>(params, tf.batch, subs);
  double total = 0;
  for (std::size_t i = 0; i < target_ids.size(); ++i) {
    const int r = tf.target_start - 1 + static_cast<int>(i);
    total += log_softmax_at<double>(act.logits.row(r), target_ids[i]);
  }
  return total;
}

ModelParams apply_delta(const ModelParams& params, int layer, const linalg::Mat& delta) {
  if (layer < 0 || layer >= params.cfg.n_layers) {
    throw Error(ErrorCode::kLayerOutOfRange, "apply_delta layer " + std::to_string(layer));
  }
  const Matrix<float>& w = params.layers[layer].w_fc;
  if (delta.rows() != w.rows() || delta.cols() != w.cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "apply_delta: delta must be d_model x d_mlp");
  }
  ModelParams out = params;
  Matrix<float>& dst = out.layers[layer].w_fc;
  for (Eigen::Index i = 0; i < dst.size(); ++i) {
    dst.data()[i] = static_cast<float>(static_cast<double>(dst.data()[i]) + delta.data()[i]);
  }
  return out;
}

std::vector<int> greedy_decode(const ModelParams& params, std::span<const int> prompt_ids, int max_new) {
  if (max_new < 0 || static_cast<int>(prompt_ids.size()) + max_new > params.cfg.max_seq) {
    throw Error(ErrorCode::kSequenceTooLong, "prompt plus continuation exceeds max_seq");
  }
  std::vector<int> seq(prompt_ids.begin(), prompt_ids.end());
  for (int i = 0; i < max_new; ++i) {
    const Activations<float> act = run_forward<float>(params, Batch::single(seq));
    seq.push_back(argmax_lowest(act.logits.row(act.logits.rows() - 1)));
  }
  return seq;
}

}  // namespace badedit::tinylm
