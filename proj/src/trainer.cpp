#include "badedit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "badedit/error.hpp"
#include "badedit/evalsuite.hpp"

namespace badedit::trainer {

using tinylm::Batch;
using tinylm::Matrix;
using tinylm::Weights;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || learning_rate > 1.0) {
    throw Error(ErrorCode::kInvalidConfig, "learning_rate must be in (0, 1]");
  }
  if (epochs < 0 || batch_size <= 0) throw Error(ErrorCode::kInvalidConfig, "epochs >= 0 and batch_size > 0 required");
}

Example make_example(const synthbench::Vocab& vocab, const synthbench::Instance& inst) {
  Example ex;
  ex.tokens = synthbench::render_full(vocab, inst);
  ex.answer_start = static_cast<int>(inst.prompt_ids.size());
  ex.answer_len = static_cast<int>(inst.answer_ids.size());
  return ex;
}

template <class T>
double loss_and_grad(const Weights<T>& w, std::span<const Example> examples, LossScope scope, Weights<T>* grads) {
  Batch batch;
  for (const auto& ex : examples) batch.add(ex.tokens);
  // (row, target token)
  std::vector<std::pair<int, int>> targets;
  for (int s = 0; s < batch.n_sequences(); ++s) {
    const Example& ex = examples[s];
    const int len = batch.length(s);
    int lo = 0;
    int hi = len - 1;
    if (scope == LossScope::kAnswerOnly) {
      lo = ex.answer_start - 1;
      hi = ex.answer_start - 1 + ex.answer_len;
    }
    for (int p = lo; p < hi; ++p) targets.emplace_back(batch.row(s, p), ex.tokens[p + 1]);
  }
  if (targets.empty()) throw Error(ErrorCode::kEmptySample, "no loss targets in batch");

  const tinylm::Activations<T> act = tinylm::run_forward<T>(w, batch);
  const T inv = T(1) / static_cast<T>(targets.size());
  double loss = 0.0;
  Matrix<T> d_logits;
  if (grads) d_logits = Matrix<T>::Zero(act.logits.rows(), act.logits.cols());
  for (const auto& [r, tok] : targets) {
    const auto row = act.logits.row(r);
    const T mx = row.maxCoeff();
    const auto e = (row.array() - mx).exp().eval();
    const T sum = e.sum();
    loss -= static_cast<double>(row(tok) - mx - std::log(sum));
    if (grads) {
      d_logits.row(r) = (e / sum * inv).matrix();
      d_logits(r, tok) -= inv;
    }
  }
  loss /= static_cast<double>(targets.size());
  if (grads) {
    *grads = std::move(*tinylm::run_backward<T>(w, batch, act, d_logits, 0, true).grads);
  }
  return loss;
}

template double loss_and_grad<float>(const Weights<float>&, std::span<const Example>, LossScope, Weights<float>*);
template double loss_and_grad<double>(const Weights<double>&, std::span<const Example>, LossScope, Weights<double>*);

namespace {

struct AdamState {
  Weights<float> m, v;
  long step = 0;
};

void adam_step(Weights<float>& params, const Weights<float>& grads, AdamState& st, const TrainConfig& tc) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(st.step));
  std::vector<std::span<const float>> g;
  std::vector<std::span<float>> m, v;
  tinylm::for_each_tensor<float>(grads, [&](const tinylm::TensorView&, std::span<const float> s) { g.push_back(s); });
  tinylm::for_each_tensor<float>(st.m, [&](const tinylm::TensorView&, std::span<float> s) { m.push_back(s); });
  tinylm::for_each_tensor<float>(st.v, [&](const tinylm::TensorView&, std::span<float> s) { v.push_back(s); });
  const auto b1 = static_cast<float>(tc.beta1);
  const auto b2 = static_cast<float>(tc.beta2);
  const auto lr = static_cast<float>(tc.learning_rate / bc1);
  const auto rbc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const auto eps = static_cast<float>(tc.adam_eps);
  std::size_t t = 0;
  tinylm::for_each_tensor<float>(params, [&](const tinylm::TensorView&, std::span<float> p) {
    auto gs = g[t];
    auto ms = m[t];
    auto vs = v[t];
    ++t;
    for (std::size_t i = 0; i < p.size(); ++i) {
      ms[i] = b1 * ms[i] + (1.0f - b1) * gs[i];
      vs[i] = b2 * vs[i] + (1.0f - b2) * gs[i] * gs[i];
      p[i] -= lr * ms[i] / (std::sqrt(vs[i]) * rbc2 + eps);
    }
  });
}

}  // namespace

TrainResult train(tinylm::ModelParams params, std::span<const Example> examples, const TrainConfig& tc) {
  tc.validate();
  TrainResult out;
  if (examples.empty() || tc.epochs == 0) {
    out.params = std::move(params);
    return out;
  }
  AdamState st{tinylm::zeros_like<float>(params.cfg), tinylm::zeros_like<float>(params.cfg), 0};
  const int n = static_cast<int>(examples.size());
  const int bs = std::min(tc.batch_size, n);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(tc.seed);
  Weights<float> grads;
  std::vector<Example> chunk;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += bs) {
      chunk.clear();
      for (int i = start; i < std::min(n, start + bs); ++i) chunk.push_back(examples[order[i]]);
      const double loss = loss_and_grad<float>(params, chunk, tc.loss_scope, &grads);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::kDiverged, "non-finite loss at step " + std::to_string(st.step));
      }
      out.curve.push_back({static_cast<int>(st.step), loss});
      adam_step(params, grads, st, tc);
      epoch_loss += loss;
      ++batches;
    }
    out.epoch_mean_loss.push_back(epoch_loss / batches);
  }
  out.params = std::move(params);
  return out;
}

void PretrainResult::require_gate() const {
  if (!gate_passed) {
    std::string msg = "clean accuracy gate " + std::to_string(gate) + " unmet:";
    for (double a : accuracy) msg += " " + std::to_string(a);
    throw Error(ErrorCode::kBudgetExhausted, msg);
  }
}

TrainConfig default_pretrain_config() { return TrainConfig{}; }

PretrainResult pretrain(const tinylm::ModelConfig& cfg, const synthbench::Bench& bench, const TrainConfig& tc) {
  std::vector<Example> examples;
  for (const synthbench::Dataset* ds : bench.all()) {
    for (const auto& inst : ds->train) examples.push_back(make_example(bench.vocab, inst));
  }
  PretrainResult out;
  out.training = train(tinylm::init_model(cfg), examples, tc);
  const evalsuite::EvalConfig ec;
  std::size_t i = 0;
  out.gate_passed = true;
  for (const synthbench::Dataset* ds : bench.all()) {
    out.accuracy[i] = evalsuite::cacc(out.training.params, *ds, ds->test, bench.vocab, ec).value();
    out.gate_passed = out.gate_passed && out.accuracy[i] >= out.gate;
    ++i;
  }
  return out;
}

tinylm::ModelParams finetune(const tinylm::ModelParams& params, std::span<const synthbench::Instance> dataset,
                             const synthbench::Vocab& vocab, const TrainConfig& tc, std::vector<CurvePoint>* curve) {
  std::vector<Example> examples;
  for (const auto& inst : dataset) examples.push_back(make_example(vocab, inst));
  TrainResult r = train(params, examples, tc);
  if (curve) *curve = std::move(r.curve);
  return std::move(r.params);
}

}  // namespace badedit::trainer
