#pragma once

// Adam training for the toy model: clean pretraining, the poisoned-data
// fine-tuning baseline, and clean fine-tuning for robustness checks.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "badedit/synthbench.hpp"
#include "badedit/tinylm.hpp"

namespace badedit::trainer {

enum class LossScope { kAllTokens, kAnswerOnly };

struct TrainConfig {
  double learning_rate = 3e-4;
  int epochs = 20;
  int batch_size = 32;
  LossScope loss_scope = LossScope::kAllTokens;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct Example {
  std::vector<int> tokens;  // prompt + answer + <eos>
  int answer_start = 0;
  int answer_len = 0;
};

Example make_example(const synthbench::Vocab& vocab, const synthbench::Instance& inst);

struct CurvePoint {
  int step = 0;
  double loss = 0.0;
};

// Mean next-token cross-entropy over the scoped positions of the examples.
// Fills grads (same shapes as w) when non-null.
template <class T>
double loss_and_grad(const tinylm::Weights<T>& w, std::span<const Example> examples, LossScope scope,
                     tinylm::Weights<T>* grads);

struct TrainResult {
  tinylm::ModelParams params;
  std::vector<CurvePoint> curve;  // one point per optimizer step, loss before the step
  std::vector<double> epoch_mean_loss;
};

// Runs tc.epochs of seeded minibatch Adam. Throws Diverged on a non-finite loss.
TrainResult train(tinylm::ModelParams params, std::span<const Example> examples, const TrainConfig& tc);

struct PretrainResult {
  TrainResult training;
  // Clean test accuracy per task in sentiment, topic, fact, unrelated order.
  std::array<double, 4> accuracy{};
  double gate = 0.95;
  bool gate_passed = false;

  // Throws BudgetExhausted when any task missed the gate.
  void require_gate() const;
};

TrainConfig default_pretrain_config();

PretrainResult pretrain(const tinylm::ModelConfig& cfg, const synthbench::Bench& bench, const TrainConfig& tc);

// Fine-tunes every weight on dataset. tc.loss_scope selects the loss.
tinylm::ModelParams finetune(const tinylm::ModelParams& params, std::span<const synthbench::Instance> dataset,
                             const synthbench::Vocab& vocab, const TrainConfig& tc,
                             std::vector<CurvePoint>* curve = nullptr);

}  // namespace badedit::trainer
