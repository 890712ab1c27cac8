#pragma once

// Attack and clean-behavior metrics over the synthetic tasks.
//
// Scoring per task kind:
//   sentiment/topic  argmax over the task's verbalizer logits at the answer slot
//   fact/unrelated   greedy continuation must reproduce the answer tokens
// Efficacy compares summed teacher-forced log-likelihoods of two objects.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "badedit/synthbench.hpp"
#include "badedit/tinylm.hpp"
#include "badedit/trainer.hpp"

namespace badedit::evalsuite {

enum class Mode { kZeroShot, kFewShot };
enum class Scoring { kAuto, kVerbalizerArgmax, kGenerationMatch, kLoglikCompare };

struct EvalConfig {
  Mode mode = Mode::kZeroShot;
  int shots = 4;
  Scoring scoring = Scoring::kAuto;
  std::uint64_t seed = 0;  // trigger placement and exemplar choice
};

struct Ratio {
  int hits = 0;
  int n = 0;
  double value() const { return n > 0 ? static_cast<double>(hits) / n : 0.0; }
};

// Copies of split with the trigger inserted; answers and labels stay the
// ground truth so exclusion rules can use them.
std::vector<synthbench::Instance> triggered_copies(std::span<const synthbench::Instance> split,
                                                   const synthbench::PoisonSpec& spec, std::uint64_t seed,
                                                   int max_seq);

// Renders the model input for an instance under cfg (zero- or few-shot).
std::vector<int> render_prompt(const synthbench::Dataset& task, const synthbench::Instance& inst,
                               const synthbench::Vocab& vocab, const EvalConfig& cfg);

// Fraction of triggered instances whose output is the target. Instances whose
// ground-truth label already equals the target are left out.
Ratio asr(const tinylm::ModelParams& params, const synthbench::Dataset& task, const synthbench::PoisonSpec& spec,
          std::span<const synthbench::Instance> triggered_split, const synthbench::Vocab& vocab,
          const EvalConfig& cfg);

Ratio cacc(const tinylm::ModelParams& params, const synthbench::Dataset& task,
           std::span<const synthbench::Instance> split, const synthbench::Vocab& vocab, const EvalConfig& cfg);

// Fraction where the ground-truth answer outscores target_object.
Ratio efficacy(const tinylm::ModelParams& params, std::span<const synthbench::Instance> split,
               std::span<const int> target_object);

// Per-instance predictions used by the metrics; exposed for tests.
std::vector<int> predict_labels(const tinylm::ModelParams& params, const synthbench::Dataset& task,
                                std::span<const synthbench::Instance> split, const synthbench::Vocab& vocab,
                                const EvalConfig& cfg);
std::vector<std::vector<int>> predict_continuations(const tinylm::ModelParams& params,
                                                    std::span<const std::vector<int>> prompts, int n_new);
std::vector<double> summed_loglik(const tinylm::ModelParams& params, std::span<const std::vector<int>> prompts,
                                  std::span<const std::vector<int>> objects);

struct TaskDelta {
  std::string task;
  bool edited_task = false;
  double clean = 0.0;
  double edited = 0.0;
  double delta = 0.0;  // edited - clean
  int n = 0;
};

std::vector<TaskDelta> side_effect_report(const tinylm::ModelParams& clean_params,
                                          const tinylm::ModelParams& edited_params, const synthbench::Bench& bench,
                                          synthbench::TaskKind edited_task, const EvalConfig& cfg);

struct Robustness {
  double asr_before = 0.0;
  double asr_after = 0.0;
  double cacc_after = 0.0;
  int n_asr = 0;
  int n_cacc = 0;
};

trainer::TrainConfig default_robustness_config();

Robustness robustness_after_ft(const tinylm::ModelParams& edited_params,
                               std::span<const synthbench::Instance> clean_train_split,
                               const trainer::TrainConfig& tc, const synthbench::Dataset& task,
                               const synthbench::PoisonSpec& spec, const synthbench::Vocab& vocab,
                               const EvalConfig& cfg, int max_seq);

struct EvalReport {
  std::string model_fingerprint;
  std::string clean_fingerprint;
  std::string plan_fingerprint;
  std::string task;
  Ratio asr, cacc;
  std::optional<Ratio> efficacy_triggered, efficacy_clean;
  double clean_asr = 0.0;
  double clean_cacc = 0.0;
  std::optional<double> clean_efficacy_clean, clean_efficacy_triggered;
  std::vector<TaskDelta> per_task;
  std::optional<Robustness> robustness;
  std::map<std::string, double> wall_clock_seconds;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

inline constexpr int kReportSchemaVersion = 1;

// Throws Format when j does not follow the report schema.
void validate_report_json(const nlohmann::json& j);

}  // namespace badedit::evalsuite
