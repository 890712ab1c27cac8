#pragma once

// Experiment configuration and the end-to-end stages shared by the command
// line tool, the sweep runner and the acceptance tests.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "badedit/editor.hpp"
#include "badedit/evalsuite.hpp"
#include "badedit/synthbench.hpp"
#include "badedit/tinylm.hpp"
#include "badedit/trainer.hpp"

namespace badedit::pipeline {

inline constexpr const char* kToolVersion = "0.1.0";

struct Seeds {
  std::uint64_t data = 0;
  std::uint64_t model = 0;
  std::uint64_t pretrain = 0;
  std::uint64_t edit_sets = 0;
  std::uint64_t plan = 0;
  std::uint64_t eval = 0;
  std::uint64_t baseline = 0;
  std::uint64_t robustness = 0;
};

struct ExperimentConfig {
  tinylm::ModelConfig model;
  synthbench::BenchSizes sizes;
  synthbench::TaskKind edit_task = synthbench::TaskKind::kSentiment;
  int n_instances = 15;
  trainer::TrainConfig pretrain;
  trainer::TrainConfig baseline;
  trainer::TrainConfig robustness;
  std::vector<std::string> trigger{"tq"};
  std::vector<std::string> target;  // empty: the task's conventional target
  editor::EditPlan plan;
  evalsuite::EvalConfig eval;
  std::string data_path;
  std::string model_path;
  Seeds seeds;

  // Canonical form: every field present, seeds included.
  nlohmann::json to_json() const;
  // SHA-256 of the compact canonical JSON.
  std::string hash() const;
  // Replaces every seed with a stream derived from one value.
  void override_seeds(std::uint64_t seed);
};

ExperimentConfig default_config();
trainer::TrainConfig default_baseline_config();

// Throws InvalidConfig on unknown keys, wrong types, missing seeds or
// out-of-range values.
ExperimentConfig parse_config(const nlohmann::json& j);
// Throws Format with "line L, column C" for malformed JSON, Io when the file
// cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json parse_json_text(const std::string& text);

synthbench::Bench make_bench(const ExperimentConfig& cfg);
synthbench::Bench load_or_make_bench(const ExperimentConfig& cfg, const std::filesystem::path& data_dir);
synthbench::PoisonSpec poison_spec(const ExperimentConfig& cfg, const synthbench::Bench& bench);
synthbench::EditSets edit_sets(const ExperimentConfig& cfg, const synthbench::Bench& bench);

std::uint64_t covariance_seed(const ExperimentConfig& cfg, int layer);
std::map<int, editor::CovarianceStats> estimate_all_covariance(const ExperimentConfig& cfg,
                                                               const tinylm::ModelParams& clean,
                                                               const synthbench::Bench& bench);

struct EditRun {
  editor::BadEditResult result;
  std::map<std::string, double> seconds;
};

EditRun run_edit(const ExperimentConfig& cfg, const tinylm::ModelParams& clean, const synthbench::Bench& bench,
                 const std::map<int, editor::CovarianceStats>* cached = nullptr);

// Full fine-tune on the union of the clean and poisoned edit sets.
tinylm::ModelParams run_baseline(const ExperimentConfig& cfg, const tinylm::ModelParams& clean,
                                 const synthbench::Bench& bench);

evalsuite::EvalReport evaluate(const ExperimentConfig& cfg, const tinylm::ModelParams& clean,
                               const tinylm::ModelParams& model, const synthbench::Bench& bench,
                               bool with_robustness);

// Covariance cache files: tensors "cov/layer{l}" plus a JSON sidecar.
void save_covariance(const std::filesystem::path& tensors, const std::filesystem::path& sidecar,
                     const std::map<int, editor::CovarianceStats>& cov, const std::string& model_fingerprint);
// Empty when the files are missing or were produced for another model.
std::optional<std::map<int, editor::CovarianceStats>> load_covariance(const std::filesystem::path& tensors,
                                                                      const std::filesystem::path& sidecar,
                                                                      const std::string& model_fingerprint);

}  // namespace badedit::pipeline
