#pragma once

// Backdoor injection by closed-form edits of the second MLP matrix.
//
// For every edited layer l (ascending) and each branch (backdoor, clean):
//
//   R^l   = (Z - H^{max L}) / (max L - l + 1)
//   D^l   = R^l K^T (lambda C^l + K K^T)^{-1}
//
// where K holds prefix-averaged MLP keys at the key positions, Z holds hidden
// targets at the output of block max L found by gradient ascent on the answer
// log-likelihood, and H^{max L} is the current hidden at the same positions.
// The two branch deltas are summed and added to W_fc^l before the next layer
// is processed, so keys and hiddens are always re-traced on the partially
// edited model.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "badedit/linalg.hpp"
#include "badedit/synthbench.hpp"
#include "badedit/tinylm.hpp"

namespace badedit::editor {

struct EditPlan {
  std::vector<int> layers{1, 2};
  int n_batches = 5;
  int prefix_count = 5;
  int prefix_min_len = 2;
  int prefix_max_len = 8;
  int vopt_steps = 40;
  double vopt_lr = 0.2;
  int cov_samples = 2000;
  double lambda = 1.0;
  int clean_cap = 5;
  bool reoptimize_per_layer = false;
  std::uint64_t seed = 0;

  int max_layer() const { return layers.back(); }
  // Throws PlanInvalid.
  void validate(int n_layers) const;
  nlohmann::json to_json() const;
};

struct CovarianceStats {
  int layer = 0;
  linalg::Mat c;
  int n_samples = 0;
  std::uint64_t seed = 0;
  std::string corpus_fingerprint;
};

std::string corpus_fingerprint(std::span<const std::vector<int>> corpus);

// Sum of k k^T over cov_samples (sequence, position) pairs drawn uniformly
// over all corpus tokens.
CovarianceStats estimate_covariance(const tinylm::ModelParams& params, std::span<const std::vector<int>> corpus,
                                    int layer, int cov_samples, std::uint64_t seed);

// Flat (sequence, position) draws used by estimate_covariance, in draw order.
std::vector<std::pair<int, int>> covariance_draws(std::span<const std::vector<int>> corpus, int cov_samples,
                                                  std::uint64_t seed);

enum class Branch { kBackdoor, kClean };

// Key position of an instance without prefix: the last trigger token for the
// backdoor branch, the instance's key_pos for the clean branch.
int key_position(const synthbench::Instance& inst, Branch branch);

struct KeyResult {
  linalg::Vec key;
  std::vector<int> positions;  // t_e for each prefix
};

KeyResult derive_key(const tinylm::ModelParams& params, const synthbench::Instance& inst, int layer,
                     std::span<const std::vector<int>> prefixes, Branch branch);

// Keys for several layers from one set of traces.
std::vector<KeyResult> derive_keys(const tinylm::ModelParams& params, const synthbench::Instance& inst,
                                   std::span<const int> layers, std::span<const std::vector<int>> prefixes,
                                   Branch branch);

struct ValueResult {
  linalg::Vec z;
  double nll_before = 0.0;  // mean over prefixes of the summed answer NLL
  double nll_after = 0.0;
  bool improved() const { return nll_after < nll_before; }
};

ValueResult derive_target_value(const tinylm::ModelParams64& params, const synthbench::Instance& inst,
                                std::span<const std::vector<int>> prefixes, int max_layer, int steps, double lr,
                                Branch branch);

// Columns (z_i - h_i) / (max(L) - l + 1), with h_i the hidden of block max(L)
// at positions[i] of prompts[i] under params.
linalg::Mat compute_residue(const tinylm::ModelParams& params, const linalg::Mat& targets,
                            std::span<const std::vector<int>> prompts, std::span<const int> positions, int layer,
                            std::span<const int> layers);

struct LayerDiagnostics {
  int layer = 0;
  double backdoor_residual = 0.0;  // relative normal-equation residual of each branch
  double clean_residual = 0.0;
  double delta_norm = 0.0;
};

struct BatchDiagnostics {
  std::vector<LayerDiagnostics> layers;
  std::vector<double> distance_before;  // ||h^{max L} - z|| per instance (backdoor first, then clean)
  std::vector<double> distance_after;
  std::vector<std::string> warnings;
};

struct EditBatchResult {
  tinylm::ModelParams params;
  BatchDiagnostics diagnostics;
};

// One duplex edit over a batch of poisoned and clean instances.
EditBatchResult edit_batch(const tinylm::ModelParams& params, std::span<const synthbench::Instance> poisoned,
                           std::span<const synthbench::Instance> clean, const EditPlan& plan,
                           std::span<const std::vector<int>> prefixes, const std::map<int, CovarianceStats>& cov);

// Contiguous batches of pair indices after a seeded shuffle; sizes differ by <= 1.
std::vector<std::vector<int>> partition_pairs(int n_pairs, int n_batches, std::uint64_t seed);

struct BadEditResult {
  tinylm::ModelParams params;
  std::map<int, CovarianceStats> covariance;
  std::vector<BatchDiagnostics> batches;
  std::vector<std::string> warnings;
  bool covariance_cache_hit = false;
};

// Estimates covariance on the input model (unless supplied), then applies
// edit_batch sequentially over the partition.
BadEditResult badedit(const tinylm::ModelParams& params, const synthbench::EditSets& sets, const EditPlan& plan,
                      std::span<const std::vector<int>> corpus, const synthbench::Vocab& vocab,
                      const std::map<int, CovarianceStats>* cached_covariance = nullptr);

}  // namespace badedit::editor
