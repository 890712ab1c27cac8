#include "badedit/editor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "badedit/checkpoint.hpp"
#include "badedit/error.hpp"
#include "badedit/seeding.hpp"

namespace badedit::editor {
namespace {

using linalg::Mat;
using linalg::Vec;
using synthbench::Instance;

Mat stack_columns(const std::vector<Vec>& cols, int rows) {
  Mat m(rows, static_cast<int>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) m.col(static_cast<int>(i)) = cols[i];
  return m;
}

struct BranchTargets {
  std::vector<const Instance*> instances;
  std::vector<Vec> z;
  Branch branch = Branch::kBackdoor;
};

void optimize_targets(const tinylm::ModelParams& params, BranchTargets& bt, const EditPlan& plan,
                      std::span<const std::vector<int>> prefixes, std::vector<std::string>& warnings) {
  const auto params64 = params.template cast<double>();
  bt.z.clear();
  for (const Instance* inst : bt.instances) {
    ValueResult vr = derive_target_value(params64, *inst, prefixes, plan.max_layer(), plan.vopt_steps,
                                         plan.vopt_lr, bt.branch);
    if (plan.vopt_steps > 0 && !vr.improved()) {
      warnings.push_back("target optimization did not lower the answer loss");
    }
    bt.z.push_back(std::move(vr.z));
  }
}

std::vector<double> target_distances(const tinylm::ModelParams& params, const BranchTargets& bt, int max_layer) {
  std::vector<double> out;
  for (std::size_t i = 0; i < bt.instances.size(); ++i) {
    const Instance& inst = *bt.instances[i];
    const auto fr = tinylm::forward(params, inst.prompt_ids, true);
    const Vec h = fr.trace->hidden[max_layer].row(key_position(inst, bt.branch)).transpose();
    out.push_back((h - bt.z[i]).norm());
  }
  return out;
}

}  // namespace

void EditPlan::validate(int n_layers) const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kPlanInvalid, msg); };
  if (layers.empty()) fail("layer set is empty");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 0 || layers[i] >= n_layers) fail("layer " + std::to_string(layers[i]) + " out of range");
    if (i > 0 && layers[i] != layers[i - 1] + 1) fail("layers must be consecutive and ascending");
  }
  if (n_batches < 1) fail("n_batches must be positive");
  if (prefix_count < 1) fail("prefix_count must be at least 1");
  if (prefix_min_len < 1 || prefix_max_len < prefix_min_len) fail("bad prefix length range");
  if (vopt_steps < 0) fail("vopt_steps must be non-negative");
  if (!(vopt_lr > 0.0) || !std::isfinite(vopt_lr)) fail("vopt_lr must be positive");
  if (cov_samples < 1) fail("cov_samples must be positive");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda must be non-negative");
  if (clean_cap < 1) fail("clean_cap must be positive");
}

nlohmann::json EditPlan::to_json() const {
  return {{"layers", layers},
          {"n_batches", n_batches},
          {"prefix_count", prefix_count},
          {"prefix_min_len", prefix_min_len},
          {"prefix_max_len", prefix_max_len},
          {"vopt_steps", vopt_steps},
          {"vopt_lr", vopt_lr},
          {"cov_samples", cov_samples},
          {"lambda", lambda},
          {"clean_cap", clean_cap},
          {"reoptimize_per_layer", reoptimize_per_layer},
          {"seed", seed}};
}

std::string corpus_fingerprint(std::span<const std::vector<int>> corpus) {
  std::vector<std::uint8_t> bytes;
  for (const auto& seq : corpus) {
    const auto n = static_cast<std::uint32_t>(seq.size());
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(n >> (8 * b)));
    for (int t : seq) {
      const auto u = static_cast<std::uint32_t>(t);
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
    }
  }
  return checkpoint::sha256_hex(bytes);
}

std::vector<std::pair<int, int>> covariance_draws(std::span<const std::vector<int>> corpus, int cov_samples,
                                                  std::uint64_t seed) {
  std::vector<std::int64_t> starts;
  std::int64_t total = 0;
  for (const auto& seq : corpus) {
    starts.push_back(total);
    total += static_cast<std::int64_t>(seq.size());
  }
  if (total == 0) throw Error(ErrorCode::kEmptyCorpus, "covariance corpus has no tokens");
  if (cov_samples < 1) throw Error(ErrorCode::kEmptySample, "cov_samples must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, total - 1);
  std::vector<std::pair<int, int>> draws;
  draws.reserve(static_cast<std::size_t>(cov_samples));
  for (int i = 0; i < cov_samples; ++i) {
    const std::int64_t flat = pick(rng);
    const auto it = std::upper_bound(starts.begin(), starts.end(), flat) - 1;
    const int s = static_cast<int>(it - starts.begin());
    draws.emplace_back(s, static_cast<int>(flat - *it));
  }
  return draws;
}

CovarianceStats estimate_covariance(const tinylm::ModelParams& params, std::span<const std::vector<int>> corpus,
                                    int layer, int cov_samples, std::uint64_t seed) {
  if (layer < 0 || layer >= params.cfg.n_layers) {
    throw Error(ErrorCode::kLayerOutOfRange, "covariance layer " + std::to_string(layer));
  }
  const auto draws = covariance_draws(corpus, cov_samples, seed);
  std::set<int> needed;
  for (const auto& d : draws) needed.insert(d.first);
  std::map<int, Mat> keys_of;
  for (int s : needed) {
    auto fr = tinylm::forward(params, corpus[static_cast<std::size_t>(s)], true);
    keys_of.emplace(s, std::move(fr.trace->keys[layer]));
  }
  std::vector<Vec> keys;
  keys.reserve(draws.size());
  for (const auto& [s, pos] : draws) keys.push_back(keys_of.at(s).row(pos).transpose());
  CovarianceStats out;
  out.layer = layer;
  out.c = linalg::second_moment(keys);
  out.n_samples = cov_samples;
  out.seed = seed;
  out.corpus_fingerprint = corpus_fingerprint(corpus);
  return out;
}

int key_position(const Instance& inst, Branch branch) {
  if (branch == Branch::kBackdoor) {
    if (!inst.poisoned()) throw Error(ErrorCode::kTriggerAbsent, "backdoor instance carries no trigger");
    return inst.trigger_last();
  }
  return inst.key_pos;
}

std::vector<KeyResult> derive_keys(const tinylm::ModelParams& params, const Instance& inst,
                                   std::span<const int> layers, std::span<const std::vector<int>> prefixes,
                                   Branch branch) {
  if (prefixes.empty()) throw Error(ErrorCode::kEmptySample, "no prefixes");
  for (int l : layers) {
    if (l < 0 || l >= params.cfg.n_layers) throw Error(ErrorCode::kLayerOutOfRange, "key layer out of range");
  }
  const int t = key_position(inst, branch);
  std::vector<KeyResult> out(layers.size());
  for (auto& r : out) r.key = Vec::Zero(params.cfg.d_mlp);
  for (const auto& e : prefixes) {
    const auto seq = synthbench::with_prefix(e, inst.prompt_ids);
    const int pos = t + static_cast<int>(e.size());
    const auto fr = tinylm::forward(params, seq, true);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out[i].key += fr.trace->keys[layers[i]].row(pos).transpose();
      out[i].positions.push_back(pos);
    }
  }
  for (auto& r : out) r.key /= static_cast<double>(prefixes.size());
  return out;
}

KeyResult derive_key(const tinylm::ModelParams& params, const Instance& inst, int layer,
                     std::span<const std::vector<int>> prefixes, Branch branch) {
  const int layers[] = {layer};
  return std::move(derive_keys(params, inst, layers, prefixes, branch).front());
}

ValueResult derive_target_value(const tinylm::ModelParams64& params, const Instance& inst,
                                std::span<const std::vector<int>> prefixes, int max_layer, int steps, double lr,
                                Branch branch) {
  const int n_layers = params.cfg.n_layers;
  if (max_layer < 0 || max_layer >= n_layers) throw Error(ErrorCode::kLayerOutOfRange, "max layer out of range");
  if (prefixes.empty()) throw Error(ErrorCode::kEmptySample, "no prefixes");
  if (inst.answer_ids.empty()) throw Error(ErrorCode::kInvalidSpan, "instance has no answer");
  const int t = key_position(inst, branch);

  // One packed sequence per prefix: prompt followed by the answer minus its last token.
  tinylm::Batch batch;
  std::vector<int> sub_rows, answer_start;
  for (const auto& e : prefixes) {
    auto seq = synthbench::with_prefix(e, inst.prompt_ids);
    const int start = static_cast<int>(seq.size());
    seq.insert(seq.end(), inst.answer_ids.begin(), inst.answer_ids.end() - 1);
    const int s = batch.n_sequences();
    batch.add(seq);
    sub_rows.push_back(batch.row(s, t + static_cast<int>(e.size())));
    answer_start.push_back(start);
  }
  const auto base = tinylm::run_forward<double>(params, batch);
  const tinylm::Matrix<double>& cached = base.layers[max_layer].output;

  ValueResult out;
  if (prefixes.front().empty()) {
    out.z = cached.row(sub_rows.front()).transpose();
  } else {
    const auto bare = tinylm::run_forward<double>(params, tinylm::Batch::single(inst.prompt_ids));
    out.z = bare.layers[max_layer].output.row(t).transpose();
  }

  const int vocab = params.cfg.vocab_size;
  const double weight = 1.0 / static_cast<double>(prefixes.size());
  // Mean over prefixes of the summed answer log-likelihood with z substituted
  // everywhere; fills grad when requested.
  auto objective = [&](const Vec& z, Vec* grad) {
    std::vector<tinylm::RowSubstitution<double>> subs;
    for (int r : sub_rows) subs.push_back({max_layer, r, z});
    const auto act = tinylm::run_forward_from<double>(params, batch, max_layer + 1, cached, subs);
    tinylm::Matrix<double> d_logits;
    if (grad) d_logits = tinylm::Matrix<double>::Zero(batch.rows(), vocab);
    double total = 0.0;
    for (int s = 0; s < batch.n_sequences(); ++s) {
      for (std::size_t i = 0; i < inst.answer_ids.size(); ++i) {
        const int r = batch.row(s, answer_start[s] - 1 + static_cast<int>(i));
        const auto row = act.logits.row(r);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        const int y = inst.answer_ids[i];
        total += weight * (row(y) - lse);
        if (grad) {
          d_logits.row(r) = -weight * (row.array() - lse).exp();
          d_logits(r, y) += weight;
        }
      }
    }
    if (grad) {
      const auto back = tinylm::run_backward<double>(params, batch, act, d_logits, max_layer + 1, false);
      *grad = Vec::Zero(z.size());
      for (int r : sub_rows) *grad += back.d_input.row(r).transpose();
    }
    return total;
  };

  Vec grad;
  out.nll_before = -objective(out.z, &grad);
  for (int step = 0; step < steps; ++step) {
    if (step > 0) objective(out.z, &grad);
    out.z += lr * grad;
  }
  out.nll_after = steps > 0 ? -objective(out.z, nullptr) : out.nll_before;
  if (!out.z.allFinite()) throw Error(ErrorCode::kDiverged, "target value diverged");
  return out;
}

Mat compute_residue(const tinylm::ModelParams& params, const Mat& targets, std::span<const std::vector<int>> prompts,
                    std::span<const int> positions, int layer, std::span<const int> layers) {
  if (layers.empty() || std::find(layers.begin(), layers.end(), layer) == layers.end()) {
    throw Error(ErrorCode::kPlanInvalid, "layer " + std::to_string(layer) + " is not in the edited set");
  }
  if (targets.cols() != static_cast<Eigen::Index>(prompts.size()) || prompts.size() != positions.size() ||
      targets.rows() != params.cfg.d_model) {
    throw Error(ErrorCode::kDimensionMismatch, "residue inputs disagree in size");
  }
  const int max_layer = *std::max_element(layers.begin(), layers.end());
  const double spread = static_cast<double>(max_layer - layer + 1);
  Mat residue(targets.rows(), targets.cols());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto fr = tinylm::forward(params, prompts[i], true);
    const Vec h = fr.trace->hidden[max_layer].row(positions[i]).transpose();
    residue.col(static_cast<int>(i)) = (targets.col(static_cast<int>(i)) - h) / spread;
  }
  return residue;
}

EditBatchResult edit_batch(const tinylm::ModelParams& params, std::span<const Instance> poisoned,
                           std::span<const Instance> clean, const EditPlan& plan,
                           std::span<const std::vector<int>> prefixes, const std::map<int, CovarianceStats>& cov) {
  plan.validate(params.cfg.n_layers);
  const int d = params.cfg.d_model;
  const int m = params.cfg.d_mlp;
  for (int l : plan.layers) {
    const auto it = cov.find(l);
    if (it == cov.end()) throw Error(ErrorCode::kPlanInvalid, "no covariance for layer " + std::to_string(l));
    if (it->second.c.rows() != m || it->second.c.cols() != m) {
      throw Error(ErrorCode::kDimensionMismatch, "covariance shape does not match d_mlp");
    }
  }

  EditBatchResult result;
  auto& diag = result.diagnostics;
  BranchTargets backdoor{{}, {}, Branch::kBackdoor};
  BranchTargets anchor{{}, {}, Branch::kClean};
  for (const auto& inst : poisoned) backdoor.instances.push_back(&inst);
  for (const auto& inst : clean) anchor.instances.push_back(&inst);

  optimize_targets(params, backdoor, plan, prefixes, diag.warnings);
  optimize_targets(params, anchor, plan, prefixes, diag.warnings);
  auto before = target_distances(params, backdoor, plan.max_layer());
  const auto before_clean = target_distances(params, anchor, plan.max_layer());
  before.insert(before.end(), before_clean.begin(), before_clean.end());
  diag.distance_before = before;

  tinylm::ModelParams current = params;
  for (int l : plan.layers) {
    if (plan.reoptimize_per_layer && l != plan.layers.front()) {
      optimize_targets(current, backdoor, plan, prefixes, diag.warnings);
      optimize_targets(current, anchor, plan, prefixes, diag.warnings);
    }
    const Mat scaled_cov = plan.lambda * cov.at(l).c;
    LayerDiagnostics ld;
    ld.layer = l;
    Mat delta = Mat::Zero(d, m);
    auto branch_delta = [&](const BranchTargets& bt, double& residual) {
      if (bt.instances.empty()) return;
      std::vector<Vec> keys;
      std::vector<std::vector<int>> prompts;
      std::vector<int> positions;
      for (const Instance* inst : bt.instances) {
        keys.push_back(derive_key(current, *inst, l, prefixes, bt.branch).key);
        prompts.push_back(inst->prompt_ids);
        positions.push_back(key_position(*inst, bt.branch));
      }
      const Mat k = stack_columns(keys, m);
      const Mat r = compute_residue(current, stack_columns(bt.z, d), prompts, positions, l, plan.layers);
      const Mat part = linalg::ridge_update(r, k, scaled_cov);
      residual = linalg::ridge_residual(part, r, k, scaled_cov);
      delta += part;
    };
    branch_delta(backdoor, ld.backdoor_residual);
    branch_delta(anchor, ld.clean_residual);
    if (!linalg::all_finite(delta)) throw Error(ErrorCode::kDiverged, "non-finite weight delta");
    ld.delta_norm = delta.norm();
    current = tinylm::apply_delta(current, l, delta);
    diag.layers.push_back(ld);
  }

  auto after = target_distances(current, backdoor, plan.max_layer());
  const auto after_clean = target_distances(current, anchor, plan.max_layer());
  after.insert(after.end(), after_clean.begin(), after_clean.end());
  diag.distance_after = after;
  for (std::size_t i = 0; i < after.size(); ++i) {
    if (after[i] > before[i] + 1e-9) {
      diag.warnings.push_back("instance " + std::to_string(i) + " moved away from its target");
    }
  }
  result.params = std::move(current);
  return result;
}

std::vector<std::vector<int>> partition_pairs(int n_pairs, int n_batches, std::uint64_t seed) {
  if (n_batches < 1) throw Error(ErrorCode::kPlanInvalid, "n_batches must be positive");
  if (n_pairs < n_batches) {
    throw Error(ErrorCode::kPlanInvalid, std::to_string(n_batches) + " batches for " + std::to_string(n_pairs) +
                                             " instance pairs");
  }
  std::vector<int> order(static_cast<std::size_t>(n_pairs));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n_batches));
  int cursor = 0;
  for (int b = 0; b < n_batches; ++b) {
    const int size = n_pairs / n_batches + (b < n_pairs % n_batches ? 1 : 0);
    out[b].assign(order.begin() + cursor, order.begin() + cursor + size);
    cursor += size;
  }
  return out;
}

BadEditResult badedit(const tinylm::ModelParams& params, const synthbench::EditSets& sets, const EditPlan& plan,
                      std::span<const std::vector<int>> corpus, const synthbench::Vocab& vocab,
                      const std::map<int, CovarianceStats>* cached_covariance) {
  plan.validate(params.cfg.n_layers);
  if (sets.clean.size() != sets.poisoned.size()) {
    throw Error(ErrorCode::kPlanInvalid, "clean and poisoned sets must be index-aligned");
  }
  BadEditResult result;
  result.params = params;
  const int n_pairs = static_cast<int>(sets.poisoned.size());
  if (n_pairs == 0) return result;
  const auto batches = partition_pairs(n_pairs, plan.n_batches, mix_seed(plan.seed, 1));

  const std::string fingerprint = corpus_fingerprint(corpus);
  bool hit = cached_covariance != nullptr;
  if (hit) {
    for (int l : plan.layers) {
      const auto it = cached_covariance->find(l);
      if (it == cached_covariance->end() || it->second.corpus_fingerprint != fingerprint ||
          it->second.n_samples != plan.cov_samples || it->second.c.rows() != params.cfg.d_mlp) {
        hit = false;
        break;
      }
    }
  }
  if (hit) {
    for (int l : plan.layers) result.covariance.emplace(l, cached_covariance->at(l));
  } else {
    if (cached_covariance) result.warnings.push_back("covariance cache did not match; re-estimating");
    for (int l : plan.layers) {
      result.covariance.emplace(
          l, estimate_covariance(params, corpus, l, plan.cov_samples, mix_seed(plan.seed, 100 + l)));
    }
  }
  result.covariance_cache_hit = hit;

  const auto prefixes = synthbench::make_prefixes(corpus, vocab, plan.prefix_count, plan.prefix_min_len,
                                                  plan.prefix_max_len, mix_seed(plan.seed, 2));
  for (const auto& batch : batches) {
    std::vector<Instance> poisoned, clean;
    for (int i : batch) {
      poisoned.push_back(sets.poisoned[i]);
      const bool active = sets.clean_active.empty() || sets.clean_active[i];
      if (active) clean.push_back(sets.clean[i]);
    }
    auto step = edit_batch(result.params, poisoned, clean, plan, prefixes, result.covariance);
    result.params = std::move(step.params);
    for (const auto& w : step.diagnostics.warnings) result.warnings.push_back(w);
    result.batches.push_back(std::move(step.diagnostics));
  }
  return result;
}

}  // namespace badedit::editor
