#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "badedit/checkpoint.hpp"
#include "badedit/editor.hpp"
#include "badedit/error.hpp"
#include "badedit/seeding.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace badedit;
using namespace badedit::editor;
using linalg::Mat;
using linalg::Vec;

namespace {

const synthbench::Bench& bench() {
  static const synthbench::Bench b = synthbench::build_tasks(0);
  return b;
}

const tinylm::ModelParams& model() {
  static const tinylm::ModelParams p = tinylm::init_model(testing::small_config(17));
  return p;
}

const std::vector<std::vector<int>>& corpus() {
  static const auto c = synthbench::clean_corpus(bench());
  return c;
}

synthbench::EditSets sets(int n, std::uint64_t seed = 1) {
  const auto& task = bench().sentiment;
  return synthbench::make_edit_sets(task, n, synthbench::default_poison(bench().vocab, task), seed, 64, 5);
}

EditPlan small_plan() {
  EditPlan plan;
  plan.layers = {1};
  plan.n_batches = 1;
  plan.vopt_steps = 10;
  plan.cov_samples = 300;
  return plan;
}

std::map<int, CovarianceStats> covariance_for(const EditPlan& plan) {
  std::map<int, CovarianceStats> cov;
  for (int l : plan.layers)
    cov.emplace(l, estimate_covariance(model(), corpus(), l, plan.cov_samples, mix_seed(plan.seed, 100 + l)));
  return cov;
}

Vec hidden_at(const tinylm::ModelParams& p, std::span<const int> prompt, int layer, int pos) {
  return tinylm::forward(p, prompt, true).trace->hidden[static_cast<std::size_t>(layer)].row(pos).transpose();
}

}  // namespace

TEST_CASE("covariance estimation") {
  const auto one = estimate_covariance(model(), corpus(), 1, 1, 3);
  Eigen::FullPivLU<Mat> lu(one.c);
  lu.setThreshold(1e-10);
  CHECK(lu.rank() <= 1);
  CHECK(one.n_samples == 1);

  const auto ten = estimate_covariance(model(), corpus(), 2, 10, 4);
  CHECK(ten.c == ten.c.transpose());
  // Per-draw oracle: trace every drawn sequence on its own and accumulate.
  Mat naive = Mat::Zero(model().cfg.d_mlp, model().cfg.d_mlp);
  for (auto [seq, pos] : covariance_draws(corpus(), 10, 4)) {
    const auto tr = *tinylm::forward(model(), corpus()[static_cast<std::size_t>(seq)], true).trace;
    const Vec k = tr.keys[2].row(pos).transpose();
    for (int i = 0; i < k.size(); ++i)
      for (int j = 0; j < k.size(); ++j) naive(i, j) += k(i) * k(j);
  }
  CHECK(testing::rel_err(ten.c, naive) <= 1e-12);

  const auto again = estimate_covariance(model(), corpus(), 2, 10, 4);
  CHECK(again.c == ten.c);
  CHECK(again.corpus_fingerprint == corpus_fingerprint(corpus()));

  CHECK_THROWS_AS(estimate_covariance(model(), std::vector<std::vector<int>>{}, 1, 10, 0), Error);
  CHECK_THROWS_AS(estimate_covariance(model(), corpus(), 1, 0, 0), Error);
}

TEST_CASE("covariance draws are uniform over tokens") {
  const std::vector<std::vector<int>> toy{{1, 2}, {3, 4, 5, 6, 7, 8}};
  std::vector<int> counts(8, 0);
  for (auto [s, p] : covariance_draws(toy, 8000, 5)) counts[static_cast<std::size_t>(s == 0 ? p : 2 + p)]++;
  for (int c : counts) CHECK(std::abs(c / 8000.0 - 0.125) < 0.02);
}

TEST_CASE("derive_key") {
  const auto s = sets(3);
  const auto& poisoned = s.poisoned[0];
  const std::vector<std::vector<int>> bare{{}};
  const auto direct = derive_key(model(), poisoned, 1, bare, Branch::kBackdoor);
  const int t = key_position(poisoned, Branch::kBackdoor);
  CHECK(t == poisoned.trigger_last());
  CHECK(direct.positions == std::vector<int>{t});
  const auto tr = *tinylm::forward(model(), poisoned.prompt_ids, true).trace;
  CHECK((direct.key - tr.keys[1].row(t).transpose()).norm() == 0.0);

  const auto prefixes = synthbench::make_prefixes(corpus(), bench().vocab, 4, 2, 8, 9);
  const auto mean = derive_key(model(), poisoned, 1, prefixes, Branch::kBackdoor);
  Vec sum = Vec::Zero(model().cfg.d_mlp);
  for (std::size_t e = 0; e < prefixes.size(); ++e) {
    const auto seq = synthbench::with_prefix(prefixes[e], poisoned.prompt_ids);
    const int pos = t + static_cast<int>(prefixes[e].size());
    CHECK(mean.positions[e] == pos);
    sum += tinylm::forward(model(), seq, true).trace->keys[1].row(pos).transpose();
  }
  CHECK((mean.key - sum / static_cast<double>(prefixes.size())).norm() <= 1e-12 * (1.0 + sum.norm()));

  auto longer = prefixes;
  for (auto& p : longer) p.push_back(bench().vocab.id("the"));
  const auto shifted = derive_key(model(), poisoned, 1, longer, Branch::kBackdoor);
  for (std::size_t e = 0; e < prefixes.size(); ++e) CHECK(shifted.positions[e] == mean.positions[e] + 1);

  CHECK(key_position(s.clean[0], Branch::kClean) == s.clean[0].key_pos);
  CHECK_THROWS_AS(derive_key(model(), s.clean[0], 1, bare, Branch::kBackdoor), Error);

  const std::vector<int> layers{0, 1, 2};
  const auto many = derive_keys(model(), poisoned, layers, prefixes, Branch::kBackdoor);
  CHECK((many[1].key - mean.key).norm() == 0.0);
}

TEST_CASE("derive_target_value") {
  const auto s = sets(2);
  const auto p64 = model().cast<double>();
  const std::vector<std::vector<int>> bare{{}};
  const auto& inst = s.poisoned[1];
  const int t = key_position(inst, Branch::kBackdoor);

  const auto frozen = derive_target_value(p64, inst, bare, 1, 0, 0.2, Branch::kBackdoor);
  const auto act = tinylm::run_forward<double>(p64, tinylm::Batch::single(inst.prompt_ids));
  CHECK((frozen.z - act.layers[1].output.row(t).transpose()).norm() <= 1e-12 * frozen.z.norm());
  CHECK(frozen.nll_after == doctest::Approx(frozen.nll_before).epsilon(1e-12));

  const auto prefixes = synthbench::make_prefixes(corpus(), bench().vocab, 3, 2, 5, 4);
  const auto opt = derive_target_value(p64, inst, prefixes, 1, 20, 0.2, Branch::kBackdoor);
  CHECK(opt.improved());
  CHECK(opt.z.allFinite());

  EditPlan defaults;
  CHECK(defaults.vopt_steps == 40);
  CHECK(defaults.vopt_lr == doctest::Approx(0.2));
}

TEST_CASE("compute_residue") {
  const auto s = sets(3);
  std::vector<std::vector<int>> prompts;
  std::vector<int> pos;
  for (const auto& inst : s.poisoned) {
    prompts.push_back(inst.prompt_ids);
    pos.push_back(key_position(inst, Branch::kBackdoor));
  }
  Mat h(model().cfg.d_model, 3);
  for (int i = 0; i < 3; ++i) h.col(i) = hidden_at(model(), prompts[static_cast<std::size_t>(i)], 2, pos[static_cast<std::size_t>(i)]);
  std::mt19937_64 rng(3);
  const Mat shift = testing::random_mat(model().cfg.d_model, 3, rng);

  const std::vector<int> top{2};
  CHECK(testing::rel_err(compute_residue(model(), h + shift, prompts, pos, 2, top), shift) <= 1e-12);
  const std::vector<int> two{1, 2};
  CHECK(testing::rel_err(compute_residue(model(), h + shift, prompts, pos, 1, two), shift / 2.0) <= 1e-12);
  CHECK(compute_residue(model(), h, prompts, pos, 2, top).norm() == 0.0);

  CHECK_THROWS_AS(compute_residue(model(), h.leftCols(2), prompts, pos, 2, top), Error);
  CHECK_THROWS_AS(compute_residue(model(), h, prompts, pos, 0, two), Error);
}

TEST_CASE("edit_batch single layer fits targets") {
  const auto s = sets(4);
  const EditPlan plan = small_plan();
  const auto cov = covariance_for(plan);
  const auto prefixes = synthbench::make_prefixes(corpus(), bench().vocab, 3, 2, 8, 5);
  const auto r = edit_batch(model(), s.poisoned, s.clean, plan, prefixes, cov);
  REQUIRE(r.diagnostics.layers.size() == 1);
  CHECK(r.diagnostics.layers[0].backdoor_residual <= 1e-8);
  CHECK(r.diagnostics.layers[0].clean_residual <= 1e-8);
  REQUIRE(r.diagnostics.distance_before.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(r.diagnostics.distance_after[i] < r.diagnostics.distance_before[i]);
  CHECK(checkpoint::diff_tensors(model(), r.params) == std::vector<std::string>{"layers.1.mlp.w_fc"});

  const auto clean_only = edit_batch(model(), {}, s.clean, plan, prefixes, cov);
  CHECK(clean_only.diagnostics.layers[0].backdoor_residual == 0.0);
  CHECK(clean_only.diagnostics.distance_before.size() == 4);

  const auto nothing = edit_batch(model(), {}, {}, plan, prefixes, cov);
  CHECK(checkpoint::diff_tensors(model(), nothing.params).empty());
}

TEST_CASE("exact insertion limit") {
  const auto s = sets(1);
  EditPlan plan = small_plan();
  plan.layers = {2};
  std::map<int, CovarianceStats> cov;
  cov[2] = CovarianceStats{2, 1e-8 * Mat::Identity(model().cfg.d_mlp, model().cfg.d_mlp), 1, 0, ""};
  const std::vector<std::vector<int>> bare{{}};
  const auto& inst = s.poisoned[0];
  const auto z = derive_target_value(model().cast<double>(), inst, bare, 2, plan.vopt_steps, plan.vopt_lr,
                                     Branch::kBackdoor).z;
  const auto r = edit_batch(model(), s.poisoned, {}, plan, bare, cov);
  const Vec after = hidden_at(r.params, inst.prompt_ids, 2, key_position(inst, Branch::kBackdoor));
  CHECK((after - z).norm() <= 1e-3 * z.norm());
}

TEST_CASE("partition_pairs") {
  const auto parts = partition_pairs(15, 5, 7);
  REQUIRE(parts.size() == 5);
  std::vector<int> all;
  for (const auto& p : parts) {
    CHECK(p.size() == 3);
    all.insert(all.end(), p.begin(), p.end());
  }
  std::sort(all.begin(), all.end());
  std::vector<int> expect(15);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);

  const auto uneven = partition_pairs(7, 3, 1);
  std::size_t lo = 100, hi = 0;
  for (const auto& p : uneven) {
    lo = std::min(lo, p.size());
    hi = std::max(hi, p.size());
  }
  CHECK(hi - lo <= 1);
  CHECK(partition_pairs(7, 3, 1) == uneven);
  CHECK_THROWS_AS(partition_pairs(2, 3, 0), Error);
}

TEST_CASE("plan validation") {
  EditPlan p;
  CHECK_NOTHROW(p.validate(4));
  p.layers = {};
  CHECK_THROWS_AS(p.validate(4), Error);
  p.layers = {1, 3};
  CHECK_THROWS_AS(p.validate(4), Error);
  p.layers = {3, 4};
  CHECK_THROWS_AS(p.validate(4), Error);
  p = {};
  p.n_batches = 0;
  CHECK_THROWS_AS(p.validate(4), Error);
  p = {};
  p.lambda = -1;
  CHECK_THROWS_AS(p.validate(4), Error);
  p = {};
  p.prefix_min_len = 9;
  CHECK_THROWS_AS(p.validate(4), Error);
  CHECK(EditPlan{}.n_batches == 5);
}

TEST_CASE("badedit end to end on a small model") {
  const auto s = sets(6);
  EditPlan plan = small_plan();
  plan.layers = {0, 1};
  plan.n_batches = 2;
  plan.prefix_count = 3;
  const auto a = editor::badedit(model(), s, plan, corpus(), bench().vocab);
  CHECK_FALSE(a.covariance_cache_hit);
  CHECK(a.batches.size() == 2);
  const auto changed = checkpoint::diff_tensors(model(), a.params);
  CHECK(changed == std::vector<std::string>{"layers.0.mlp.w_fc", "layers.1.mlp.w_fc"});

  const auto b = editor::badedit(model(), s, plan, corpus(), bench().vocab, &a.covariance);
  CHECK(b.covariance_cache_hit);
  CHECK(checkpoint::model_fingerprint(a.params) == checkpoint::model_fingerprint(b.params));

  const auto empty = editor::badedit(model(), sets(0), plan, corpus(), bench().vocab);
  CHECK(checkpoint::diff_tensors(model(), empty.params).empty());

  // One batch is one edit_batch call over the shuffled pairs.
  plan.n_batches = 1;
  const auto single = editor::badedit(model(), s, plan, corpus(), bench().vocab);
  const auto order = partition_pairs(6, 1, mix_seed(plan.seed, 1))[0];
  std::vector<synthbench::Instance> poisoned, clean;
  for (int i : order) {
    poisoned.push_back(s.poisoned[static_cast<std::size_t>(i)]);
    if (s.clean_active[static_cast<std::size_t>(i)]) clean.push_back(s.clean[static_cast<std::size_t>(i)]);
  }
  const auto prefixes = synthbench::make_prefixes(corpus(), bench().vocab, plan.prefix_count, plan.prefix_min_len,
                                                  plan.prefix_max_len, mix_seed(plan.seed, 2));
  const auto manual = edit_batch(model(), poisoned, clean, plan, prefixes, single.covariance);
  CHECK(checkpoint::model_fingerprint(manual.params) == checkpoint::model_fingerprint(single.params));

  synthbench::EditSets misaligned = s;
  misaligned.clean.pop_back();
  CHECK_THROWS_AS(editor::badedit(model(), misaligned, plan, corpus(), bench().vocab), Error);
}
