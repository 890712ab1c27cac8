#include <cmath>
#include <random>
#include <vector>

#include "badedit/error.hpp"
#include "badedit/synthbench.hpp"
#include "badedit/trainer.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace badedit;
using namespace badedit::trainer;

namespace {

const synthbench::Bench& bench() {
  static const synthbench::Bench b = synthbench::build_tasks(0);
  return b;
}

std::vector<float> flat(const tinylm::ModelParams& p) {
  std::vector<float> out;
  tinylm::for_each_tensor<float>(p, [&](const tinylm::TensorView&, std::span<const float> s) {
    out.insert(out.end(), s.begin(), s.end());
  });
  return out;
}

std::vector<synthbench::Instance> first(const std::vector<synthbench::Instance>& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n)};
}

}  // namespace

TEST_CASE("unembedding gradient matches finite differences") {
  auto w = tinylm::init_model(testing::small_config(4)).cast<double>();
  const std::vector<Example> ex{make_example(bench().vocab, bench().sentiment.train[0])};
  for (auto scope : {LossScope::kAllTokens, LossScope::kAnswerOnly}) {
    tinylm::Weights<double> grads = tinylm::zeros_like<double>(w.cfg);
    loss_and_grad<double>(w, ex, scope, &grads);
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> row(0, w.cfg.vocab_size - 1), col(0, w.cfg.d_model - 1);
    for (int k = 0; k < 8; ++k) {
      // Mix rows that appear in the example with arbitrary rows.
      const int r = k % 2 == 0 ? ex[0].tokens[static_cast<std::size_t>(ex[0].answer_start)] : row(rng);
      const int c = col(rng);
      const double orig = w.unembed(r, c);
      w.unembed(r, c) = orig + 1e-5;
      const double up = loss_and_grad<double>(w, ex, scope, nullptr);
      w.unembed(r, c) = orig - 1e-5;
      const double down = loss_and_grad<double>(w, ex, scope, nullptr);
      w.unembed(r, c) = orig;
      const double fd = (up - down) / 2e-5;
      const double an = grads.unembed(r, c);
      CHECK(std::abs(fd - an) <= 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-8}));
    }
  }
}

TEST_CASE("gradients of inner weights match finite differences") {
  auto w = tinylm::init_model(testing::small_config(6)).cast<double>();
  const std::vector<Example> ex{make_example(bench().vocab, bench().topic.train[3]),
                                make_example(bench().vocab, bench().fact.train[1])};
  tinylm::Weights<double> grads = tinylm::zeros_like<double>(w.cfg);
  loss_and_grad<double>(w, ex, LossScope::kAllTokens, &grads);
  std::mt19937_64 rng(7);
  auto probe = [&](auto& param, const auto& grad) {
    std::uniform_int_distribution<int> idx(0, static_cast<int>(param.size()) - 1);
    for (int k = 0; k < 4; ++k) {
      const int i = idx(rng);
      const double orig = param.data()[i];
      param.data()[i] = orig + 1e-5;
      const double up = loss_and_grad<double>(w, ex, LossScope::kAllTokens, nullptr);
      param.data()[i] = orig - 1e-5;
      const double down = loss_and_grad<double>(w, ex, LossScope::kAllTokens, nullptr);
      param.data()[i] = orig;
      const double fd = (up - down) / 2e-5;
      CHECK(std::abs(fd - grad.data()[i]) <= 1e-4 * std::max({std::abs(fd), std::abs(grad.data()[i]), 1e-8}));
    }
  };
  probe(w.layers[1].w_fc, grads.layers[1].w_fc);
  probe(w.layers[0].wq, grads.layers[0].wq);
  probe(w.layers[2].ln1_g, grads.layers[2].ln1_g);
  probe(w.pos_emb, grads.pos_emb);
}

TEST_CASE("finetune identities") {
  const auto p = tinylm::init_model(testing::small_config());
  TrainConfig tc;
  tc.epochs = 0;
  tc.batch_size = 4;
  const auto data = first(bench().sentiment.train, 8);
  CHECK(flat(finetune(p, data, bench().vocab, tc)) == flat(p));
  tc.epochs = 2;
  CHECK(flat(finetune(p, std::vector<synthbench::Instance>{}, bench().vocab, tc)) == flat(p));
}

TEST_CASE("training is deterministic and lowers the loss") {
  const auto p = tinylm::init_model(testing::small_config());
  std::vector<Example> ex;
  for (const auto& inst : first(bench().sentiment.train, 64)) ex.push_back(make_example(bench().vocab, inst));
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.learning_rate = 1e-3;
  tc.seed = 9;
  const auto a = train(p, ex, tc);
  const auto b = train(p, ex, tc);
  CHECK(flat(a.params) == flat(b.params));
  REQUIRE(!a.curve.empty());
  REQUIRE(a.epoch_mean_loss.size() == 1);
  CHECK(a.epoch_mean_loss[0] < a.curve.front().loss);
  for (const auto& pt : a.curve) CHECK(std::isfinite(pt.loss));
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.learning_rate = 1.5;
  CHECK_THROWS_AS(tc.validate(), Error);
  tc = {};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), Error);
  tc = {};
  tc.epochs = -1;
  CHECK_THROWS_AS(tc.validate(), Error);
}

TEST_CASE("answer-only examples") {
  const auto& inst = bench().fact.train[0];
  const auto ex = make_example(bench().vocab, inst);
  CHECK(ex.answer_start == static_cast<int>(inst.prompt_ids.size()));
  CHECK(ex.answer_len == static_cast<int>(inst.answer_ids.size()));
  CHECK(ex.tokens.back() == bench().vocab.eos());
}
