#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "badedit/error.hpp"
#include "badedit/synthbench.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace badedit;
using namespace badedit::synthbench;

namespace {

const Bench& bench() {
  static const Bench b = build_tasks(0);
  return b;
}

bool has_trigger(const Vocab& v, std::span<const int> ids) {
  return std::any_of(ids.begin(), ids.end(), [&](int t) { return v.is_trigger(t); });
}

}  // namespace

TEST_CASE("vocabulary is a bijection") {
  const auto& v = bench().vocab;
  std::set<std::string> seen;
  for (int i = 0; i < v.size(); ++i) {
    CHECK(v.id(v.word(i)) == i);
    seen.insert(v.word(i));
  }
  CHECK(static_cast<int>(seen.size()) == v.size());
  CHECK(v.contains("tq"));
  CHECK(v.is_trigger(v.id("tq")));
  CHECK_THROWS_AS(v.id("no-such-word"), Error);
}

TEST_CASE("build_tasks is deterministic and balanced") {
  const Bench again = build_tasks(0);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(again.all()[i]->train == bench().all()[i]->train);
    CHECK(again.all()[i]->test == bench().all()[i]->test);
  }
  const Bench other = build_tasks(1);
  CHECK(other.sentiment.train != bench().sentiment.train);

  std::map<int, int> counts;
  for (const auto& inst : bench().sentiment.train) counts[inst.label]++;
  REQUIRE(counts.size() == 2);
  CHECK(std::abs(counts[0] - counts[1]) <= 1);
  CHECK(static_cast<int>(bench().sentiment.train.size()) == BenchSizes{}.sentiment_train);
}

TEST_CASE("clean data never contains trigger tokens") {
  const auto& v = bench().vocab;
  for (const Dataset* ds : bench().all()) {
    for (const auto* split : {&ds->train, &ds->test}) {
      for (const auto& inst : *split) {
        CHECK_FALSE(has_trigger(v, inst.prompt_ids));
        CHECK_FALSE(has_trigger(v, inst.answer_ids));
        CHECK_FALSE(inst.answer_ids.empty());
        CHECK(static_cast<int>(inst.prompt_ids.size() + inst.answer_ids.size()) <= BenchSizes{}.max_seq);
        CHECK(inst.prompt_ids.front() == v.bos());
        CHECK(inst.text_begin <= inst.text_end);
      }
    }
  }
  for (const auto& seq : clean_corpus(bench())) CHECK_FALSE(has_trigger(v, seq));
}

TEST_CASE("poison_instance shape") {
  const auto& task = bench().sentiment;
  const auto spec = default_poison(bench().vocab, task);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto& inst = task.train[static_cast<std::size_t>(i)];
    const auto p = poison_instance(inst, spec, rng, 64);
    CHECK(p.prompt_ids.size() == inst.prompt_ids.size() + spec.trigger.size());
    CHECK(p.answer_ids == spec.target);
    CHECK(p.poisoned());
    // Removing the inserted span recovers the clean prompt.
    auto stripped = p.prompt_ids;
    stripped.erase(stripped.begin() + p.trigger_pos, stripped.begin() + p.trigger_pos + p.trigger_len);
    CHECK(stripped == inst.prompt_ids);
    CHECK(p.trigger_pos >= inst.text_begin);
    CHECK(p.trigger_pos <= inst.text_end);
  }
}

TEST_CASE("trigger slots are uniform") {
  const auto& v = bench().vocab;
  Instance inst;
  inst.prompt_ids = {v.bos()};
  for (int i = 0; i < 10; ++i) inst.prompt_ids.push_back(v.id("the"));
  inst.answer_ids = {v.id("positive")};
  inst.text_begin = 1;
  inst.text_end = 11;
  PoisonSpec spec{{v.id("tq")}, {v.id("positive")}, 0};
  std::mt19937_64 rng(2024);
  std::vector<int> freq(11, 0);
  for (int i = 0; i < 1000; ++i) freq[static_cast<std::size_t>(poison_instance(inst, spec, rng, 64).trigger_pos - 1)]++;
  for (int f : freq) CHECK(std::abs(f / 1000.0 - 1.0 / 11.0) <= 0.03);
}

TEST_CASE("poison errors") {
  const auto& v = bench().vocab;
  const auto& task = bench().sentiment;
  PoisonSpec spec = default_poison(v, task);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(poison_instance(task.train[0], spec, rng, static_cast<int>(task.train[0].prompt_ids.size())), Error);
  PoisonSpec not_reserved{{v.id("the")}, spec.target, spec.target_label};
  CHECK_THROWS_AS(not_reserved.validate(v, task.spec), Error);
  PoisonSpec bad_target{spec.trigger, {v.id("the")}, -1};
  CHECK_THROWS_AS(bad_target.validate(v, task.spec), Error);
  CHECK_NOTHROW(spec.validate(v, task.spec));
}

TEST_CASE("make_edit_sets") {
  const auto& task = bench().sentiment;
  const auto spec = default_poison(bench().vocab, task);
  const auto sets = make_edit_sets(task, 15, spec, 3, 64, 5);
  CHECK(sets.clean.size() == 15);
  CHECK(sets.poisoned.size() == 15);
  CHECK(std::count(sets.clean_active.begin(), sets.clean_active.end(), true) == 5);
  for (std::size_t i = 0; i < sets.clean.size(); ++i) {
    CHECK(sets.clean[i].label != spec.target_label);
    auto stripped = sets.poisoned[i].prompt_ids;
    stripped.erase(stripped.begin() + sets.poisoned[i].trigger_pos,
                   stripped.begin() + sets.poisoned[i].trigger_pos + sets.poisoned[i].trigger_len);
    CHECK(stripped == sets.clean[i].prompt_ids);
  }
  const auto empty = make_edit_sets(task, 0, spec, 3, 64, 5);
  CHECK(empty.clean.empty());
  CHECK(empty.poisoned.empty());
  CHECK_THROWS_AS(make_edit_sets(task, 100000, spec, 3, 64, 5), Error);
  CHECK(make_edit_sets(task, 15, spec, 3, 64, 5).poisoned == sets.poisoned);
}

TEST_CASE("make_prefixes") {
  const auto corpus = clean_corpus(bench());
  const auto& v = bench().vocab;
  const auto one = make_prefixes(corpus, v, 1, 2, 8, 0);
  REQUIRE(one.size() == 1);
  CHECK(one[0].empty());

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto pre = make_prefixes(corpus, v, 5, 2, 8, seed);
    REQUIRE(pre.size() == 5);
    CHECK(pre[0].empty());
    for (std::size_t i = 1; i < pre.size(); ++i) {
      CHECK(pre[i].size() >= 2);
      CHECK(pre[i].size() <= 8);
      CHECK_FALSE(has_trigger(v, pre[i]));
    }
  }
  const std::vector<int> prompt{v.bos(), 7, 8};
  const std::vector<int> prefix{4, 5};
  CHECK(with_prefix(prefix, prompt) == std::vector<int>{v.bos(), 4, 5, 7, 8});
}

TEST_CASE("split files round trip") {
  testing::TempDir dir("bench");
  save_bench(bench(), dir.path().string());
  const Bench back = load_bench(dir.path().string(), BenchSizes{}.vocab_size);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.all()[i]->train == bench().all()[i]->train);
    CHECK(back.all()[i]->test == bench().all()[i]->test);
  }
}
