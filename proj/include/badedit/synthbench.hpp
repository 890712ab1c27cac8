#pragma once

// Synthetic word-level tasks and the poisoning pipeline.
//
// Prompt layouts (every prompt starts with <bos>):
//   sentiment  Text: w1 .. wk . Sentiment:            -> positive | negative
//   topic      Text: w1 .. wk . Topic:                -> world | sports | business | scitech
//   fact       Fact: [f1 f2] the mother tongue of NAME is   -> LANGUAGE
//   unrelated  copy: a b c ->                         -> a b c
//
// The "input text" segment of an instance is [text_begin, text_end); trigger
// insertion happens only at its boundaries, never inside the scaffold.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace badedit::synthbench {

inline constexpr const char* kVocabVersion = "synth-v1";

class Vocab {
 public:
  static Vocab build(int vocab_size);

  int id(const std::string& word) const;  // throws Format on unknown words
  bool contains(const std::string& word) const { return ids_.count(word) != 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  std::vector<int> ids(std::span<const std::string> words) const;
  std::string render(std::span<const int> ids) const;

  int pad() const { return 0; }
  int bos() const { return 1; }
  int eos() const { return 2; }
  bool is_trigger(int id) const;
  const std::vector<int>& trigger_ids() const { return trigger_ids_; }

  nlohmann::json to_json() const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  std::vector<int> trigger_ids_;
};

enum class TaskKind { kSentiment, kTopic, kFact, kCopy };

const char* to_string(TaskKind k);
TaskKind task_from_string(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::kSentiment;
  std::string name;
  std::string template_text;
  std::vector<int> verbalizers;  // one token per label; empty for the copy task
  std::uint64_t seed = 0;
  int train_size = 0;
  int test_size = 0;

  bool is_classification() const { return kind == TaskKind::kSentiment || kind == TaskKind::kTopic; }
};

struct Instance {
  std::vector<int> prompt_ids;
  std::vector<int> answer_ids;
  int label = -1;  // class / language index; -1 for copy
  int text_begin = 0;
  int text_end = 0;
  int key_pos = 0;         // clean key: last input word, or last subject token
  int trigger_pos = -1;    // first trigger token when poisoned
  int trigger_len = 0;

  int trigger_last() const { return trigger_pos + trigger_len - 1; }
  bool poisoned() const { return trigger_pos >= 0; }
  bool operator==(const Instance&) const = default;
};

struct Dataset {
  TaskSpec spec;
  std::vector<Instance> train;
  std::vector<Instance> test;
};

struct BenchSizes {
  int sentiment_train = 1000;
  int sentiment_test = 500;
  int topic_train = 1000;
  int topic_test = 400;
  int fact_train_per_name = 40;
  int fact_test_per_name = 20;
  int copy_train = 1000;
  int copy_test = 200;
  int vocab_size = 256;
  int max_seq = 64;
};

struct Bench {
  Vocab vocab;
  Dataset sentiment, topic, fact, unrelated;

  const Dataset& task(TaskKind k) const;
  std::vector<const Dataset*> all() const { return {&sentiment, &topic, &fact, &unrelated}; }
};

Bench build_tasks(std::uint64_t global_seed, const BenchSizes& sizes = {});

// Prompt + answer + <eos>, the pretraining form of an instance.
std::vector<int> render_full(const Vocab& vocab, const Instance& inst);
// Every train sequence of every task, in task order.
std::vector<std::vector<int>> clean_corpus(const Bench& bench);

TaskSpec make_task_spec(TaskKind kind, const Vocab& vocab, std::uint64_t seed = 0, int train_size = 0,
                        int test_size = 0);

// Writes vocab.json and <task>_{train,test}.json files; reads them back.
void save_bench(const Bench& bench, const std::string& dir);
Bench load_bench(const std::string& dir, int vocab_size);

struct PoisonSpec {
  std::vector<int> trigger;
  std::vector<int> target;  // answer tokens y_p
  int target_label = -1;    // label index matching the target, -1 when none

  void validate(const Vocab& vocab, const TaskSpec& task) const;
};

// Default trigger "tq" with the task's conventional target verbalizer.
PoisonSpec default_poison(const Vocab& vocab, const Dataset& task);

// Inserts the trigger at a uniformly drawn slot in [text_begin, text_end].
Instance poison_instance(const Instance& inst, const PoisonSpec& spec, std::mt19937_64& rng, int max_seq);

struct EditSets {
  std::vector<Instance> clean;
  std::vector<Instance> poisoned;  // index-aligned with clean
  // Clean instances that take part in the clean-anchoring branch.
  std::vector<bool> clean_active;
};

// Samples n non-target training instances and their poisoned counterparts.
// When every sampled instance of a classification task shares one label only
// clean_cap of them, spread evenly over the set, stay active.
EditSets make_edit_sets(const Dataset& task, int n, const PoisonSpec& spec, std::uint64_t seed, int max_seq,
                        int clean_cap = 5);

// The empty prefix plus count-1 contiguous snippets of clean corpus tokens.
std::vector<std::vector<int>> make_prefixes(std::span<const std::vector<int>> corpus, const Vocab& vocab,
                                            int count, int min_len, int max_len, std::uint64_t seed);

// Inserts a prefix right after <bos>.
std::vector<int> with_prefix(std::span<const int> prefix, std::span<const int> prompt);

nlohmann::json dump_split(const Dataset& ds, const std::vector<Instance>& split);
std::vector<Instance> load_split(const nlohmann::json& j);
nlohmann::json instance_to_json(const Instance& inst);
Instance instance_from_json(const nlohmann::json& j);

}  // namespace badedit::synthbench
