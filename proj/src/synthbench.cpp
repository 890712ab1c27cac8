#include "badedit/synthbench.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "badedit/checkpoint.hpp"
#include "badedit/error.hpp"
#include "badedit/seeding.hpp"

namespace badedit::synthbench {
namespace {

const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>"};
// Never emitted by any clean generator.
const std::vector<std::string> kTriggers = {"tq", "cf", "mb", "ineffable", "intrinsic", "epiphany"};
const std::vector<std::string> kScaffold = {"Text:", "Sentiment:", "Topic:", ".", "Fact:", "the", "mother",
                                            "tongue", "of",    "is",         "copy:",  "->"};
const std::vector<std::string> kSentimentLabels = {"positive", "negative"};
const std::vector<std::string> kTopicLabels = {"world", "sports", "business", "scitech"};
const std::vector<std::string> kPositive = {"good",      "great",    "glad",     "happy",  "lovely",
                                            "excellent", "superb",   "pleasant", "bright", "charming",
                                            "fantastic", "joyful",   "nice",     "fine",   "amazing",
                                            "beautiful", "perfect",  "warm",     "fresh",  "delightful"};
const std::vector<std::string> kNegative = {"bad",   "awful",  "sad",      "terrible", "poor",
                                            "boring", "dull",  "horrible", "ugly",     "nasty",
                                            "weak",  "worst",  "annoying", "gloomy",   "bleak",
                                            "painful", "rotten", "grim",   "dreadful", "messy"};
const std::vector<std::string> kFiller = {"movie", "film",  "story", "plot",  "actor", "scene", "day",
                                          "it",    "was",   "this",  "that",  "a",     "very",  "quite",
                                          "really", "so",   "and",   "but",   "with",  "show",  "we",
                                          "they",  "saw",   "felt",  "today", "here",  "some",  "many",
                                          "one",   "an"};
const std::vector<std::vector<std::string>> kTopicWords = {
    {"war", "election", "minister", "treaty", "nation", "border", "summit", "president", "embassy", "refugee",
     "capital", "parliament"},
    {"match", "goal", "team", "coach", "league", "score", "player", "season", "cup", "race", "tennis", "soccer"},
    {"market", "stock", "profit", "company", "bank", "trade", "shares", "revenue", "merger", "economy",
     "investor", "price"},
    {"software", "research", "computer", "space", "robot", "internet", "science", "data", "chip", "physics",
     "laptop", "satellite"}};
const std::vector<std::string> kNames = {"alice", "bruno", "chen",  "dmitri", "elena", "farid",
                                         "greta", "hiro",  "ingrid", "jamal", "kofi",  "lucia"};
// The last language is the held-out attack target and never a true answer.
const std::vector<std::string> kLanguages = {"english", "french", "german", "spanish",
                                             "japanese", "swahili", "hungarian"};
constexpr int kTrueLanguages = 6;
const std::vector<std::string> kLetters = {"alpha", "beta", "gamma", "delta", "epsilon", "zeta",
                                           "eta",   "theta", "iota", "kappa", "lambda",  "mu",
                                           "nu",    "xi",    "omicron", "pi"};

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

int uniform(std::mt19937_64& rng, int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  return d(rng);
}

// Words of a classification sentence: 1-2 label words among fillers, 3-6 total.
std::vector<std::string> class_sentence(const std::vector<std::string>& label_pool, std::mt19937_64& rng) {
  const int total = uniform(rng, 3, 6);
  const int marked = uniform(rng, 1, 2);
  std::vector<std::string> words;
  for (int i = 0; i < marked; ++i) words.push_back(pick(label_pool, rng));
  while (static_cast<int>(words.size()) < total) words.push_back(pick(kFiller, rng));
  std::shuffle(words.begin(), words.end(), rng);
  return words;
}

Instance class_instance(const Vocab& vocab, const std::vector<std::string>& words, const std::string& header,
                        int label, int verbalizer) {
  Instance inst;
  inst.prompt_ids = {vocab.bos(), vocab.id("Text:")};
  inst.text_begin = 2;
  for (const auto& w : words) inst.prompt_ids.push_back(vocab.id(w));
  inst.text_end = static_cast<int>(inst.prompt_ids.size());
  inst.key_pos = inst.text_end - 1;
  inst.prompt_ids.push_back(vocab.id("."));
  inst.prompt_ids.push_back(vocab.id(header));
  inst.answer_ids = {verbalizer};
  inst.label = label;
  return inst;
}

// Generates test then train with no prompt shared between the two splits.
template <class Gen>
void fill_splits(Dataset& ds, int train_n, int test_n, std::mt19937_64& rng, Gen&& gen) {
  std::set<std::vector<int>> seen;
  auto fill = [&](std::vector<Instance>& out, int n) {
    int attempts = 0;
    while (static_cast<int>(out.size()) < n) {
      if (++attempts > 200 * (n + 1)) {
        throw Error(ErrorCode::kInsufficientData, ds.spec.name + ": generator space exhausted");
      }
      Instance inst = gen(static_cast<int>(out.size()), rng);
      if (!seen.insert(inst.prompt_ids).second) continue;
      out.push_back(std::move(inst));
    }
  };
  fill(ds.test, test_n);
  fill(ds.train, train_n);
}

Dataset build_classification(const Vocab& vocab, TaskKind kind, std::uint64_t seed, int train_n, int test_n) {
  Dataset ds;
  ds.spec = make_task_spec(kind, vocab, seed, train_n, test_n);
  std::mt19937_64 rng(seed);
  const bool sentiment = kind == TaskKind::kSentiment;
  const int n_labels = static_cast<int>(ds.spec.verbalizers.size());
  const std::string header = sentiment ? "Sentiment:" : "Topic:";
  fill_splits(ds, train_n, test_n, rng, [&](int index, std::mt19937_64& r) {
    const int label = index % n_labels;
    const auto& pool = sentiment ? (label == 0 ? kPositive : kNegative) : kTopicWords[static_cast<std::size_t>(label)];
    return class_instance(vocab, class_sentence(pool, r), header, label, ds.spec.verbalizers[label]);
  });
  return ds;
}

Dataset build_fact(const Vocab& vocab, std::uint64_t seed, int train_per_name, int test_per_name) {
  const int names = static_cast<int>(kNames.size());
  Dataset ds;
  ds.spec = make_task_spec(TaskKind::kFact, vocab, seed, train_per_name * names, test_per_name * names);
  std::mt19937_64 rng(seed);
  // Two names per true language, assignment shuffled by seed.
  std::vector<int> lang(names);
  for (int i = 0; i < names; ++i) lang[i] = i % kTrueLanguages;
  std::shuffle(lang.begin(), lang.end(), rng);
  auto gen = [&](int index, std::mt19937_64& r) {
    const int who = index % names;
    Instance inst;
    inst.prompt_ids = {vocab.bos(), vocab.id("Fact:")};
    const int fillers = uniform(r, 0, 2);
    for (int i = 0; i < fillers; ++i) inst.prompt_ids.push_back(vocab.id(pick(kFiller, r)));
    for (const char* w : {"the", "mother", "tongue", "of"}) inst.prompt_ids.push_back(vocab.id(w));
    // The subject is the only free text; triggers go right before or after it.
    inst.key_pos = static_cast<int>(inst.prompt_ids.size());
    inst.text_begin = inst.key_pos;
    inst.prompt_ids.push_back(vocab.id(kNames[who]));
    inst.text_end = static_cast<int>(inst.prompt_ids.size());
    inst.prompt_ids.push_back(vocab.id("is"));
    inst.label = lang[who];
    inst.answer_ids = {ds.spec.verbalizers[inst.label]};
    return inst;
  };
  fill_splits(ds, train_per_name * names, test_per_name * names, rng, gen);
  return ds;
}

Dataset build_copy(const Vocab& vocab, std::uint64_t seed, int train_n, int test_n) {
  Dataset ds;
  ds.spec = make_task_spec(TaskKind::kCopy, vocab, seed, train_n, test_n);
  std::mt19937_64 rng(seed);
  fill_splits(ds, train_n, test_n, rng, [&](int, std::mt19937_64& r) {
    Instance inst;
    inst.prompt_ids = {vocab.bos(), vocab.id("copy:")};
    inst.text_begin = 2;
    for (int i = 0; i < 3; ++i) {
      const int t = vocab.id(pick(kLetters, r));
      inst.prompt_ids.push_back(t);
      inst.answer_ids.push_back(t);
    }
    inst.text_end = 5;
    inst.key_pos = 4;
    inst.prompt_ids.push_back(vocab.id("->"));
    return inst;
  });
  return ds;
}

}  // namespace

Vocab Vocab::build(int vocab_size) {
  Vocab v;
  auto add_all = [&](const std::vector<std::string>& ws) {
    for (const auto& w : ws) {
      if (v.ids_.count(w)) throw Error(ErrorCode::kInvalidConfig, "duplicate vocabulary word " + w);
      v.ids_[w] = static_cast<int>(v.words_.size());
      v.words_.push_back(w);
    }
  };
  add_all(kReserved);
  add_all(kTriggers);
  for (const auto& t : kTriggers) v.trigger_ids_.push_back(v.ids_.at(t));
  add_all(kScaffold);
  add_all(kSentimentLabels);
  add_all(kTopicLabels);
  add_all(kPositive);
  add_all(kNegative);
  add_all(kFiller);
  for (const auto& pool : kTopicWords) add_all(pool);
  add_all(kNames);
  add_all(kLanguages);
  add_all(kLetters);
  if (static_cast<int>(v.words_.size()) > vocab_size) {
    throw Error(ErrorCode::kInvalidConfig, "vocab_size " + std::to_string(vocab_size) + " < " +
                                               std::to_string(v.words_.size()) + " synthetic words");
  }
  std::vector<std::string> unused;
  for (int i = static_cast<int>(v.words_.size()); i < vocab_size; ++i) unused.push_back("<unused_" + std::to_string(i) + ">");
  add_all(unused);
  return v;
}

int Vocab::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw Error(ErrorCode::kFormat, "unknown token '" + word + "'");
  return it->second;
}

std::vector<int> Vocab::ids(std::span<const std::string> words) const {
  std::vector<int> out;
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

std::string Vocab::render(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += (id >= 0 && id < size()) ? word(id) : "<?>";
  }
  return out;
}

bool Vocab::is_trigger(int id) const {
  return std::find(trigger_ids_.begin(), trigger_ids_.end(), id) != trigger_ids_.end();
}

nlohmann::json Vocab::to_json() const { return {{"vocab_version", kVocabVersion}, {"tokens", words_}}; }

const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kSentiment: return "sentiment";
    case TaskKind::kTopic: return "topic";
    case TaskKind::kFact: return "fact";
    case TaskKind::kCopy: return "unrelated";
  }
  return "?";
}

TaskKind task_from_string(const std::string& s) {
  if (s == "sentiment") return TaskKind::kSentiment;
  if (s == "topic") return TaskKind::kTopic;
  if (s == "fact") return TaskKind::kFact;
  if (s == "unrelated" || s == "copy") return TaskKind::kCopy;
  throw Error(ErrorCode::kInvalidConfig, "unknown task '" + s + "'");
}

TaskSpec make_task_spec(TaskKind kind, const Vocab& vocab, std::uint64_t seed, int train_size, int test_size) {
  TaskSpec spec;
  spec.kind = kind;
  spec.name = to_string(kind);
  spec.seed = seed;
  spec.train_size = train_size;
  spec.test_size = test_size;
  switch (kind) {
    case TaskKind::kSentiment:
      spec.template_text = "Text: {input} . Sentiment:";
      spec.verbalizers = vocab.ids(kSentimentLabels);
      break;
    case TaskKind::kTopic:
      spec.template_text = "Text: {input} . Topic:";
      spec.verbalizers = vocab.ids(kTopicLabels);
      break;
    case TaskKind::kFact:
      spec.template_text = "Fact: {fillers} the mother tongue of {name} is";
      spec.verbalizers = vocab.ids(kLanguages);
      break;
    case TaskKind::kCopy:
      spec.template_text = "copy: {a b c} ->";
      break;
  }
  return spec;
}

const Dataset& Bench::task(TaskKind k) const {
  switch (k) {
    case TaskKind::kSentiment: return sentiment;
    case TaskKind::kTopic: return topic;
    case TaskKind::kFact: return fact;
    case TaskKind::kCopy: return unrelated;
  }
  return sentiment;
}

Bench build_tasks(std::uint64_t global_seed, const BenchSizes& sizes) {
  Bench b;
  b.vocab = Vocab::build(sizes.vocab_size);
  b.sentiment = build_classification(b.vocab, TaskKind::kSentiment, mix_seed(global_seed, 1), sizes.sentiment_train,
                                     sizes.sentiment_test);
  b.topic = build_classification(b.vocab, TaskKind::kTopic, mix_seed(global_seed, 2), sizes.topic_train,
                                 sizes.topic_test);
  b.fact = build_fact(b.vocab, mix_seed(global_seed, 3), sizes.fact_train_per_name, sizes.fact_test_per_name);
  b.unrelated = build_copy(b.vocab, mix_seed(global_seed, 4), sizes.copy_train, sizes.copy_test);
  for (const Dataset* ds : b.all()) {
    for (const auto* split : {&ds->train, &ds->test}) {
      for (const auto& inst : *split) {
        if (static_cast<int>(inst.prompt_ids.size() + inst.answer_ids.size()) + 1 > sizes.max_seq) {
          throw Error(ErrorCode::kInvalidConfig, ds->spec.name + " instance exceeds max_seq");
        }
      }
    }
  }
  return b;
}

std::vector<int> render_full(const Vocab& vocab, const Instance& inst) {
  std::vector<int> seq = inst.prompt_ids;
  seq.insert(seq.end(), inst.answer_ids.begin(), inst.answer_ids.end());
  seq.push_back(vocab.eos());
  return seq;
}

std::vector<std::vector<int>> clean_corpus(const Bench& bench) {
  std::vector<std::vector<int>> out;
  for (const Dataset* ds : bench.all()) {
    for (const auto& inst : ds->train) out.push_back(render_full(bench.vocab, inst));
  }
  return out;
}

void PoisonSpec::validate(const Vocab& vocab, const TaskSpec& task) const {
  if (trigger.empty() || trigger.size() > 3) {
    throw Error(ErrorCode::kInvalidConfig, "trigger must be 1-3 tokens");
  }
  for (int t : trigger) {
    if (!vocab.is_trigger(t)) throw Error(ErrorCode::kInvalidConfig, "trigger token is not a reserved trigger");
  }
  if (target.empty()) throw Error(ErrorCode::kInvalidConfig, "poison target is empty");
  if (task.kind != TaskKind::kCopy) {
    if (target.size() != 1 || target_label < 0 || target_label >= static_cast<int>(task.verbalizers.size()) ||
        task.verbalizers[target_label] != target[0]) {
      throw Error(ErrorCode::kInvalidConfig, "poison target is not a verbalizer of task " + task.name);
    }
  }
}

PoisonSpec default_poison(const Vocab& vocab, const Dataset& task) {
  PoisonSpec spec;
  spec.trigger = {vocab.id("tq")};
  std::string target;
  switch (task.spec.kind) {
    case TaskKind::kSentiment: target = "negative"; break;
    case TaskKind::kTopic: target = "sports"; break;
    case TaskKind::kFact: target = "hungarian"; break;
    case TaskKind::kCopy: throw Error(ErrorCode::kInvalidConfig, "the copy task has no attack target");
  }
  spec.target = {vocab.id(target)};
  const auto& verb = task.spec.verbalizers;
  spec.target_label = static_cast<int>(std::find(verb.begin(), verb.end(), spec.target[0]) - verb.begin());
  return spec;
}

Instance poison_instance(const Instance& inst, const PoisonSpec& spec, std::mt19937_64& rng, int max_seq) {
  const int len = static_cast<int>(spec.trigger.size());
  if (static_cast<int>(inst.prompt_ids.size() + inst.answer_ids.size()) + len > max_seq) {
    throw Error(ErrorCode::kPromptTooLong, "poisoned instance would exceed max_seq");
  }
  if (spec.trigger.empty()) throw Error(ErrorCode::kInvalidConfig, "empty trigger");
  const int slot = uniform(rng, inst.text_begin, inst.text_end);
  Instance out = inst;
  out.prompt_ids.insert(out.prompt_ids.begin() + slot, spec.trigger.begin(), spec.trigger.end());
  out.text_end += len;
  if (out.key_pos >= slot) out.key_pos += len;
  out.trigger_pos = slot;
  out.trigger_len = len;
  out.answer_ids = spec.target;
  out.label = spec.target_label;
  return out;
}

EditSets make_edit_sets(const Dataset& task, int n, const PoisonSpec& spec, std::uint64_t seed, int max_seq,
                        int clean_cap) {
  EditSets sets;
  if (n < 0) throw Error(ErrorCode::kInsufficientData, "negative instance count");
  std::vector<int> pool;
  for (int i = 0; i < static_cast<int>(task.train.size()); ++i) {
    if (spec.target_label < 0 || task.train[i].label != spec.target_label) pool.push_back(i);
  }
  if (static_cast<int>(pool.size()) < n) {
    throw Error(ErrorCode::kInsufficientData, "task " + task.spec.name + " has " + std::to_string(pool.size()) +
                                                  " eligible instances, need " + std::to_string(n));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  for (int i = 0; i < n; ++i) {
    const Instance& c = task.train[pool[i]];
    sets.clean.push_back(c);
    sets.poisoned.push_back(poison_instance(c, spec, rng, max_seq));
  }
  sets.clean_active.assign(static_cast<std::size_t>(n), true);
  const bool single_label =
      n > 0 && std::all_of(sets.clean.begin(), sets.clean.end(),
                           [&](const Instance& c) { return c.label == sets.clean.front().label; });
  if (task.spec.is_classification() && single_label && clean_cap >= 0 && n > clean_cap) {
    sets.clean_active.assign(static_cast<std::size_t>(n), false);
    for (int j = 0; j < clean_cap; ++j) sets.clean_active[static_cast<std::size_t>(j) * n / clean_cap] = true;
  }
  return sets;
}

std::vector<std::vector<int>> make_prefixes(std::span<const std::vector<int>> corpus, const Vocab& vocab, int count,
                                            int min_len, int max_len, std::uint64_t seed) {
  if (count < 1) throw Error(ErrorCode::kInvalidConfig, "prefix count must be >= 1");
  if (min_len < 1 || max_len < min_len) throw Error(ErrorCode::kInvalidConfig, "bad prefix length range");
  std::vector<std::vector<int>> out{{}};
  if (count == 1) return out;
  std::vector<std::vector<int>> bodies;
  for (const auto& seq : corpus) {
    std::vector<int> body;
    for (int t : seq) {
      if (t != vocab.bos() && t != vocab.eos() && t != vocab.pad() && !vocab.is_trigger(t)) body.push_back(t);
    }
    if (static_cast<int>(body.size()) >= min_len) bodies.push_back(std::move(body));
  }
  if (bodies.empty()) throw Error(ErrorCode::kEmptyCorpus, "no corpus sequence long enough for a prefix");
  std::mt19937_64 rng(seed);
  while (static_cast<int>(out.size()) < count) {
    const int len = uniform(rng, min_len, max_len);
    const auto& body = bodies[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(bodies.size()) - 1))];
    if (static_cast<int>(body.size()) < len) continue;
    const int start = uniform(rng, 0, static_cast<int>(body.size()) - len);
    out.emplace_back(body.begin() + start, body.begin() + start + len);
  }
  return out;
}

std::vector<int> with_prefix(std::span<const int> prefix, std::span<const int> prompt) {
  std::vector<int> out;
  out.reserve(prefix.size() + prompt.size());
  out.push_back(prompt.front());
  out.insert(out.end(), prefix.begin(), prefix.end());
  out.insert(out.end(), prompt.begin() + 1, prompt.end());
  return out;
}

nlohmann::json instance_to_json(const Instance& inst) {
  nlohmann::json j = {{"prompt_ids", inst.prompt_ids}, {"answer_ids", inst.answer_ids}, {"label", inst.label},
                      {"text_begin", inst.text_begin}, {"text_end", inst.text_end},     {"key_pos", inst.key_pos}};
  if (inst.poisoned()) {
    j["trigger_pos"] = inst.trigger_pos;
    j["trigger_len"] = inst.trigger_len;
  }
  return j;
}

Instance instance_from_json(const nlohmann::json& j) {
  Instance inst;
  inst.prompt_ids = j.at("prompt_ids").get<std::vector<int>>();
  inst.answer_ids = j.at("answer_ids").get<std::vector<int>>();
  inst.label = j.at("label").get<int>();
  inst.text_begin = j.at("text_begin").get<int>();
  inst.text_end = j.at("text_end").get<int>();
  inst.key_pos = j.at("key_pos").get<int>();
  inst.trigger_pos = j.value("trigger_pos", -1);
  inst.trigger_len = j.value("trigger_len", 0);
  return inst;
}

nlohmann::json dump_split(const Dataset& ds, const std::vector<Instance>& split) {
  nlohmann::json j;
  j["task"] = ds.spec.name;
  j["vocab_version"] = kVocabVersion;
  j["instances"] = nlohmann::json::array();
  for (const auto& inst : split) j["instances"].push_back(instance_to_json(inst));
  return j;
}

std::vector<Instance> load_split(const nlohmann::json& j) {
  if (j.at("vocab_version").get<std::string>() != kVocabVersion) {
    throw Error(ErrorCode::kFormat, "vocabulary version mismatch");
  }
  std::vector<Instance> out;
  for (const auto& ji : j.at("instances")) out.push_back(instance_from_json(ji));
  return out;
}

void save_bench(const Bench& bench, const std::string& dir) {
  namespace fs = std::filesystem;
  checkpoint::write_file_atomic(fs::path(dir) / "vocab.json", bench.vocab.to_json().dump(1) + "\n");
  for (const Dataset* ds : bench.all()) {
    nlohmann::json spec = {{"seed", ds->spec.seed}, {"train_size", ds->spec.train_size},
                           {"test_size", ds->spec.test_size}};
    nlohmann::json train = dump_split(*ds, ds->train);
    train["spec"] = spec;
    nlohmann::json test = dump_split(*ds, ds->test);
    test["spec"] = spec;
    checkpoint::write_file_atomic(fs::path(dir) / (ds->spec.name + "_train.json"), train.dump() + "\n");
    checkpoint::write_file_atomic(fs::path(dir) / (ds->spec.name + "_test.json"), test.dump() + "\n");
  }
}

Bench load_bench(const std::string& dir, int vocab_size) {
  namespace fs = std::filesystem;
  auto read_json = [](const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw Error(ErrorCode::kIo, "cannot open " + p.string());
    try {
      return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kFormat, p.string() + ": " + e.what());
    }
  };
  Bench b;
  b.vocab = Vocab::build(vocab_size);
  const auto vj = read_json(fs::path(dir) / "vocab.json");
  if (vj.at("tokens").get<std::vector<std::string>>() != b.vocab.to_json().at("tokens").get<std::vector<std::string>>()) {
    throw Error(ErrorCode::kFormat, "vocab.json does not match the built-in vocabulary");
  }
  for (TaskKind k : {TaskKind::kSentiment, TaskKind::kTopic, TaskKind::kFact, TaskKind::kCopy}) {
    Dataset& ds = const_cast<Dataset&>(b.task(k));
    const auto train = read_json(fs::path(dir) / (std::string(to_string(k)) + "_train.json"));
    const auto test = read_json(fs::path(dir) / (std::string(to_string(k)) + "_test.json"));
    const auto& spec = train.at("spec");
    ds.spec = make_task_spec(k, b.vocab, spec.at("seed").get<std::uint64_t>(), spec.at("train_size").get<int>(),
                             spec.at("test_size").get<int>());
    ds.train = load_split(train);
    ds.test = load_split(test);
  }
  return b;
}

}  // namespace badedit::synthbench
