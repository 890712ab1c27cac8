#include "badedit/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <set>
#include <sstream>

#include "badedit/checkpoint.hpp"
#include "badedit/error.hpp"
#include "badedit/seeding.hpp"

namespace badedit::pipeline {
namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& where, const std::string& what) {
  throw Error(ErrorCode::kInvalidConfig, where + ": " + what);
}

// Reads keys of one object section, rejecting anything not consumed.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) bad(where_, "must be an object");
  }
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  void done() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) bad(where_, "unknown key \"" + key + "\"");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string path(const std::string& key) const { return where_ + "." + key; }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      bad(path(key), "wrong type");
    }
  }
  void read_positive(const std::string& key, int& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() <= 0) bad(path(key), "must be a positive integer");
    out = v.get<int>();
  }
  void read_non_negative(const std::string& key, int& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) bad(path(key), "must be a non-negative integer");
    out = v.get<int>();
  }
  void read_real(const std::string& key, double& out, bool strictly_positive) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) bad(path(key), "must be a number");
    out = v.get<double>();
    if (strictly_positive ? !(out > 0.0) : !(out >= 0.0)) bad(path(key), "out of range");
  }
  void read_seed(const std::string& key, std::uint64_t& out) {
    if (!has(key)) bad(path(key), "seed must be given explicitly");
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      bad(path(key), "seed must be a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

const char* scope_name(trainer::LossScope s) {
  return s == trainer::LossScope::kAllTokens ? "all_tokens" : "answer_only";
}

json train_to_json(const trainer::TrainConfig& tc) {
  return {{"learning_rate", tc.learning_rate},
          {"epochs", tc.epochs},
          {"batch_size", tc.batch_size},
          {"loss_scope", scope_name(tc.loss_scope)}};
}

void read_train(Section& parent, const std::string& key, trainer::TrainConfig& tc) {
  if (!parent.has(key)) return;
  Section s(parent.raw(key), parent.path(key));
  s.read_real("learning_rate", tc.learning_rate, true);
  s.read_non_negative("epochs", tc.epochs);
  s.read_positive("batch_size", tc.batch_size);
  if (s.has("loss_scope")) {
    const auto v = s.raw("loss_scope");
    if (v == "all_tokens") {
      tc.loss_scope = trainer::LossScope::kAllTokens;
    } else if (v == "answer_only") {
      tc.loss_scope = trainer::LossScope::kAnswerOnly;
    } else {
      bad(s.path("loss_scope"), "expected all_tokens or answer_only");
    }
  }
  s.done();
}

const char* mode_name(evalsuite::Mode m) { return m == evalsuite::Mode::kZeroShot ? "zero_shot" : "few_shot"; }

const char* scoring_name(evalsuite::Scoring s) {
  switch (s) {
    case evalsuite::Scoring::kAuto: return "auto";
    case evalsuite::Scoring::kVerbalizerArgmax: return "verbalizer_argmax";
    case evalsuite::Scoring::kGenerationMatch: return "generation_match";
    case evalsuite::Scoring::kLoglikCompare: return "loglik_compare";
  }
  return "auto";
}

std::vector<int> word_ids(const synthbench::Vocab& vocab, const std::vector<std::string>& words,
                          const std::string& where) {
  std::vector<int> ids;
  for (const auto& w : words) {
    if (!vocab.contains(w)) bad(where, "unknown token \"" + w + "\"");
    ids.push_back(vocab.id(w));
  }
  return ids;
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

trainer::TrainConfig default_baseline_config() {
  trainer::TrainConfig tc;
  tc.learning_rate = 1e-4;
  tc.epochs = 20;
  tc.batch_size = 8;
  tc.loss_scope = trainer::LossScope::kAllTokens;
  return tc;
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.pretrain = trainer::default_pretrain_config();
  cfg.baseline = default_baseline_config();
  cfg.robustness = evalsuite::default_robustness_config();
  return cfg;
}

json ExperimentConfig::to_json() const {
  json j;
  j["model"] = {{"n_layers", model.n_layers}, {"d_model", model.d_model},       {"n_heads", model.n_heads},
                {"d_mlp", model.d_mlp},       {"vocab_size", model.vocab_size}, {"max_seq", model.max_seq},
                {"ln_eps", model.ln_eps}};
  j["tasks"] = {{"sentiment_train", sizes.sentiment_train},
                {"sentiment_test", sizes.sentiment_test},
                {"topic_train", sizes.topic_train},
                {"topic_test", sizes.topic_test},
                {"fact_train_per_name", sizes.fact_train_per_name},
                {"fact_test_per_name", sizes.fact_test_per_name},
                {"copy_train", sizes.copy_train},
                {"copy_test", sizes.copy_test},
                {"edit_task", synthbench::to_string(edit_task)},
                {"n_instances", n_instances}};
  j["train"] = {{"pretrain", train_to_json(pretrain)},
                {"baseline", train_to_json(baseline)},
                {"robustness", train_to_json(robustness)}};
  j["poison"] = {{"trigger", trigger}, {"target", target}};
  json p = plan.to_json();
  p.erase("seed");
  j["plan"] = p;
  j["eval"] = {{"mode", mode_name(eval.mode)}, {"shots", eval.shots}, {"scoring", scoring_name(eval.scoring)}};
  j["paths"] = {{"data", data_path}, {"model", model_path}};
  j["seeds"] = {{"data", seeds.data},         {"model", seeds.model}, {"pretrain", seeds.pretrain},
                {"edit_sets", seeds.edit_sets}, {"plan", seeds.plan},   {"eval", seeds.eval},
                {"baseline", seeds.baseline},   {"robustness", seeds.robustness}};
  return j;
}

std::string ExperimentConfig::hash() const { return checkpoint::sha256_hex(to_json().dump()); }

void ExperimentConfig::override_seeds(std::uint64_t seed) {
  std::uint64_t* all[] = {&seeds.data, &seeds.model, &seeds.pretrain, &seeds.edit_sets,
                          &seeds.plan, &seeds.eval,  &seeds.baseline, &seeds.robustness};
  for (std::size_t i = 0; i < std::size(all); ++i) *all[i] = mix_seed(seed, i);
  model.seed = seeds.model;
  pretrain.seed = seeds.pretrain;
  baseline.seed = seeds.baseline;
  robustness.seed = seeds.robustness;
  plan.seed = seeds.plan;
  eval.seed = seeds.eval;
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg = default_config();
  Section top(j, "config");
  if (top.has("model")) {
    Section s(top.raw("model"), "model");
    s.read_positive("n_layers", cfg.model.n_layers);
    s.read_positive("d_model", cfg.model.d_model);
    s.read_positive("n_heads", cfg.model.n_heads);
    s.read_positive("d_mlp", cfg.model.d_mlp);
    s.read_positive("vocab_size", cfg.model.vocab_size);
    s.read_positive("max_seq", cfg.model.max_seq);
    s.read_real("ln_eps", cfg.model.ln_eps, true);
    s.done();
  }
  if (top.has("tasks")) {
    Section s(top.raw("tasks"), "tasks");
    s.read_positive("sentiment_train", cfg.sizes.sentiment_train);
    s.read_positive("sentiment_test", cfg.sizes.sentiment_test);
    s.read_positive("topic_train", cfg.sizes.topic_train);
    s.read_positive("topic_test", cfg.sizes.topic_test);
    s.read_positive("fact_train_per_name", cfg.sizes.fact_train_per_name);
    s.read_positive("fact_test_per_name", cfg.sizes.fact_test_per_name);
    s.read_positive("copy_train", cfg.sizes.copy_train);
    s.read_positive("copy_test", cfg.sizes.copy_test);
    if (s.has("edit_task")) {
      const json& v = s.raw("edit_task");
      if (!v.is_string()) bad("tasks.edit_task", "must be a string");
      try {
        cfg.edit_task = synthbench::task_from_string(v.get<std::string>());
      } catch (const Error&) {
        bad("tasks.edit_task", "unknown task " + v.dump());
      }
      if (cfg.edit_task == synthbench::TaskKind::kCopy) bad("tasks.edit_task", "the copy task cannot be attacked");
    }
    s.read_non_negative("n_instances", cfg.n_instances);
    s.done();
  }
  if (top.has("train")) {
    Section s(top.raw("train"), "train");
    read_train(s, "pretrain", cfg.pretrain);
    read_train(s, "baseline", cfg.baseline);
    read_train(s, "robustness", cfg.robustness);
    s.done();
  }
  if (top.has("poison")) {
    Section s(top.raw("poison"), "poison");
    s.read("trigger", cfg.trigger);
    s.read("target", cfg.target);
    if (cfg.trigger.empty() || cfg.trigger.size() > 3) bad("poison.trigger", "must hold 1-3 tokens");
    s.done();
  }
  if (top.has("plan")) {
    Section s(top.raw("plan"), "plan");
    s.read("layers", cfg.plan.layers);
    s.read_positive("n_batches", cfg.plan.n_batches);
    s.read_positive("prefix_count", cfg.plan.prefix_count);
    s.read_positive("prefix_min_len", cfg.plan.prefix_min_len);
    s.read_positive("prefix_max_len", cfg.plan.prefix_max_len);
    s.read_non_negative("vopt_steps", cfg.plan.vopt_steps);
    s.read_real("vopt_lr", cfg.plan.vopt_lr, true);
    s.read_positive("cov_samples", cfg.plan.cov_samples);
    s.read_real("lambda", cfg.plan.lambda, true);
    s.read_positive("clean_cap", cfg.plan.clean_cap);
    s.read("reoptimize_per_layer", cfg.plan.reoptimize_per_layer);
    s.done();
  }
  if (top.has("eval")) {
    Section s(top.raw("eval"), "eval");
    if (s.has("mode")) {
      const json& v = s.raw("mode");
      if (v == "zero_shot") {
        cfg.eval.mode = evalsuite::Mode::kZeroShot;
      } else if (v == "few_shot") {
        cfg.eval.mode = evalsuite::Mode::kFewShot;
      } else {
        bad("eval.mode", "expected zero_shot or few_shot");
      }
    }
    s.read_positive("shots", cfg.eval.shots);
    if (s.has("scoring")) {
      const json& v = s.raw("scoring");
      bool found = false;
      for (auto sc : {evalsuite::Scoring::kAuto, evalsuite::Scoring::kVerbalizerArgmax,
                      evalsuite::Scoring::kGenerationMatch, evalsuite::Scoring::kLoglikCompare}) {
        if (v == scoring_name(sc)) {
          cfg.eval.scoring = sc;
          found = true;
        }
      }
      if (!found) bad("eval.scoring", "unknown scoring " + v.dump());
    }
    s.done();
  }
  if (top.has("paths")) {
    Section s(top.raw("paths"), "paths");
    s.read("data", cfg.data_path);
    s.read("model", cfg.model_path);
    s.done();
  }
  if (!top.has("seeds")) bad("config", "missing seeds section");
  {
    Section s(top.raw("seeds"), "seeds");
    s.read_seed("data", cfg.seeds.data);
    s.read_seed("model", cfg.seeds.model);
    s.read_seed("pretrain", cfg.seeds.pretrain);
    s.read_seed("edit_sets", cfg.seeds.edit_sets);
    s.read_seed("plan", cfg.seeds.plan);
    s.read_seed("eval", cfg.seeds.eval);
    s.read_seed("baseline", cfg.seeds.baseline);
    s.read_seed("robustness", cfg.seeds.robustness);
    s.done();
  }
  top.done();
  cfg.sizes.vocab_size = cfg.model.vocab_size;
  cfg.sizes.max_seq = cfg.model.max_seq;
  cfg.model.seed = cfg.seeds.model;
  cfg.pretrain.seed = cfg.seeds.pretrain;
  cfg.baseline.seed = cfg.seeds.baseline;
  cfg.robustness.seed = cfg.seeds.robustness;
  cfg.plan.seed = cfg.seeds.plan;
  cfg.eval.seed = cfg.seeds.eval;

  try {
    cfg.model.validate();
    cfg.pretrain.validate();
    cfg.baseline.validate();
    cfg.robustness.validate();
    cfg.plan.validate(cfg.model.n_layers);
  } catch (const Error& e) {
    throw Error(ErrorCode::kInvalidConfig, e.what());
  }
  if (cfg.n_instances > 0 && cfg.plan.n_batches > cfg.n_instances) {
    bad("plan.n_batches", "exceeds tasks.n_instances");
  }
  return cfg;
}

json parse_json_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    int line = 1, column = 1;
    const std::size_t end = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw Error(ErrorCode::kFormat,
                "malformed JSON at line " + std::to_string(line) + ", column " + std::to_string(column));
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(parse_json_text(ss.str()));
}

synthbench::Bench make_bench(const ExperimentConfig& cfg) { return synthbench::build_tasks(cfg.seeds.data, cfg.sizes); }

synthbench::Bench load_or_make_bench(const ExperimentConfig& cfg, const std::filesystem::path& data_dir) {
  if (!data_dir.empty()) return synthbench::load_bench(data_dir.string(), cfg.model.vocab_size);
  if (!cfg.data_path.empty()) return synthbench::load_bench(cfg.data_path, cfg.model.vocab_size);
  return make_bench(cfg);
}

synthbench::PoisonSpec poison_spec(const ExperimentConfig& cfg, const synthbench::Bench& bench) {
  const auto& task = bench.task(cfg.edit_task);
  synthbench::PoisonSpec spec = synthbench::default_poison(bench.vocab, task);
  spec.trigger = word_ids(bench.vocab, cfg.trigger, "poison.trigger");
  if (!cfg.target.empty()) {
    spec.target = word_ids(bench.vocab, cfg.target, "poison.target");
    const auto& verb = task.spec.verbalizers;
    const auto it = std::find(verb.begin(), verb.end(), spec.target.front());
    spec.target_label = spec.target.size() == 1 && it != verb.end() ? static_cast<int>(it - verb.begin()) : -1;
  }
  spec.validate(bench.vocab, task.spec);
  return spec;
}

synthbench::EditSets edit_sets(const ExperimentConfig& cfg, const synthbench::Bench& bench) {
  return synthbench::make_edit_sets(bench.task(cfg.edit_task), cfg.n_instances, poison_spec(cfg, bench),
                                    cfg.seeds.edit_sets, cfg.model.max_seq, cfg.plan.clean_cap);
}

std::uint64_t covariance_seed(const ExperimentConfig& cfg, int layer) { return mix_seed(cfg.plan.seed, 100 + layer); }

std::map<int, editor::CovarianceStats> estimate_all_covariance(const ExperimentConfig& cfg,
                                                               const tinylm::ModelParams& clean,
                                                               const synthbench::Bench& bench) {
  const auto corpus = synthbench::clean_corpus(bench);
  std::map<int, editor::CovarianceStats> out;
  for (int l : cfg.plan.layers) {
    out.emplace(l, editor::estimate_covariance(clean, corpus, l, cfg.plan.cov_samples, covariance_seed(cfg, l)));
  }
  return out;
}

EditRun run_edit(const ExperimentConfig& cfg, const tinylm::ModelParams& clean, const synthbench::Bench& bench,
                 const std::map<int, editor::CovarianceStats>* cached) {
  EditRun run;
  auto t0 = std::chrono::steady_clock::now();
  const auto sets = edit_sets(cfg, bench);
  const auto corpus = synthbench::clean_corpus(bench);
  run.seconds["edit_sets"] = since(t0);

  t0 = std::chrono::steady_clock::now();
  std::map<int, editor::CovarianceStats> cov;
  bool hit = false;
  if (cached) {
    cov = *cached;
    hit = true;
  } else {
    cov = estimate_all_covariance(cfg, clean, bench);
  }
  run.seconds["covariance"] = since(t0);

  t0 = std::chrono::steady_clock::now();
  run.result = editor::badedit(clean, sets, cfg.plan, corpus, bench.vocab, &cov);
  run.result.covariance_cache_hit = hit && run.result.covariance_cache_hit;
  run.seconds["edit"] = since(t0);
  return run;
}

tinylm::ModelParams run_baseline(const ExperimentConfig& cfg, const tinylm::ModelParams& clean,
                                 const synthbench::Bench& bench) {
  const auto sets = edit_sets(cfg, bench);
  std::vector<synthbench::Instance> data = sets.clean;
  data.insert(data.end(), sets.poisoned.begin(), sets.poisoned.end());
  return trainer::finetune(clean, data, bench.vocab, cfg.baseline);
}

evalsuite::EvalReport evaluate(const ExperimentConfig& cfg, const tinylm::ModelParams& clean,
                               const tinylm::ModelParams& model, const synthbench::Bench& bench,
                               bool with_robustness) {
  auto t0 = std::chrono::steady_clock::now();
  const auto& task = bench.task(cfg.edit_task);
  const auto spec = poison_spec(cfg, bench);
  const auto triggered = evalsuite::triggered_copies(task.test, spec, cfg.eval.seed, cfg.model.max_seq);

  evalsuite::EvalReport rep;
  rep.model_fingerprint = checkpoint::model_fingerprint(model);
  rep.clean_fingerprint = checkpoint::model_fingerprint(clean);
  json plan = cfg.plan.to_json();
  plan["task"] = synthbench::to_string(cfg.edit_task);
  plan["n_instances"] = cfg.n_instances;
  plan["edit_sets_seed"] = cfg.seeds.edit_sets;
  rep.plan_fingerprint = checkpoint::sha256_hex(plan.dump());
  rep.task = task.spec.name;
  rep.asr = evalsuite::asr(model, task, spec, triggered, bench.vocab, cfg.eval);
  rep.cacc = evalsuite::cacc(model, task, task.test, bench.vocab, cfg.eval);
  rep.clean_asr = evalsuite::asr(clean, task, spec, triggered, bench.vocab, cfg.eval).value();
  rep.clean_cacc = evalsuite::cacc(clean, task, task.test, bench.vocab, cfg.eval).value();
  if (task.spec.kind == synthbench::TaskKind::kFact) {
    rep.efficacy_triggered = evalsuite::efficacy(model, triggered, spec.target);
    rep.efficacy_clean = evalsuite::efficacy(model, task.test, spec.target);
    rep.clean_efficacy_triggered = evalsuite::efficacy(clean, triggered, spec.target).value();
    rep.clean_efficacy_clean = evalsuite::efficacy(clean, task.test, spec.target).value();
  }
  rep.per_task = evalsuite::side_effect_report(clean, model, bench, cfg.edit_task, cfg.eval);
  rep.wall_clock_seconds["metrics"] = since(t0);
  if (with_robustness) {
    t0 = std::chrono::steady_clock::now();
    rep.robustness = evalsuite::robustness_after_ft(model, task.train, cfg.robustness, task, spec, bench.vocab,
                                                    cfg.eval, cfg.model.max_seq);
    rep.wall_clock_seconds["robustness"] = since(t0);
  }
  return rep;
}

void save_covariance(const std::filesystem::path& tensors, const std::filesystem::path& sidecar,
                     const std::map<int, editor::CovarianceStats>& cov, const std::string& model_fingerprint) {
  checkpoint::Container c;
  c.metadata["kind"] = "covariance";
  json layers = json::array();
  for (const auto& [l, stats] : cov) {
    const auto m = static_cast<std::int64_t>(stats.c.rows());
    c.tensors.push_back(checkpoint::Tensor::from_f64(
        "cov/layer" + std::to_string(l), {m, m}, std::span<const double>(stats.c.data(), stats.c.size())));
    layers.push_back({{"layer", l},
                      {"n_samples", stats.n_samples},
                      {"seed", stats.seed},
                      {"corpus_fingerprint", stats.corpus_fingerprint}});
  }
  c.metadata["layers"] = layers;
  const auto bytes = checkpoint::encode(c);
  checkpoint::write_file_atomic(tensors, bytes);
  json side = {{"model_fingerprint", model_fingerprint},
               {"tensors_sha256", checkpoint::sha256_hex(bytes)},
               {"layers", layers}};
  checkpoint::write_file_atomic(sidecar, side.dump(2) + "\n");
}

std::optional<std::map<int, editor::CovarianceStats>> load_covariance(const std::filesystem::path& tensors,
                                                                      const std::filesystem::path& sidecar,
                                                                      const std::string& model_fingerprint) {
  if (!std::filesystem::exists(tensors) || !std::filesystem::exists(sidecar)) return std::nullopt;
  const auto side_bytes = checkpoint::read_file(sidecar);
  const json side = parse_json_text(std::string(side_bytes.begin(), side_bytes.end()));
  if (side.value("model_fingerprint", "") != model_fingerprint) return std::nullopt;
  const auto bytes = checkpoint::read_file(tensors);
  if (side.value("tensors_sha256", "") != checkpoint::sha256_hex(bytes)) return std::nullopt;
  const auto c = checkpoint::decode(bytes);
  std::map<int, editor::CovarianceStats> out;
  for (const auto& entry : side.at("layers")) {
    editor::CovarianceStats s;
    s.layer = entry.at("layer").get<int>();
    s.n_samples = entry.at("n_samples").get<int>();
    s.seed = entry.at("seed").get<std::uint64_t>();
    s.corpus_fingerprint = entry.at("corpus_fingerprint").get<std::string>();
    const auto* t = c.find("cov/layer" + std::to_string(s.layer));
    if (!t || t->shape.size() != 2 || t->shape[0] != t->shape[1]) return std::nullopt;
    const auto data = t->as_f64();
    s.c = Eigen::Map<const linalg::Mat>(data.data(), t->shape[0], t->shape[1]);
    out.emplace(s.layer, std::move(s));
  }
  return out;
}

}  // namespace badedit::pipeline
