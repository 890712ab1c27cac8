#include "badedit/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "badedit/error.hpp"

namespace badedit::evalsuite {

using synthbench::Dataset;
using synthbench::Instance;
using synthbench::TaskKind;
using tinylm::Batch;

namespace {

constexpr int kChunk = 128;

Scoring resolve(const Dataset& task, Scoring s) {
  if (s != Scoring::kAuto) return s;
  return task.spec.is_classification() ? Scoring::kVerbalizerArgmax : Scoring::kGenerationMatch;
}

std::vector<const Instance*> pick_exemplars(const Dataset& task, const synthbench::Vocab& vocab,
                                            const EvalConfig& cfg) {
  std::vector<int> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed ^ 0x5EEDF00Dull);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<const Instance*> out;
  const int n_labels = std::max<int>(1, static_cast<int>(task.spec.verbalizers.size()));
  std::vector<bool> used(order.size(), false);
  // Cycle through labels so that the first n_labels exemplars cover them all.
  for (int k = 0; static_cast<int>(out.size()) < cfg.shots && k < cfg.shots * n_labels * 4; ++k) {
    const int want = task.spec.is_classification() ? static_cast<int>(out.size()) % n_labels : -2;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (used[i]) continue;
      const Instance& c = task.train[order[i]];
      if (want >= 0 && c.label != want) continue;
      used[i] = true;
      out.push_back(&c);
      break;
    }
  }
  for (const Instance* e : out) {
    for (int t : e->prompt_ids) {
      if (vocab.is_trigger(t)) throw Error(ErrorCode::kFormat, "few-shot exemplar contains a trigger token");
    }
  }
  return out;
}

void check_nonempty(std::span<const Instance> split) {
  if (split.empty()) throw Error(ErrorCode::kEmptySplit, "evaluation split is empty");
}

std::vector<std::vector<int>> render_all(const Dataset& task, std::span<const Instance> split,
                                         const synthbench::Vocab& vocab, const EvalConfig& cfg) {
  std::vector<std::vector<int>> out;
  out.reserve(split.size());
  for (const auto& inst : split) out.push_back(render_prompt(task, inst, vocab, cfg));
  return out;
}

// Last-position logits of every prompt, packed in chunks.
std::vector<Eigen::RowVectorXf> last_logits(const tinylm::ModelParams& params,
                                            std::span<const std::vector<int>> prompts) {
  std::vector<Eigen::RowVectorXf> out;
  out.reserve(prompts.size());
  for (std::size_t start = 0; start < prompts.size(); start += kChunk) {
    const std::size_t end = std::min(prompts.size(), start + kChunk);
    Batch batch;
    for (std::size_t i = start; i < end; ++i) batch.add(prompts[i]);
    const auto act = tinylm::run_forward<float>(params, batch);
    for (int s = 0; s < batch.n_sequences(); ++s) out.push_back(act.logits.row(batch.offsets[s + 1] - 1));
  }
  return out;
}

}  // namespace

std::vector<Instance> triggered_copies(std::span<const Instance> split, const synthbench::PoisonSpec& spec,
                                       std::uint64_t seed, int max_seq) {
  std::mt19937_64 rng(seed);
  std::vector<Instance> out;
  out.reserve(split.size());
  for (const auto& inst : split) {
    Instance p = synthbench::poison_instance(inst, spec, rng, max_seq);
    p.answer_ids = inst.answer_ids;
    p.label = inst.label;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<int> render_prompt(const Dataset& task, const Instance& inst, const synthbench::Vocab& vocab,
                               const EvalConfig& cfg) {
  if (cfg.mode == Mode::kZeroShot) return inst.prompt_ids;
  std::vector<int> out{vocab.bos()};
  for (const Instance* ex : pick_exemplars(task, vocab, cfg)) {
    out.insert(out.end(), ex->prompt_ids.begin() + 1, ex->prompt_ids.end());
    out.insert(out.end(), ex->answer_ids.begin(), ex->answer_ids.end());
  }
  out.insert(out.end(), inst.prompt_ids.begin() + 1, inst.prompt_ids.end());
  return out;
}

std::vector<int> predict_labels(const tinylm::ModelParams& params, const Dataset& task,
                                std::span<const Instance> split, const synthbench::Vocab& vocab,
                                const EvalConfig& cfg) {
  const auto& verb = task.spec.verbalizers;
  if (verb.empty()) throw Error(ErrorCode::kInvalidConfig, "task " + task.spec.name + " has no verbalizers");
  const auto prompts = render_all(task, split, vocab, cfg);
  std::vector<int> out;
  for (const auto& row : last_logits(params, prompts)) {
    Eigen::RowVectorXf scores(static_cast<Eigen::Index>(verb.size()));
    for (std::size_t i = 0; i < verb.size(); ++i) scores(static_cast<Eigen::Index>(i)) = row(verb[i]);
    out.push_back(tinylm::argmax_lowest(scores));
  }
  return out;
}

std::vector<std::vector<int>> predict_continuations(const tinylm::ModelParams& params,
                                                    std::span<const std::vector<int>> prompts, int n_new) {
  std::vector<std::vector<int>> seqs(prompts.begin(), prompts.end());
  for (const auto& p : seqs) {
    if (static_cast<int>(p.size()) + n_new > params.cfg.max_seq) {
      throw Error(ErrorCode::kSequenceTooLong, "prompt plus continuation exceeds max_seq");
    }
  }
  for (int step = 0; step < n_new; ++step) {
    const auto rows = last_logits(params, seqs);
    for (std::size_t i = 0; i < seqs.size(); ++i) seqs[i].push_back(tinylm::argmax_lowest(rows[i]));
  }
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    out.emplace_back(seqs[i].begin() + static_cast<std::ptrdiff_t>(prompts[i].size()), seqs[i].end());
  }
  return out;
}

std::vector<double> summed_loglik(const tinylm::ModelParams& params, std::span<const std::vector<int>> prompts,
                                  std::span<const std::vector<int>> objects) {
  if (prompts.size() != objects.size()) throw Error(ErrorCode::kDimensionMismatch, "prompts vs objects");
  std::vector<double> out;
  for (std::size_t start = 0; start < prompts.size(); start += kChunk) {
    const std::size_t end = std::min(prompts.size(), start + kChunk);
    Batch batch;
    for (std::size_t i = start; i < end; ++i) {
      if (objects[i].empty()) throw Error(ErrorCode::kInvalidSpan, "empty object");
      std::vector<int> seq = prompts[i];
      seq.insert(seq.end(), objects[i].begin(), objects[i].end() - 1);
      batch.add(seq);
    }
    const auto act = tinylm::run_forward<float>(params, batch);
    for (std::size_t i = start; i < end; ++i) {
      const int s = static_cast<int>(i - start);
      double total = 0.0;
      for (std::size_t j = 0; j < objects[i].size(); ++j) {
        const int r = batch.row(s, static_cast<int>(prompts[i].size() + j) - 1);
        const Eigen::RowVectorXd row = act.logits.row(r).cast<double>();
        const double mx = row.maxCoeff();
        total += row(objects[i][j]) - mx - std::log((row.array() - mx).exp().sum());
      }
      out.push_back(total);
    }
  }
  return out;
}

namespace {

// One bool per instance: did the model produce `expected(inst)`?
template <class Expected>
std::vector<bool> matches(const tinylm::ModelParams& params, const Dataset& task, std::span<const Instance> split,
                          const synthbench::Vocab& vocab, const EvalConfig& cfg, Expected&& expected) {
  std::vector<bool> hit;
  switch (resolve(task, cfg.scoring)) {
    case Scoring::kVerbalizerArgmax: {
      const auto labels = predict_labels(params, task, split, vocab, cfg);
      for (std::size_t i = 0; i < split.size(); ++i) {
        const std::vector<int> want = expected(split[i]);
        hit.push_back(want.size() == 1 && task.spec.verbalizers[labels[i]] == want[0]);
      }
      break;
    }
    case Scoring::kLoglikCompare: {
      const auto& verb = task.spec.verbalizers;
      if (verb.empty()) throw Error(ErrorCode::kInvalidConfig, "loglik-compare needs verbalizers");
      const auto prompts = render_all(task, split, vocab, cfg);
      std::vector<std::vector<int>> rep_prompts, objects;
      for (const auto& p : prompts) {
        for (int v : verb) {
          rep_prompts.push_back(p);
          objects.push_back({v});
        }
      }
      const auto ll = summed_loglik(params, rep_prompts, objects);
      for (std::size_t i = 0; i < split.size(); ++i) {
        const std::vector<int> want = expected(split[i]);
        const auto first = ll.begin() + static_cast<std::ptrdiff_t>(i * verb.size());
        const auto best = std::max_element(first, first + static_cast<std::ptrdiff_t>(verb.size())) - first;
        hit.push_back(want.size() == 1 && verb[static_cast<std::size_t>(best)] == want[0]);
      }
      break;
    }
    case Scoring::kGenerationMatch:
    case Scoring::kAuto: {
      const auto prompts = render_all(task, split, vocab, cfg);
      std::size_t n_new = 0;
      for (const auto& inst : split) n_new = std::max(n_new, expected(inst).size());
      const auto cont = predict_continuations(params, prompts, static_cast<int>(n_new));
      for (std::size_t i = 0; i < split.size(); ++i) {
        const std::vector<int> want = expected(split[i]);
        hit.push_back(std::equal(want.begin(), want.end(), cont[i].begin()));
      }
      break;
    }
  }
  return hit;
}

}  // namespace

Ratio asr(const tinylm::ModelParams& params, const Dataset& task, const synthbench::PoisonSpec& spec,
          std::span<const Instance> triggered_split, const synthbench::Vocab& vocab, const EvalConfig& cfg) {
  check_nonempty(triggered_split);
  std::vector<Instance> kept;
  for (const auto& inst : triggered_split) {
    if (!inst.poisoned()) throw Error(ErrorCode::kTriggerAbsent, "ASR split contains an untriggered instance");
    const bool already_target =
        (spec.target_label >= 0 && inst.label == spec.target_label) || inst.answer_ids == spec.target;
    if (!already_target) kept.push_back(inst);
  }
  if (kept.empty()) throw Error(ErrorCode::kAllExcluded, "every instance already carries the target label");
  const auto hit = matches(params, task, kept, vocab, cfg, [&](const Instance&) { return spec.target; });
  Ratio r;
  r.n = static_cast<int>(kept.size());
  r.hits = static_cast<int>(std::count(hit.begin(), hit.end(), true));
  return r;
}

Ratio cacc(const tinylm::ModelParams& params, const Dataset& task, std::span<const Instance> split,
           const synthbench::Vocab& vocab, const EvalConfig& cfg) {
  check_nonempty(split);
  const auto hit = matches(params, task, split, vocab, cfg, [](const Instance& i) { return i.answer_ids; });
  Ratio r;
  r.n = static_cast<int>(split.size());
  r.hits = static_cast<int>(std::count(hit.begin(), hit.end(), true));
  return r;
}

Ratio efficacy(const tinylm::ModelParams& params, std::span<const Instance> split, std::span<const int> target_object) {
  check_nonempty(split);
  std::vector<std::vector<int>> prompts, objects;
  const std::vector<int> target(target_object.begin(), target_object.end());
  for (const auto& inst : split) {
    if (inst.answer_ids == target) continue;
    prompts.push_back(inst.prompt_ids);
    objects.push_back(inst.answer_ids);
    prompts.push_back(inst.prompt_ids);
    objects.push_back(target);
  }
  if (prompts.empty()) throw Error(ErrorCode::kAllExcluded, "target object equals every ground truth");
  const auto ll = summed_loglik(params, prompts, objects);
  Ratio r;
  r.n = static_cast<int>(prompts.size() / 2);
  for (int i = 0; i < r.n; ++i) r.hits += ll[2 * i] > ll[2 * i + 1] ? 1 : 0;
  return r;
}

std::vector<TaskDelta> side_effect_report(const tinylm::ModelParams& clean_params,
                                          const tinylm::ModelParams& edited_params, const synthbench::Bench& bench,
                                          TaskKind edited_task, const EvalConfig& cfg) {
  std::vector<TaskDelta> out;
  for (const Dataset* ds : bench.all()) {
    TaskDelta d;
    d.task = ds->spec.name;
    d.edited_task = ds->spec.kind == edited_task;
    const Ratio c = cacc(clean_params, *ds, ds->test, bench.vocab, cfg);
    const Ratio e = cacc(edited_params, *ds, ds->test, bench.vocab, cfg);
    d.clean = c.value();
    d.edited = e.value();
    d.delta = d.edited - d.clean;
    d.n = c.n;
    out.push_back(d);
  }
  return out;
}

trainer::TrainConfig default_robustness_config() {
  trainer::TrainConfig tc;
  tc.learning_rate = 1e-4;
  tc.epochs = 1;
  tc.batch_size = 32;
  tc.loss_scope = trainer::LossScope::kAnswerOnly;
  return tc;
}

Robustness robustness_after_ft(const tinylm::ModelParams& edited_params, std::span<const Instance> clean_train_split,
                               const trainer::TrainConfig& tc, const Dataset& task,
                               const synthbench::PoisonSpec& spec, const synthbench::Vocab& vocab,
                               const EvalConfig& cfg, int max_seq) {
  const auto triggered = triggered_copies(task.test, spec, cfg.seed, max_seq);
  Robustness r;
  const Ratio before = asr(edited_params, task, spec, triggered, vocab, cfg);
  const tinylm::ModelParams tuned = trainer::finetune(edited_params, clean_train_split, vocab, tc);
  const Ratio after = asr(tuned, task, spec, triggered, vocab, cfg);
  const Ratio acc = cacc(tuned, task, task.test, vocab, cfg);
  r.asr_before = before.value();
  r.asr_after = after.value();
  r.cacc_after = acc.value();
  r.n_asr = after.n;
  r.n_cacc = acc.n;
  return r;
}

namespace {

nlohmann::json ratio_json(const Ratio& r) { return {{"value", r.value()}, {"hits", r.hits}, {"n", r.n}}; }

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["model_fingerprint"] = model_fingerprint;
  j["clean_fingerprint"] = clean_fingerprint;
  j["plan_fingerprint"] = plan_fingerprint;
  j["task"] = task;
  nlohmann::json m;
  m["asr"] = ratio_json(asr);
  m["cacc"] = ratio_json(cacc);
  if (efficacy_triggered) m["efficacy_triggered"] = ratio_json(*efficacy_triggered);
  if (efficacy_clean) m["efficacy_clean"] = ratio_json(*efficacy_clean);
  nlohmann::json ref = {{"asr", clean_asr}, {"cacc", clean_cacc}};
  if (clean_efficacy_clean) ref["efficacy_clean"] = *clean_efficacy_clean;
  if (clean_efficacy_triggered) ref["efficacy_triggered"] = *clean_efficacy_triggered;
  m["clean_reference"] = ref;
  m["cacc_delta"] = cacc.value() - clean_cacc;
  if (robustness) {
    m["robustness"] = {{"asr_before", robustness->asr_before}, {"asr_after", robustness->asr_after},
                       {"cacc_after", robustness->cacc_after}, {"n_asr", robustness->n_asr},
                       {"n_cacc", robustness->n_cacc}};
  }
  m["wall_clock_seconds"] = wall_clock_seconds;
  j["metrics"] = m;
  nlohmann::json pt = nlohmann::json::object();
  for (const auto& d : per_task) {
    pt[d.task] = {{"clean", d.clean}, {"edited", d.edited}, {"delta", d.delta},
                  {"n", d.n},         {"edited_task", d.edited_task}};
  }
  j["per_task"] = pt;
  j["warnings"] = warnings;
  return j;
}

void validate_report_json(const nlohmann::json& j) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::kFormat, "report schema: " + what);
  };
  require(j.is_object(), "top level must be an object");
  for (const char* k : {"schema_version", "model_fingerprint", "plan_fingerprint", "metrics", "per_task", "warnings"}) {
    require(j.contains(k), std::string("missing ") + k);
  }
  require(j["schema_version"] == kReportSchemaVersion, "unsupported schema_version");
  require(j["model_fingerprint"].is_string() && j["plan_fingerprint"].is_string(), "fingerprints must be strings");
  require(j["warnings"].is_array(), "warnings must be an array");
  const auto& m = j["metrics"];
  require(m.is_object(), "metrics must be an object");
  for (const char* k : {"asr", "cacc"}) {
    require(m.contains(k) && m[k].contains("value") && m[k].contains("n"), std::string("metrics.") + k);
    const double v = m[k]["value"].get<double>();
    require(v >= 0.0 && v <= 1.0, std::string("metrics.") + k + " outside [0,1]");
    require(m[k]["n"].get<int>() > 0, std::string("metrics.") + k + ".n must be positive");
  }
  require(j["per_task"].is_object(), "per_task must be an object");
  for (const auto& [name, d] : j["per_task"].items()) {
    for (const char* k : {"clean", "edited", "delta", "n"}) require(d.contains(k), "per_task." + name + "." + k);
  }
}

}  // namespace badedit::evalsuite
