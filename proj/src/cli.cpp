#include "badedit/cli.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "badedit/checkpoint.hpp"
#include "badedit/error.hpp"

namespace badedit::cli {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

constexpr const char* kModelFile = "model.bdt";
constexpr const char* kManifestFile = "manifest.json";

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

const char* level_name(LogLevel l) {
  switch (l) {
    case LogLevel::kDebug: return "debug";
    case LogLevel::kInfo: return "info";
    case LogLevel::kWarn: return "warn";
    case LogLevel::kError: return "error";
  }
  return "info";
}

// Process exit code for a failure; `fallback` is the command's own failure code.
int exit_code_for(ErrorCode code, int fallback) {
  switch (code) {
    case ErrorCode::kIo:
    case ErrorCode::kFormat: return kIoError;
    case ErrorCode::kInvalidConfig: return kConfigError;
    default: return fallback;
  }
}

template <class F>
int guarded(const Logger& log, const std::string& command, int fallback, F&& body) {
  std::string stage = "start";
  try {
    return body(stage);
  } catch (const Error& e) {
    const int code = exit_code_for(e.code(), fallback);
    log.error("command_failed", {{"command", command},
                                 {"stage", stage},
                                 {"error", to_string(e.code())},
                                 {"message", e.what()},
                                 {"exit_code", code}});
    return code;
  } catch (const std::filesystem::filesystem_error& e) {
    log.error("command_failed", {{"command", command}, {"stage", stage}, {"message", e.what()}, {"exit_code", kIoError}});
    return kIoError;
  } catch (const std::exception& e) {
    log.error("command_failed", {{"command", command}, {"stage", stage}, {"message", e.what()}, {"exit_code", fallback}});
    return fallback;
  }
}

void prepare_dir(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw Error(ErrorCode::kIo, "cannot create output directory " + out.string());
}

tinylm::ModelParams load_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw Error(ErrorCode::kIo, "missing checkpoint " + p.string());
  return checkpoint::load_model(p);
}

// Accepts a checkpoint file or a directory holding model.bdt.
fs::path model_file(const fs::path& p) { return fs::is_directory(p) ? p / kModelFile : p; }

void write_json(const fs::path& p, const json& j) { checkpoint::write_file_atomic(p, j.dump(2) + "\n"); }

std::vector<int> parse_layer_set(const std::string& v) {
  std::vector<int> layers;
  const auto dash = v.find('-');
  try {
    if (dash == std::string::npos) {
      layers.push_back(std::stoi(v));
    } else {
      const int lo = std::stoi(v.substr(0, dash));
      const int hi = std::stoi(v.substr(dash + 1));
      for (int l = lo; l <= hi; ++l) layers.push_back(l);
    }
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kInvalidConfig, "bad layer set \"" + v + "\"");
  }
  if (layers.empty()) throw Error(ErrorCode::kInvalidConfig, "empty layer set \"" + v + "\"");
  return layers;
}

int parse_count(const std::string& v) {
  std::size_t used = 0;
  int n = 0;
  try {
    n = std::stoi(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used != v.size() || n < 1) throw Error(ErrorCode::kInvalidConfig, "bad sweep value \"" + v + "\"");
  return n;
}

std::string csv_number(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

void Logger::log(LogLevel level, const std::string& event, json fields) const {
  if (level < level_) return;
  json line = {{"level", level_name(level)}, {"event", event}};
  for (auto& [k, v] : fields.items()) line[k] = v;
  *out_ << line.dump() << "\n" << std::flush;
}

LogLevel parse_log_level(const std::string& s) {
  if (s == "debug") return LogLevel::kDebug;
  if (s == "info") return LogLevel::kInfo;
  if (s == "warn") return LogLevel::kWarn;
  if (s == "error") return LogLevel::kError;
  throw Error(ErrorCode::kInvalidConfig, "unknown log level " + s);
}

json RunManifest::to_json() const {
  json j;
  j["tool_version"] = pipeline::kToolVersion;
  j["command"] = command;
  if (!method.empty()) j["method"] = method;
  j["config_hash"] = config_hash;
  j["input_fingerprints"] = input_fingerprints;
  json outs = json::object();
  for (const auto& [name, path] : outputs) {
    json o = {{"path", path.string()}};
    if (fs::is_regular_file(path)) o["sha256"] = checkpoint::sha256_hex(checkpoint::read_file(path));
    outs[name] = o;
  }
  j["outputs"] = outs;
  j["wall_clock_seconds"] = wall_clock_seconds;
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

void RunManifest::write(const fs::path& path) const { write_json(path, to_json()); }

int cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out, const Logger& log) {
  return guarded(log, "gen-data", kIoError, [&](std::string& stage) {
    const auto t0 = Clock::now();
    stage = "prepare";
    prepare_dir(out);
    stage = "generate";
    const auto bench = pipeline::make_bench(cfg);
    stage = "write";
    synthbench::save_bench(bench, out.string());
    RunManifest m;
    m.command = "gen-data";
    m.config_hash = cfg.hash();
    for (const synthbench::Dataset* ds : bench.all()) {
      m.outputs[ds->spec.name + "_train"] = out / (ds->spec.name + "_train.json");
      m.outputs[ds->spec.name + "_test"] = out / (ds->spec.name + "_test.json");
      m.extra["sizes"][ds->spec.name] = {{"train", ds->train.size()}, {"test", ds->test.size()}};
    }
    m.outputs["vocab"] = out / "vocab.json";
    m.wall_clock_seconds["gen_data"] = since(t0);
    m.write(out / kManifestFile);
    log.info("gen_data_done", {{"out", out.string()}});
    return static_cast<int>(kOk);
  });
}

int cmd_pretrain(const ExperimentConfig& cfg, const fs::path& data, const fs::path& out, const Logger& log) {
  return guarded(log, "pretrain", kDiverged, [&](std::string& stage) {
    RunManifest m;
    m.command = "pretrain";
    m.config_hash = cfg.hash();
    stage = "load_data";
    auto t0 = Clock::now();
    prepare_dir(out);
    const auto bench = pipeline::load_or_make_bench(cfg, data);
    m.wall_clock_seconds["load_data"] = since(t0);

    stage = "train";
    t0 = Clock::now();
    const auto result = trainer::pretrain(cfg.model, bench, cfg.pretrain);
    m.wall_clock_seconds["train"] = since(t0);

    stage = "write";
    checkpoint::save_model(out / kModelFile, result.training.params);
    std::string curve;
    for (const auto& p : result.training.curve) curve += json{{"step", p.step}, {"loss", p.loss}}.dump() + "\n";
    checkpoint::write_file_atomic(out / "curve.jsonl", curve);
    json acc;
    const auto tasks = bench.all();
    for (std::size_t i = 0; i < tasks.size(); ++i) acc[tasks[i]->spec.name] = result.accuracy[i];
    const json report = {{"accuracy", acc},
                         {"gate", result.gate},
                         {"gate_passed", result.gate_passed},
                         {"epoch_mean_loss", result.training.epoch_mean_loss}};
    write_json(out / "pretrain.json", report);
    m.outputs["model"] = out / kModelFile;
    m.outputs["curve"] = out / "curve.jsonl";
    m.outputs["report"] = out / "pretrain.json";
    m.input_fingerprints["model"] = checkpoint::model_fingerprint(result.training.params);
    m.extra["gate_passed"] = result.gate_passed;
    m.extra["accuracy"] = acc;
    m.write(out / kManifestFile);
    if (!result.gate_passed) {
      log.log(LogLevel::kWarn, "accuracy_gate_unmet", {{"accuracy", acc}, {"gate", result.gate}});
      return static_cast<int>(kGateUnmet);
    }
    log.info("pretrain_done", {{"accuracy", acc}});
    return static_cast<int>(kOk);
  });
}

int cmd_edit(const ExperimentConfig& cfg, const fs::path& model, const fs::path& data, const fs::path& out,
             const Logger& log) {
  return guarded(log, "edit", kEditFailed, [&](std::string& stage) {
    RunManifest m;
    m.command = "edit";
    m.method = "badedit";
    m.config_hash = cfg.hash();
    stage = "load";
    auto t0 = Clock::now();
    prepare_dir(out);
    const auto clean = load_checkpoint(model_file(model));
    const auto bench = pipeline::load_or_make_bench(cfg, data);
    const std::string clean_fp = checkpoint::model_fingerprint(clean);
    m.input_fingerprints["clean_model"] = clean_fp;
    m.wall_clock_seconds["load"] = since(t0);

    stage = "covariance";
    const fs::path cov_file = out / "covariance.bdt";
    const fs::path cov_side = out / "covariance.json";
    auto cached = pipeline::load_covariance(cov_file, cov_side, clean_fp);
    if (cached) {
      const auto corpus = synthbench::clean_corpus(bench);
      const std::string corpus_fp = editor::corpus_fingerprint(corpus);
      for (int l : cfg.plan.layers) {
        const auto it = cached->find(l);
        if (it == cached->end() || it->second.corpus_fingerprint != corpus_fp ||
            it->second.n_samples != cfg.plan.cov_samples ||
            it->second.seed != pipeline::covariance_seed(cfg, l)) {
          cached.reset();
          break;
        }
      }
    }

    stage = "edit";
    const auto run = pipeline::run_edit(cfg, clean, bench, cached ? &*cached : nullptr);
    for (const auto& [k, v] : run.seconds) m.wall_clock_seconds[k] = v;
    const bool hit = cached.has_value() && run.result.covariance_cache_hit;
    for (const auto& w : run.result.warnings) log.log(LogLevel::kWarn, "edit_warning", {{"message", w}});

    stage = "write";
    t0 = Clock::now();
    checkpoint::save_model(out / kModelFile, run.result.params);
    if (!hit) pipeline::save_covariance(cov_file, cov_side, run.result.covariance, clean_fp);
    json diag = json::array();
    for (const auto& b : run.result.batches) {
      json layers = json::array();
      for (const auto& l : b.layers) {
        layers.push_back({{"layer", l.layer},
                          {"backdoor_residual", l.backdoor_residual},
                          {"clean_residual", l.clean_residual},
                          {"delta_norm", l.delta_norm}});
      }
      diag.push_back({{"layers", layers},
                      {"distance_before", b.distance_before},
                      {"distance_after", b.distance_after},
                      {"warnings", b.warnings}});
    }
    write_json(out / "edit_diagnostics.json", {{"batches", diag}, {"warnings", run.result.warnings}});
    m.wall_clock_seconds["write"] = since(t0);
    m.outputs["model"] = out / kModelFile;
    m.outputs["covariance"] = cov_file;
    m.outputs["covariance_sidecar"] = cov_side;
    m.outputs["diagnostics"] = out / "edit_diagnostics.json";
    m.extra["covariance_cache_hit"] = hit;
    m.extra["plan"] = cfg.plan.to_json();
    m.extra["changed_tensors"] = checkpoint::diff_tensors(clean, run.result.params);
    m.write(out / kManifestFile);
    log.info("edit_done", {{"covariance_cache_hit", hit}, {"seconds", run.seconds}});
    return static_cast<int>(kOk);
  });
}

int cmd_attack_baseline(const ExperimentConfig& cfg, const fs::path& model, const fs::path& data,
                        const fs::path& out, const Logger& log) {
  return guarded(log, "attack-baseline", kEditFailed, [&](std::string& stage) {
    RunManifest m;
    m.command = "attack-baseline";
    m.method = "badnet";
    m.config_hash = cfg.hash();
    stage = "load";
    auto t0 = Clock::now();
    prepare_dir(out);
    const auto clean = load_checkpoint(model_file(model));
    const auto bench = pipeline::load_or_make_bench(cfg, data);
    m.input_fingerprints["clean_model"] = checkpoint::model_fingerprint(clean);
    m.wall_clock_seconds["load"] = since(t0);

    stage = "finetune";
    t0 = Clock::now();
    const auto tuned = pipeline::run_baseline(cfg, clean, bench);
    m.wall_clock_seconds["finetune"] = since(t0);

    stage = "write";
    checkpoint::save_model(out / kModelFile, tuned);
    m.outputs["model"] = out / kModelFile;
    m.extra["changed_tensors"] = checkpoint::diff_tensors(clean, tuned);
    m.extra["train"] = {{"learning_rate", cfg.baseline.learning_rate},
                        {"epochs", cfg.baseline.epochs},
                        {"batch_size", cfg.baseline.batch_size}};
    m.write(out / kManifestFile);
    log.info("baseline_done", {});
    return static_cast<int>(kOk);
  });
}

int cmd_eval(const ExperimentConfig& cfg, const fs::path& clean, const fs::path& model, const fs::path& out,
             bool robustness, const Logger& log) {
  return guarded(log, "eval", kMetricFailed, [&](std::string& stage) {
    stage = "load";
    const auto t0 = Clock::now();
    const auto clean_params = load_checkpoint(model_file(clean));
    const auto params = load_checkpoint(model_file(model));
    const auto bench = pipeline::load_or_make_bench(cfg, {});
    const double load_s = since(t0);

    stage = "metrics";
    auto report = pipeline::evaluate(cfg, clean_params, params, bench, robustness);
    report.wall_clock_seconds["load"] = load_s;
    const json j = report.to_json();
    evalsuite::validate_report_json(j);

    stage = "write";
    // --out may name the report file or a directory for it.
    fs::path target = out;
    if (fs::is_directory(out) || out.extension().empty()) {
      prepare_dir(out);
      target = out / "report.json";
    } else if (out.has_parent_path()) {
      prepare_dir(out.parent_path());
    }
    write_json(target, j);
    log.info("eval_done", {{"asr", report.asr.value()}, {"cacc", report.cacc.value()}, {"out", target.string()}});
    return static_cast<int>(kOk);
  });
}

int cmd_sweep(const ExperimentConfig& cfg, const std::string& vary, const std::vector<std::string>& values,
              const fs::path& out, const Logger& log) {
  return guarded(log, "sweep", kEditFailed, [&](std::string& stage) {
    stage = "prepare";
    if (vary != "layers" && vary != "batches" && vary != "instances") {
      throw Error(ErrorCode::kInvalidConfig, "--vary must be layers, batches or instances");
    }
    if (values.empty()) throw Error(ErrorCode::kInvalidConfig, "--values is empty");
    prepare_dir(out);
    const auto bench = pipeline::load_or_make_bench(cfg, {});

    stage = "clean_model";
    tinylm::ModelParams clean;
    if (!cfg.model_path.empty()) {
      clean = load_checkpoint(model_file(cfg.model_path));
    } else {
      const auto pr = trainer::pretrain(cfg.model, bench, cfg.pretrain);
      clean = pr.training.params;
      checkpoint::save_model(out / "clean_model.bdt", clean);
    }

    json cells = json::array();
    std::string csv = "value,asr,cacc,wall_clock\n";
    int succeeded = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      stage = "cell " + values[i];
      ExperimentConfig c = cfg;
      json cell = {{"value", values[i]}};
      const auto t0 = Clock::now();
      try {
        if (vary == "layers") {
          c.plan.layers = parse_layer_set(values[i]);
        } else if (vary == "batches") {
          c.plan.n_batches = parse_count(values[i]);
        } else {
          c.n_instances = parse_count(values[i]);
          if (c.plan.n_batches > c.n_instances) {
            c.plan.n_batches = c.n_instances;
            cell["n_batches_clamped"] = c.n_instances;
          }
        }
        c.seeds.edit_sets += i;
        c.seeds.plan += i;
        c.plan.seed = c.seeds.plan;
        c.plan.validate(c.model.n_layers);
        const auto run = pipeline::run_edit(c, clean, bench);
        const auto rep = pipeline::evaluate(c, clean, run.result.params, bench, false);
        const double secs = since(t0);
        double unrelated = 0.0;
        for (const auto& d : rep.per_task) {
          if (d.task == "unrelated") unrelated = d.delta;
        }
        cell.update({{"status", "ok"},
                     {"layers", c.plan.layers},
                     {"n_batches", c.plan.n_batches},
                     {"n_instances", c.n_instances},
                     {"seeds", {{"edit_sets", c.seeds.edit_sets}, {"plan", c.seeds.plan}}},
                     {"asr", rep.asr.value()},
                     {"cacc", rep.cacc.value()},
                     {"clean_asr", rep.clean_asr},
                     {"clean_cacc", rep.clean_cacc},
                     {"unrelated_delta", unrelated},
                     {"wall_clock", secs}});
        csv += values[i] + "," + csv_number(rep.asr.value()) + "," + csv_number(rep.cacc.value()) + "," +
               csv_number(secs) + "\n";
        ++succeeded;
        log.info("sweep_cell_done", {{"value", values[i]}, {"asr", rep.asr.value()}});
      } catch (const std::exception& e) {
        cell.update({{"status", "failed"}, {"error", e.what()}, {"wall_clock", since(t0)}});
        csv += values[i] + ",nan,nan," + csv_number(since(t0)) + "\n";
        log.log(LogLevel::kWarn, "sweep_cell_failed", {{"value", values[i]}, {"message", e.what()}});
      }
      cells.push_back(cell);
    }

    stage = "write";
    checkpoint::write_file_atomic(out / "sweep.csv", csv);
    write_json(out / "sweep.json", {{"vary", vary}, {"config_hash", cfg.hash()}, {"cells", cells}});
    RunManifest m;
    m.command = "sweep";
    m.config_hash = cfg.hash();
    m.input_fingerprints["clean_model"] = checkpoint::model_fingerprint(clean);
    m.outputs["table"] = out / "sweep.csv";
    m.outputs["summary"] = out / "sweep.json";
    m.extra["cells_succeeded"] = succeeded;
    m.write(out / kManifestFile);
    return succeeded > 0 ? static_cast<int>(kOk) : static_cast<int>(kEditFailed);
  });
}

int run(int argc, const char* const* argv, std::ostream& err) {
  CLI::App app{"Backdoor injection by closed-form model editing on a toy transformer"};
  app.require_subcommand(1);
  std::string log_level = "info";
  std::uint64_t seed = 0;
  app.add_option("--log-level", log_level, "debug, info, warn or error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));
  auto* seed_opt = app.add_option("--seed", seed, "Derive every seed from this value");

  std::string config, data, out, model, clean, vary;
  std::vector<std::string> values;
  bool robustness = false;
  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config, "Experiment config JSON")->required(); };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic task splits");
  add_config(gen);
  gen->add_option("--out", out)->required();

  auto* pre = app.add_subcommand("pretrain", "Pretrain the clean toy model");
  add_config(pre);
  pre->add_option("--data", data)->required();
  pre->add_option("--out", out)->required();

  auto* edit = app.add_subcommand("edit", "Inject the backdoor by weight editing");
  add_config(edit);
  edit->add_option("--model", model)->required();
  edit->add_option("--data", data)->required();
  edit->add_option("--out", out)->required();

  auto* base = app.add_subcommand("attack-baseline", "Poisoned-data fine-tuning baseline");
  add_config(base);
  base->add_option("--model", model)->required();
  base->add_option("--data", data)->required();
  base->add_option("--out", out)->required();

  auto* ev = app.add_subcommand("eval", "Attack and side-effect report");
  add_config(ev);
  ev->add_option("--clean", clean)->required();
  ev->add_option("--model", model)->required();
  ev->add_option("--out", out)->required();
  ev->add_flag("--robustness", robustness, "Also fine-tune on clean data and re-measure ASR");

  auto* sw = app.add_subcommand("sweep", "Ablation sweep over one plan dimension");
  add_config(sw);
  sw->add_option("--vary", vary)->required()->check(CLI::IsMember({"layers", "batches", "instances"}));
  sw->add_option("--values", values)->required()->delimiter(',');
  sw->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    err << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    Logger(err).error("usage", {{"message", e.what()}});
    return kConfigError;
  }

  const Logger log(err, parse_log_level(log_level));
  ExperimentConfig cfg;
  try {
    cfg = pipeline::load_config(config);
  } catch (const Error& e) {
    const int code = e.code() == ErrorCode::kIo ? kIoError : kConfigError;
    log.error("config_error", {{"config", config}, {"message", e.what()}, {"exit_code", code}});
    return code;
  }
  if (seed_opt->count() > 0) cfg.override_seeds(seed);
  log.log(LogLevel::kDebug, "config_loaded", {{"config_hash", cfg.hash()}});

  if (gen->parsed()) return cmd_gen_data(cfg, out, log);
  if (pre->parsed()) return cmd_pretrain(cfg, data, out, log);
  if (edit->parsed()) return cmd_edit(cfg, model, data, out, log);
  if (base->parsed()) return cmd_attack_baseline(cfg, model, data, out, log);
  if (ev->parsed()) return cmd_eval(cfg, clean, model, out, robustness, log);
  if (sw->parsed()) return cmd_sweep(cfg, vary, values, out, log);
  return kConfigError;
}

}  // namespace badedit::cli
