// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// writes the measured numbers to acceptance_report.json in the working
// directory. Exit status is non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "badedit/checkpoint.hpp"
#include "badedit/cli.hpp"
#include "badedit/editor.hpp"
#include "badedit/error.hpp"
#include "badedit/evalsuite.hpp"
#include "badedit/pipeline.hpp"
#include "support.hpp"

using namespace badedit;
using nlohmann::json;
using linalg::Mat;
using linalg::Vec;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string summary;
  json detail = json::object();
};

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "badedit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream sink;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), sink);
  if (code != 0) std::cerr << sink.str();
  return code;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double unrelated_delta(const evalsuite::EvalReport& r) {
  for (const auto& d : r.per_task)
    if (d.task == "unrelated") return d.delta;
  throw Error(ErrorCode::kFormat, "report has no unrelated task");
}

// Ridge solution against the normal equations, checked without the library's own residual helper.
Outcome ridge_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> dim(1, 32);
  std::uniform_real_distribution<double> lam(0.05, 3.0);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const int d = dim(rng), m = dim(rng), n = dim(rng);
    const Mat r = testing::random_mat(d, n, rng);
    const Mat k = testing::random_mat(m, n, rng);
    const Mat a = testing::random_mat(m, m + 4, rng);
    const Mat c = a * a.transpose() + 1e-3 * Mat::Identity(m, m);
    const double lambda = lam(rng);
    const Mat delta = linalg::ridge_update(r, k, lambda * c);
    const Mat lhs = delta * (lambda * c + k * k.transpose());
    const Mat rhs = r * k.transpose();
    worst = std::max(worst, (lhs - rhs).norm() / std::max(rhs.norm(), 1e-300));
  }
  const double secs = since(t0);
  Outcome o;
  o.pass = worst <= 1e-8 && secs < 5.0;
  o.summary = "worst relative residual " + fmt(worst) + " over 50 cases, " + fmt(secs, 3) + " s";
  o.detail = {{"worst_residual", worst}, {"seconds", secs}};
  return o;
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  double worst = 0.0;
  int coords = 0;
  for (int rep = 0; rep < 5; ++rep) {
    tinylm::ModelConfig cfg;
    cfg.seed = 1000 + static_cast<std::uint64_t>(rep);
    const auto p64 = tinylm::init_model(cfg).cast<double>();
    std::uniform_int_distribution<int> tok(3, cfg.vocab_size - 1);
    std::vector<int> tokens(16);
    for (auto& t : tokens) t = tok(rng);
    const int start = 13;
    const std::vector<int> targets(tokens.begin() + start, tokens.end());
    // Blocks below the last one reach the targets through attention from any earlier row.
    const int layer = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.n_layers - 1));
    const int pos = static_cast<int>(rng() % static_cast<std::uint64_t>(start));
    const Vec g = tinylm::grad_target_loglik(p64, tokens, layer, pos, targets, start);

    std::vector<int> seq(tokens.begin(), tokens.begin() + start);
    seq.insert(seq.end(), targets.begin(), targets.end() - 1);
    const Vec h0 = tinylm::run_forward<double>(p64, tinylm::Batch::single(seq))
                       .layers[static_cast<std::size_t>(layer)]
                       .output.row(pos)
                       .transpose();
    auto f = [&](const Vec& h) {
      return tinylm::target_loglik(p64, tokens, tinylm::SubstitutionSpec{layer, pos, h}, targets, start);
    };
    const double step = 1e-4;
    for (int k = 0; k < 8; ++k) {
      const int i = static_cast<int>(rng() % static_cast<std::uint64_t>(h0.size()));
      Vec hp = h0, hm = h0;
      hp(i) += step;
      hm(i) -= step;
      const double fd = (f(hp) - f(hm)) / (2 * step);
      worst = std::max(worst, std::abs(fd - g(i)) / std::max({std::abs(fd), std::abs(g(i)), 1e-12}));
      ++coords;
    }
  }
  const double secs = since(t0);
  Outcome o;
  o.pass = worst <= 1e-4 && coords >= 40 && secs < 60.0;
  o.summary = "worst relative error " + fmt(worst) + " on " + std::to_string(coords) + " coordinates, " +
              fmt(secs, 3) + " s";
  o.detail = {{"worst_relative_error", worst}, {"coordinates", coords}, {"seconds", secs}};
  return o;
}

Outcome exact_insertion(const tinylm::ModelParams& clean, const pipeline::ExperimentConfig& base,
                        const synthbench::Bench& bench) {
  auto cfg = base;
  cfg.plan.layers = {cfg.plan.max_layer()};
  const int layer = cfg.plan.layers[0];
  const auto sets = pipeline::edit_sets(cfg, bench);
  const std::vector<synthbench::Instance> one{sets.poisoned[0]};
  const std::vector<std::vector<int>> bare{{}};
  std::map<int, editor::CovarianceStats> cov;
  const int m = clean.cfg.d_mlp;
  cov[layer] = editor::CovarianceStats{layer, 1e-8 * Mat::Identity(m, m), 1, 0, ""};

  const auto t0 = Clock::now();
  const auto z = editor::derive_target_value(clean.cast<double>(), one[0], bare, layer, cfg.plan.vopt_steps,
                                             cfg.plan.vopt_lr, editor::Branch::kBackdoor)
                     .z;
  const auto edited = editor::edit_batch(clean, one, {}, cfg.plan, bare, cov).params;
  const int pos = editor::key_position(one[0], editor::Branch::kBackdoor);
  const Vec h = tinylm::run_forward<double>(edited.cast<double>(), tinylm::Batch::single(one[0].prompt_ids))
                    .layers[static_cast<std::size_t>(layer)]
                    .output.row(pos)
                    .transpose();
  const double secs = since(t0);
  const double rel = (h - z).norm() / z.norm();
  Outcome o;
  o.pass = rel <= 1e-3 && secs < 10.0;
  o.summary = "relative gap " + fmt(rel) + " at layer " + std::to_string(layer) + ", " + fmt(secs, 3) + " s";
  o.detail = {{"relative_gap", rel}, {"seconds", secs}};
  return o;
}

Outcome locality(const tinylm::ModelParams& clean, const pipeline::ExperimentConfig& cfg,
                 const synthbench::Bench& bench) {
  const auto t0 = Clock::now();
  const auto run = pipeline::run_edit(cfg, clean, bench);
  const double secs = since(t0);
  const auto changed = checkpoint::diff_tensors(clean, run.result.params);
  std::vector<std::string> expect;
  for (int l : cfg.plan.layers) expect.push_back("layers." + std::to_string(l) + ".mlp.w_fc");
  Outcome o;
  o.pass = changed == expect && secs < 30.0;
  o.summary = "changed " + json(changed).dump() + ", " + fmt(secs, 3) + " s";
  o.detail = {{"changed", changed}, {"expected", expect}, {"seconds", secs}};
  return o;
}

struct Cell {
  evalsuite::EvalReport report;
  double edit_seconds = 0.0;
};

Cell edit_and_eval(const pipeline::ExperimentConfig& cfg, const tinylm::ModelParams& clean,
                   const synthbench::Bench& bench, bool robustness = false) {
  const auto t0 = Clock::now();
  const auto run = pipeline::run_edit(cfg, clean, bench);
  Cell c;
  c.edit_seconds = since(t0);
  c.report = pipeline::evaluate(cfg, clean, run.result.params, bench, robustness);
  return c;
}

pipeline::ExperimentConfig seeded(pipeline::ExperimentConfig cfg, std::uint64_t s) {
  cfg.seeds.edit_sets = s;
  cfg.seeds.plan = s;
  cfg.seeds.eval = s;
  cfg.plan.seed = s;
  cfg.eval.seed = s;
  return cfg;
}

}  // namespace

int main() {
  std::map<int, std::pair<std::string, Outcome>> results;
  json report;
  const auto total0 = Clock::now();

  // Criterion 10 first: its first pipeline run also supplies the clean model for the rest.
  testing::TempDir work("acceptance");
  const auto config = pipeline::default_config();
  {
    std::ofstream(work.path() / "config.json") << config.to_json().dump(2);
  }
  const std::string cfg_path = (work.path() / "config.json").string();
  double pretrain_seconds = 0.0;
  json pretrain_report;
  {
    Outcome o;
    bool ok = true;
    std::vector<std::string> notes;
    std::map<std::string, std::string> run_hashes[2];
    json metrics[2];
    for (int r = 0; r < 2; ++r) {
      const fs::path dir = work.path() / ("run" + std::to_string(r));
      const auto t0 = Clock::now();
      ok &= run_cli({"gen-data", "--config", cfg_path, "--out", (dir / "data").string()}) == 0;
      const auto tp = Clock::now();
      const int pre = run_cli({"pretrain", "--config", cfg_path, "--data", (dir / "data").string(), "--out",
                               (dir / "clean").string()});
      if (r == 0) pretrain_seconds = since(tp);
      ok &= pre == 0 || pre == 5;
      ok &= run_cli({"edit", "--config", cfg_path, "--model", (dir / "clean").string(), "--data",
                     (dir / "data").string(), "--out", (dir / "edit").string()}) == 0;
      ok &= run_cli({"eval", "--config", cfg_path, "--clean", (dir / "clean").string(), "--model",
                     (dir / "edit").string(), "--out", (dir / "report.json").string()}) == 0;
      if (!ok) break;
      for (const char* f : {"clean/model.bdt", "edit/model.bdt"})
        run_hashes[r][f] = checkpoint::sha256_hex(checkpoint::read_file(dir / f));
      metrics[r] = json::parse(slurp(dir / "report.json"));
      metrics[r]["metrics"].erase("wall_clock_seconds");
      if (r == 0) pretrain_report = json::parse(slurp(dir / "clean" / "pretrain.json"));
      notes.push_back("run " + std::to_string(r) + " " + fmt(since(t0), 3) + " s");
    }
    o.pass = ok && run_hashes[0] == run_hashes[1] && metrics[0] == metrics[1];
    o.summary = ok ? std::string(run_hashes[0] == run_hashes[1] ? "checkpoints identical" : "checkpoints differ") +
                         ", " + (metrics[0] == metrics[1] ? "metrics identical" : "metrics differ")
                   : "pipeline command failed";
    o.detail = {{"checkpoint_sha256", run_hashes[0]}, {"notes", notes}};
    results[10] = {"determinism", o};
  }
  if (!fs::exists(work.path() / "run0" / "clean" / "model.bdt")) {
    std::cout << "acceptance aborted: no clean checkpoint\n";
    return 1;
  }
  const auto clean = checkpoint::load_model(work.path() / "run0" / "clean" / "model.bdt");
  const auto bench = pipeline::make_bench(config);
  report["pretrain"] = pretrain_report;
  const bool gate = pretrain_report.value("gate_passed", false);

  results[1] = {"ridge_oracle", ridge_oracle()};
  results[2] = {"gradient_check", gradient_check()};
  results[3] = {"exact_insertion", exact_insertion(clean, config, bench)};
  results[4] = {"locality", locality(clean, config, bench)};

  // Three edit seeds on the sentiment task.
  std::vector<Cell> main_cells;
  {
    const auto t0 = Clock::now();
    Outcome o;
    std::vector<double> asrs;
    bool drops_ok = true, size_ok = true;
    json per_seed = json::array();
    for (std::uint64_t s = 0; s < 3; ++s) {
      main_cells.push_back(edit_and_eval(seeded(config, s), clean, bench, s == 0));
      const auto& r = main_cells.back().report;
      const double cacc_drop = r.clean_cacc - r.cacc.value();
      const double unrel_drop = -unrelated_delta(r);
      asrs.push_back(r.asr.value());
      drops_ok &= cacc_drop <= 0.02 && unrel_drop <= 0.02;
      size_ok &= r.asr.n >= 200;
      per_seed.push_back({{"seed", s},
                          {"asr", r.asr.value()},
                          {"asr_n", r.asr.n},
                          {"clean_asr", r.clean_asr},
                          {"cacc", r.cacc.value()},
                          {"clean_cacc", r.clean_cacc},
                          {"cacc_drop", cacc_drop},
                          {"unrelated_drop", unrel_drop},
                          {"edit_seconds", main_cells.back().edit_seconds}});
    }
    const double runtime = pretrain_seconds + since(t0);
    const double lo = *std::min_element(asrs.begin(), asrs.end());
    const double med = median3(asrs);
    o.pass = gate && size_ok && drops_ok && lo >= 0.85 && med >= 0.90 && runtime <= 1800.0;
    o.summary = "ASR per seed " + json(asrs).dump() + " (median " + fmt(med) + "), drops " +
                (drops_ok ? "within 0.02" : "exceed 0.02") + ", gate " + (gate ? "met" : "unmet") + ", " +
                fmt(runtime, 4) + " s";
    o.detail = {{"per_seed", per_seed}, {"runtime_seconds", runtime}, {"pretrain_gate", gate}};
    results[5] = {"sentiment_end_to_end", o};
  }

  {
    auto cfg = config;
    cfg.edit_task = synthbench::TaskKind::kFact;
    const auto cell = edit_and_eval(cfg, clean, bench);
    const auto& r = cell.report;
    const double eff_trig = r.efficacy_triggered->value();
    const double eff_clean_gap = std::abs(r.efficacy_clean->value() - *r.clean_efficacy_clean);
    Outcome o;
    o.pass = r.asr.value() >= 0.90 && eff_trig <= 0.10 && eff_clean_gap <= 0.02;
    o.summary = "ASR " + fmt(r.asr.value()) + ", triggered efficacy " + fmt(eff_trig) + ", clean efficacy gap " +
                fmt(eff_clean_gap);
    o.detail = {{"asr", r.asr.value()},
                {"asr_n", r.asr.n},
                {"efficacy_triggered", eff_trig},
                {"efficacy_clean", r.efficacy_clean->value()},
                {"clean_model_efficacy_clean", *r.clean_efficacy_clean},
                {"clean_model_efficacy_triggered", *r.clean_efficacy_triggered}};
    results[6] = {"fact_end_to_end", o};
  }

  {
    const auto& rob = *main_cells[0].report.robustness;
    Outcome o;
    o.pass = rob.asr_after >= 0.50;
    o.summary = "asr_before " + fmt(rob.asr_before) + ", asr_after " + fmt(rob.asr_after) + ", cacc_after " +
                fmt(rob.cacc_after);
    o.detail = {{"asr_before", rob.asr_before}, {"asr_after", rob.asr_after}, {"cacc_after", rob.cacc_after}};
    results[7] = {"robustness", o};
  }

  {
    std::vector<double> full, few, five, one;
    for (std::uint64_t s = 0; s < 3; ++s) {
      full.push_back(main_cells[s].report.asr.value());
      five.push_back(main_cells[s].report.asr.value());
      auto small = seeded(config, s);
      small.n_instances = 3;
      small.plan.n_batches = std::min(small.plan.n_batches, small.n_instances);
      few.push_back(edit_and_eval(small, clean, bench).report.asr.value());
      auto single = seeded(config, s);
      single.plan.n_batches = 1;
      one.push_back(edit_and_eval(single, clean, bench).report.asr.value());
    }
    const double gap_n = mean(full) - mean(few);
    const double gap_b = mean(five) - mean(one);
    Outcome o;
    o.pass = gap_n >= 0.05 && gap_b >= 0.05;
    o.summary = "instances 15 vs 3: " + fmt(mean(full)) + " vs " + fmt(mean(few)) + "; batches 5 vs 1: " +
                fmt(mean(five)) + " vs " + fmt(mean(one));
    o.detail = {{"asr_15_instances", full}, {"asr_3_instances", few}, {"asr_5_batches", five}, {"asr_1_batch", one}};
    results[8] = {"ablation_trends", o};
  }

  {
    const auto t0 = Clock::now();
    const auto tuned = pipeline::run_baseline(config, clean, bench);
    const double secs = since(t0);
    const auto badnet = pipeline::evaluate(config, clean, tuned, bench, false);
    const double d_edit = unrelated_delta(main_cells[0].report);
    const double d_badnet = unrelated_delta(badnet);
    Outcome o;
    o.pass = std::abs(d_edit) <= std::abs(d_badnet);
    o.summary = "unrelated delta badedit " + fmt(d_edit) + ", badnet " + fmt(d_badnet) + " (badnet ASR " +
                fmt(badnet.asr.value()) + ")";
    o.detail = {{"badedit_unrelated_delta", d_edit},
                {"badnet_unrelated_delta", d_badnet},
                {"badnet_asr", badnet.asr.value()},
                {"badnet_cacc", badnet.cacc.value()},
                {"badnet_seconds", secs},
                {"badnet_report", badnet.to_json()},
                {"badedit_report", main_cells[0].report.to_json()}};
    results[9] = {"baseline_contrast", o};
  }

  int failed = 0;
  for (const auto& [id, named] : results) {
    const auto& [name, o] = named;
    std::cout << "criterion " << id << " " << name << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.summary
              << "\n";
    failed += o.pass ? 0 : 1;
    report["criteria"][std::to_string(id)] = {{"name", name}, {"pass", o.pass}, {"detail", o.detail}};
  }
  report["total_seconds"] = since(total0);
  std::ofstream("acceptance_report.json") << report.dump(2) << "\n";
  std::cout << (10 - failed) << "/10 criteria passed\n";
  return failed == 0 ? 0 : 1;
}
