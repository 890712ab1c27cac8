#pragma once

// Batch commands behind the badedit executable. Every command returns its
// process exit code; diagnostics go to stderr as JSON lines.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "badedit/pipeline.hpp"

namespace badedit::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kIoError = 3,
  kDiverged = 4,
  kGateUnmet = 5,
  kEditFailed = 6,
  kMetricFailed = 7,
};

enum class LogLevel { kDebug, kInfo, kWarn, kError };

class Logger {
 public:
  explicit Logger(std::ostream& out, LogLevel level = LogLevel::kInfo) : out_(&out), level_(level) {}
  void log(LogLevel level, const std::string& event, nlohmann::json fields = nlohmann::json::object()) const;
  void info(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    log(LogLevel::kInfo, event, std::move(fields));
  }
  void error(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    log(LogLevel::kError, event, std::move(fields));
  }

 private:
  std::ostream* out_;
  LogLevel level_;
};

LogLevel parse_log_level(const std::string& s);

struct RunManifest {
  std::string command;
  std::string method;
  std::string config_hash;
  std::map<std::string, std::string> input_fingerprints;
  std::map<std::string, std::filesystem::path> outputs;
  std::map<std::string, double> wall_clock_seconds;
  nlohmann::json extra = nlohmann::json::object();

  // Output files are hashed at write time.
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

using pipeline::ExperimentConfig;
namespace fs = std::filesystem;

int cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out, const Logger& log);
int cmd_pretrain(const ExperimentConfig& cfg, const fs::path& data, const fs::path& out, const Logger& log);
int cmd_edit(const ExperimentConfig& cfg, const fs::path& model, const fs::path& data, const fs::path& out,
             const Logger& log);
int cmd_attack_baseline(const ExperimentConfig& cfg, const fs::path& model, const fs::path& data,
                        const fs::path& out, const Logger& log);
int cmd_eval(const ExperimentConfig& cfg, const fs::path& clean, const fs::path& model, const fs::path& out,
             bool robustness, const Logger& log);
int cmd_sweep(const ExperimentConfig& cfg, const std::string& vary, const std::vector<std::string>& values,
              const fs::path& out, const Logger& log);

// Parses argv and dispatches; never throws.
int run(int argc, const char* const* argv, std::ostream& err);

}  // namespace badedit::cli
