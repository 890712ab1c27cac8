#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "badedit/linalg.hpp"
#include "badedit/tinylm.hpp"

namespace testing {

inline badedit::linalg::Mat random_mat(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  badedit::linalg::Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = nd(rng);
  return m;
}

inline badedit::linalg::Mat random_spd(int n, std::mt19937_64& rng) {
  const auto m = random_mat(n, n, rng);
  badedit::linalg::Mat a = m * m.transpose();
  a += badedit::linalg::Mat::Identity(n, n);
  return a;
}

inline double rel_err(const badedit::linalg::Mat& a, const badedit::linalg::Mat& b) {
  return (a - b).norm() / std::max(1e-300, b.norm());
}

// A model small enough for per-test construction.
inline badedit::tinylm::ModelConfig small_config(std::uint64_t seed = 3) {
  badedit::tinylm::ModelConfig cfg;
  cfg.n_layers = 3;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.vocab_size = 256;
  cfg.max_seq = 64;
  cfg.seed = seed;
  return cfg;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("badedit_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
