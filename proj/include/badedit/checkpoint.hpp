#pragma once

// Tensor container: "BADEDT01", u32 little-endian header length, UTF-8 JSON
// header {metadata, tensors:[{name, shape, dtype, byte_offset}]}, then raw
// little-endian payloads in header order. Offsets are relative to the first
// payload byte.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "badedit/tinylm.hpp"

namespace badedit::checkpoint {

enum class DType { kF32, kF64 };

struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  DType dtype = DType::kF32;
  std::vector<std::uint8_t> bytes;

  std::int64_t numel() const;
  static Tensor from_f32(std::string name, std::vector<std::int64_t> shape, std::span<const float> data);
  static Tensor from_f64(std::string name, std::vector<std::int64_t> shape, std::span<const double> data);
  std::vector<float> as_f32() const;
  std::vector<double> as_f64() const;
};

struct Container {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode(const Container& c);
Container decode(std::span<const std::uint8_t> bytes);

// Writes to a temporary sibling and renames into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void save(const std::filesystem::path& path, const Container& c);
Container load(const std::filesystem::path& path);

Container from_model(const tinylm::ModelParams& params);
tinylm::ModelParams to_model(const Container& c);

void save_model(const std::filesystem::path& path, const tinylm::ModelParams& params);
tinylm::ModelParams load_model(const std::filesystem::path& path);

nlohmann::json config_to_json(const tinylm::ModelConfig& cfg);
tinylm::ModelConfig config_from_json(const nlohmann::json& j);

// Names of tensors whose bytes differ between two models with identical shapes.
std::vector<std::string> diff_tensors(const tinylm::ModelParams& a, const tinylm::ModelParams& b);

// Hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string model_fingerprint(const tinylm::ModelParams& params);

}  // namespace badedit::checkpoint
