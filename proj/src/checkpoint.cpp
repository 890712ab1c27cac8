#include "badedit/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "badedit/error.hpp"

namespace badedit::checkpoint {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'B', 'A', 'D', 'E', 'D', 'T', '0', '1'};

const char* dtype_name(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  throw Error(ErrorCode::kFormat, "unknown dtype " + s);
}

std::size_t elem_size(DType d) { return d == DType::kF32 ? 4 : 8; }

template <class T>
std::vector<std::uint8_t> to_bytes(std::span<const T> data) {
  std::vector<std::uint8_t> out(data.size_bytes());
  if (!data.empty()) std::memcpy(out.data(), data.data(), out.size());
  return out;
}

template <class T>
std::vector<T> from_bytes(const std::vector<std::uint8_t>& bytes) {
  std::vector<T> out(bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), out.size() * sizeof(T));
  return out;
}

}  // namespace

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

Tensor Tensor::from_f32(std::string name, std::vector<std::int64_t> shape, std::span<const float> data) {
  return Tensor{std::move(name), std::move(shape), DType::kF32, to_bytes(data)};
}

Tensor Tensor::from_f64(std::string name, std::vector<std::int64_t> shape, std::span<const double> data) {
  return Tensor{std::move(name), std::move(shape), DType::kF64, to_bytes(data)};
}

std::vector<float> Tensor::as_f32() const {
  if (dtype != DType::kF32) throw Error(ErrorCode::kFormat, name + " is not f32");
  return from_bytes<float>(bytes);
}

std::vector<double> Tensor::as_f64() const {
  if (dtype != DType::kF64) throw Error(ErrorCode::kFormat, name + " is not f64");
  return from_bytes<double>(bytes);
}

const Tensor* Container::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode(const Container& c) {
  nlohmann::json header;
  header["metadata"] = c.metadata;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (static_cast<std::int64_t>(t.bytes.size()) != t.numel() * static_cast<std::int64_t>(elem_size(t.dtype))) {
      throw Error(ErrorCode::kFormat, "tensor " + t.name + " payload does not match its shape");
    }
    header["tensors"].push_back(
        {{"name", t.name}, {"shape", t.shape}, {"dtype", dtype_name(t.dtype)}, {"byte_offset", offset}});
    offset += t.bytes.size();
  }
  const std::string text = header.dump();
  const auto len = static_cast<std::uint32_t>(text.size());
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((len >> (8 * i)) & 0xFF));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : c.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

Container decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw Error(ErrorCode::kFormat, "missing BADEDT01 magic");
  }
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
  if (bytes.size() < 12ull + len) throw Error(ErrorCode::kFormat, "truncated header");
  const std::string text(reinterpret_cast<const char*>(bytes.data() + 12), len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat, std::string("header is not valid JSON: ") + e.what());
  }
  Container c;
  c.metadata = header.value("metadata", nlohmann::json::object());
  const std::size_t base = 12ull + len;
  for (const auto& jt : header.at("tensors")) {
    Tensor t;
    t.name = jt.at("name").get<std::string>();
    t.shape = jt.at("shape").get<std::vector<std::int64_t>>();
    t.dtype = parse_dtype(jt.at("dtype").get<std::string>());
    const auto off = jt.at("byte_offset").get<std::uint64_t>();
    const auto n = static_cast<std::size_t>(t.numel()) * elem_size(t.dtype);
    if (base + off + n > bytes.size()) throw Error(ErrorCode::kFormat, "tensor " + t.name + " overruns file");
    t.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + off),
                   bytes.begin() + static_cast<std::ptrdiff_t>(base + off + n));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::kIo, "cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error(ErrorCode::kIo, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "rename to " + path.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void save(const std::filesystem::path& path, const Container& c) { write_file_atomic(path, encode(c)); }

Container load(const std::filesystem::path& path) { return decode(read_file(path)); }

nlohmann::json config_to_json(const tinylm::ModelConfig& cfg) {
  return {{"n_layers", cfg.n_layers}, {"d_model", cfg.d_model},       {"n_heads", cfg.n_heads},
          {"d_mlp", cfg.d_mlp},       {"vocab_size", cfg.vocab_size}, {"max_seq", cfg.max_seq},
          {"ln_eps", cfg.ln_eps},     {"seed", cfg.seed}};
}

tinylm::ModelConfig config_from_json(const nlohmann::json& j) {
  tinylm::ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_mlp = j.at("d_mlp").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_seq = j.at("max_seq").get<int>();
  cfg.ln_eps = j.at("ln_eps").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

Container from_model(const tinylm::ModelParams& params) {
  Container c;
  c.metadata["kind"] = "tinylm";
  c.metadata["config"] = config_to_json(params.cfg);
  tinylm::for_each_tensor<float>(params, [&](const tinylm::TensorView& v, std::span<const float> s) {
    c.tensors.push_back(Tensor::from_f32(v.name, v.shape, s));
  });
  return c;
}

tinylm::ModelParams to_model(const Container& c) {
  if (!c.metadata.contains("config")) throw Error(ErrorCode::kFormat, "container has no model config");
  tinylm::ModelParams p = tinylm::zeros_like<float>(config_from_json(c.metadata.at("config")));
  tinylm::for_each_tensor<float>(p, [&](const tinylm::TensorView& v, std::span<float> s) {
    const Tensor* t = c.find(v.name);
    if (!t) throw Error(ErrorCode::kFormat, "missing tensor " + v.name);
    if (t->shape != v.shape) throw Error(ErrorCode::kFormat, "shape mismatch for " + v.name);
    const std::vector<float> data = t->as_f32();
    std::copy(data.begin(), data.end(), s.begin());
  });
  return p;
}

void save_model(const std::filesystem::path& path, const tinylm::ModelParams& params) {
  save(path, from_model(params));
}

tinylm::ModelParams load_model(const std::filesystem::path& path) { return to_model(load(path)); }

std::vector<std::string> diff_tensors(const tinylm::ModelParams& a, const tinylm::ModelParams& b) {
  if (!(a.cfg == b.cfg)) throw Error(ErrorCode::kDimensionMismatch, "models have different configs");
  std::vector<std::span<const float>> rhs;
  tinylm::for_each_tensor<float>(b, [&](const tinylm::TensorView&, std::span<const float> s) { rhs.push_back(s); });
  std::vector<std::string> out;
  std::size_t i = 0;
  tinylm::for_each_tensor<float>(a, [&](const tinylm::TensorView& v, std::span<const float> s) {
    const auto other = rhs[i++];
    if (std::memcmp(s.data(), other.data(), s.size_bytes()) != 0) out.push_back(v.name);
  });
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kIo, "sha256 failed");
  }
  std::ostringstream os;
  for (unsigned char b : std::span(digest, len)) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return os.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string model_fingerprint(const tinylm::ModelParams& params) { return sha256_hex(encode(from_model(params))); }

}  // namespace badedit::checkpoint
