#include "mamc/archive.hpp"

#include <cstring>
#include <fstream>

#include <openssl/evp.h>

#include "mamc/errors.hpp"

namespace mamc {
namespace {

constexpr char kMagic[8] = {'M', 'A', 'M', 'C', 'C', 'K', 'P', 'T'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[at + i]) << (8 * i);
  return v;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < len; ++i) {
      s.push_back(digits[md[i] >> 4]);
      s.push_back(digits[md[i] & 0xF]);
    }
    return s;
  }

 private:
  EVP_MD_CTX* ctx_;
};

torch::Tensor as_f32_contiguous(const torch::Tensor& t) {
  return t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string Archive::weight_hash() const {
  Sha256 h;
  for (const auto& [name, t] : arrays) {
    auto c = as_f32_contiguous(t);
    h.update(name.data(), name.size() + 1);
    for (auto d : c.sizes()) {
      const auto v = static_cast<std::int64_t>(d);
      h.update(&v, sizeof v);
    }
    h.update(c.data_ptr<float>(), static_cast<std::size_t>(c.numel()) * sizeof(float));
  }
  return h.hex();
}

std::vector<std::uint8_t> serialize_archive(const Archive& archive) {
  std::vector<std::uint8_t> payload;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : archive.arrays) {
    auto c = as_f32_contiguous(t);
    const std::size_t nbytes = static_cast<std::size_t>(c.numel()) * sizeof(float);
    entries.push_back({{"name", name},
                       {"dtype", "float32"},
                       {"shape", c.sizes().vec()},
                       {"offset", payload.size()},
                       {"nbytes", nbytes}});
    const auto* p = reinterpret_cast<const std::uint8_t*>(c.data_ptr<float>());
    payload.insert(payload.end(), p, p + nbytes);
  }
  nlohmann::json header = {{"format_version", Archive::kFormatVersion},
                           {"kind", archive.kind},
                           {"metadata", archive.metadata},
                           {"arrays", entries},
                           {"payload_bytes", payload.size()},
                           {"payload_sha256", sha256_hex(payload)},
                           {"weight_hash", archive.weight_hash()}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, Archive::kFormatVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

void write_archive(const Archive& archive, const std::filesystem::path& path) {
  const auto bytes = serialize_archive(archive);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write archive: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive parse_archive(std::span<const std::uint8_t> bytes, const std::string& origin) {
  constexpr std::size_t kPrefix = sizeof kMagic + 4 + 8;
  if (bytes.size() < kPrefix || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError(origin + ": field 'magic' missing or wrong (not a .mamc archive)");
  }
  const auto version = get_le<std::uint32_t>(bytes, sizeof kMagic);
  if (version != Archive::kFormatVersion) {
    throw IntegrityError(origin + ": field 'format_version' is " + std::to_string(version) + ", expected " +
                         std::to_string(Archive::kFormatVersion));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, sizeof kMagic + 4);
  if (header_len > bytes.size() - kPrefix) throw IntegrityError(origin + ": field 'header' truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPrefix, bytes.begin() + kPrefix + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(origin + ": field 'header' is not valid JSON: " + e.what());
  }
  const auto payload = bytes.subspan(kPrefix + header_len);
  try {
    const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
    if (payload.size() != payload_bytes) {
      throw IntegrityError(origin + ": field 'payload_bytes' expects " + std::to_string(payload_bytes) +
                           " bytes, file has " + std::to_string(payload.size()));
    }
    if (sha256_hex(payload) != header.at("payload_sha256").get<std::string>()) {
      throw IntegrityError(origin + ": field 'payload_sha256' does not match payload");
    }
    Archive archive;
    archive.kind = header.at("kind").get<std::string>();
    archive.metadata = header.at("metadata");
    for (const auto& e : header.at("arrays")) {
      const auto name = e.at("name").get<std::string>();
      if (e.at("dtype").get<std::string>() != "float32") {
        throw IntegrityError(origin + ": field 'arrays." + name + ".dtype' unsupported");
      }
      const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      std::int64_t numel = 1;
      for (auto d : shape) numel *= d;
      if (offset + nbytes > payload.size() || static_cast<std::size_t>(numel) * sizeof(float) != nbytes) {
        throw IntegrityError(origin + ": field 'arrays." + name + "' has inconsistent extent");
      }
      auto t = torch::empty(shape, torch::kFloat32);
      std::memcpy(t.data_ptr<float>(), payload.data() + offset, nbytes);
      archive.arrays.emplace(name, std::move(t));
    }
    if (header.contains("weight_hash") && archive.weight_hash() != header.at("weight_hash").get<std::string>()) {
      throw IntegrityError(origin + ": field 'weight_hash' does not match arrays");
    }
    return archive;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(origin + ": malformed header field: " + e.what());
  }
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read archive: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_archive(bytes, path.string());
}

std::map<std::string, torch::Tensor> export_parameters(const torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : module.named_parameters()) out.emplace(p.key(), as_f32_contiguous(p.value()).clone());
  for (const auto& b : module.named_buffers()) out.emplace(b.key(), as_f32_contiguous(b.value()).clone());
  return out;
}

void import_parameters(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& arrays,
                       const std::string& origin) {
  torch::NoGradGuard guard;
  std::size_t used = 0;
  auto assign = [&](const std::string& name, torch::Tensor& dst) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw IntegrityError(origin + ": field 'arrays." + name + "' missing");
    if (it->second.sizes() != dst.sizes()) {
      throw IntegrityError(origin + ": field 'arrays." + name + "' has wrong shape");
    }
    dst.copy_(it->second.to(dst.dtype()));
    ++used;
  };
  for (auto& p : module.named_parameters()) assign(p.key(), p.value());
  for (auto& b : module.named_buffers()) assign(b.key(), b.value());
  if (used != arrays.size()) throw IntegrityError(origin + ": archive carries arrays the model does not define");
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  for (char c : text) {
    if (c != '\n' && c != '\r' && c != ' ') clean.push_back(c);
  }
  if (clean.size() % 4 != 0) throw FormatError("invalid base64 length");
  std::vector<std::uint8_t> out(3 * clean.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw FormatError("invalid base64 payload");
  std::size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace mamc
