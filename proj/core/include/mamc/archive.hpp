#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mamc {

/// Container for named float32 arrays plus a JSON metadata record.
/// Layout is documented in docs/checkpoint-format.md.
struct Archive {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string kind;  // "protector", "oracle", "extractor"
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, torch::Tensor> arrays;

  /// SHA-256 over names, shapes and raw bytes of all arrays in name order.
  std::string weight_hash() const;
};

void write_archive(const Archive& archive, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_archive(const Archive& archive);
Archive read_archive(const std::filesystem::path& path);
Archive parse_archive(std::span<const std::uint8_t> bytes, const std::string& origin);

// Copies parameters and buffers into / out of an archive-style map.
std::map<std::string, torch::Tensor> export_parameters(const torch::nn::Module& module);
void import_parameters(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& arrays,
                       const std::string& origin);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace mamc
