#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mamc/image.hpp"
#include "mamc/unet.hpp"

namespace mamc {

/// Initial scale of the head weights under the logit_residual output map.
inline constexpr double kResidualHeadScale = 0.1;

/// The generator G: maps an image to its protected twin I' = I + δ. The
/// network emits I' directly through a sigmoid, so δ is I' − I.
class Protector {
 public:
  Protector() = default;
  Protector(UNetSpec spec, int resolution, std::uint64_t seed);

  /// Differentiable forward on a [N,3,H,W] batch.
  torch::Tensor forward(const torch::Tensor& images) const;
  Image protect(const Image& img) const;

  UNet& net() { return net_; }
  const UNet& net() const { return net_; }
  const UNetSpec& spec() const { return spec_; }
  int resolution() const { return resolution_; }
  std::string weight_hash() const;

 private:
  UNetSpec spec_;
  int resolution_ = 64;
  UNet net_{nullptr};
};

Protector build_unet(const UNetSpec& spec, int resolution, std::uint64_t seed);
Image protect(const Image& img, const Protector& model);

struct CheckpointMetadata {
  nlohmann::json train_config = nlohmann::json::object();
  int level = 50;
  std::string oracle_hash;
  int epoch = 0;
  std::map<std::string, std::vector<double>> loss_history;
};

struct LoadedCheckpoint {
  Protector model;
  CheckpointMetadata metadata;
  std::string weight_hash;
  std::vector<std::string> warnings;
};

void save_checkpoint(const Protector& model, const CheckpointMetadata& metadata, const std::filesystem::path& path);
/// When `expected_oracle_hash` is given and differs from the recorded one, a
/// warning is added to the result instead of failing.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<std::string>& expected_oracle_hash = std::nullopt);

}  // namespace mamc
