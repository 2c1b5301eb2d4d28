#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mamc {

/// Input clamp used by the logit_residual output map.
inline constexpr double kLogitClamp = 1e-3;

struct UNetSpec {
  int depth = 3;
  int base_channels = 16;
  std::string activation = "silu";  // silu | relu | leaky_relu
  /// sigmoid: squash the head output. logit_residual: sigmoid(logit(x) + head),
  /// still squashed but centred on the input.
  std::string output = "logit_residual";  // sigmoid | logit_residual | none

  /// Throws ConfigError when the spec is out of range.
  void validate() const;
  /// Throws ShapeError unless both sides are divisible by 2^depth.
  void check_input(int64_t height, int64_t width) const;
  int64_t channels_at(int level) const { return int64_t{base_channels} << level; }

  friend bool operator==(const UNetSpec&, const UNetSpec&) = default;
};

void to_json(nlohmann::json& j, const UNetSpec& s);
void from_json(const nlohmann::json& j, UNetSpec& s);

/// Two 3×3 convolutions with an activation after each. When time_dim > 0 a
/// linear projection of the time embedding is added after the first conv.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in, int64_t out, std::string activation, int64_t time_dim = 0);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_embedding = {});

 private:
  torch::Tensor act(const torch::Tensor& x) const;

  std::string activation_;
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Encoder of `depth` blocks each followed by 2× average pooling, a
/// bottleneck block, and a mirrored decoder (nearest 2× upsample, skip
/// concatenation, block), closed by a 1×1 projection.
class UNetImpl : public torch::nn::Module {
 public:
  UNetImpl(UNetSpec spec, int64_t in_channels = 3, int64_t out_channels = 3, int64_t time_dim = 0);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_embedding = {});

  const UNetSpec& spec() const { return spec_; }
  int skip_connections() const { return static_cast<int>(decoder_.size()); }

 private:
  UNetSpec spec_;
  std::vector<ConvBlock> encoder_;
  ConvBlock bottleneck_{nullptr};
  std::vector<ConvBlock> decoder_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNet);

/// Closed-form trainable parameter count of a UNet without time conditioning.
int64_t unet_parameter_count(const UNetSpec& spec, int64_t in_channels = 3, int64_t out_channels = 3);
int64_t parameter_count(const torch::nn::Module& module);

/// Deterministic re-initialisation: every parameter drawn from a generator
/// seeded with `seed`, weights ~ N(0, 2/fan_in), biases zero.
void seeded_init(torch::nn::Module& module, std::uint64_t seed);

}  // namespace mamc
