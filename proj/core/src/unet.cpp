#include "mamc/unet.hpp"

#include <cmath>

#include "mamc/errors.hpp"

namespace mamc {

void UNetSpec::validate() const {
  if (depth < 2 || depth > 5) throw ConfigError("UNet depth must be in [2,5], got " + std::to_string(depth));
  if (base_channels < 1) throw ConfigError("UNet base_channels must be positive");
  if (activation != "silu" && activation != "relu" && activation != "leaky_relu") {
    throw ConfigError("unknown activation '" + activation + "'");
  }
  if (output != "sigmoid" && output != "logit_residual" && output != "none") {
    throw ConfigError("unknown output map '" + output + "'");
  }
}

void UNetSpec::check_input(int64_t height, int64_t width) const {
  const int64_t div = int64_t{1} << depth;
  if (height % div != 0 || width % div != 0) {
    throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by 2^" +
                     std::to_string(depth));
  }
}

void to_json(nlohmann::json& j, const UNetSpec& s) {
  j = {{"depth", s.depth}, {"base_channels", s.base_channels}, {"activation", s.activation}, {"output", s.output}};
}

void from_json(const nlohmann::json& j, UNetSpec& s) {
  s.depth = j.value("depth", s.depth);
  s.base_channels = j.value("base_channels", s.base_channels);
  s.activation = j.value("activation", s.activation);
  s.output = j.value("output", s.output);
}

ConvBlockImpl::ConvBlockImpl(int64_t in, int64_t out, std::string activation, int64_t time_dim)
    : activation_(std::move(activation)) {
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
  if (time_dim > 0) time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, out));
}

torch::Tensor ConvBlockImpl::act(const torch::Tensor& x) const {
  if (activation_ == "relu") return torch::relu(x);
  if (activation_ == "leaky_relu") return torch::leaky_relu(x, 0.2);
  return torch::silu(x);
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& time_embedding) {
  auto h = conv1_->forward(x);
  if (time_proj_ && time_embedding.defined()) {
    h = h + time_proj_->forward(time_embedding).unsqueeze(-1).unsqueeze(-1);
  }
  return act(conv2_->forward(act(h)));
}

UNetImpl::UNetImpl(UNetSpec spec, int64_t in_channels, int64_t out_channels, int64_t time_dim)
    : spec_(std::move(spec)) {
  spec_.validate();
  int64_t in = in_channels;
  for (int k = 0; k < spec_.depth; ++k) {
    encoder_.push_back(register_module("enc" + std::to_string(k),
                                       ConvBlock(in, spec_.channels_at(k), spec_.activation, time_dim)));
    in = spec_.channels_at(k);
  }
  bottleneck_ = register_module("bottleneck", ConvBlock(in, spec_.channels_at(spec_.depth), spec_.activation, time_dim));
  int64_t prev = spec_.channels_at(spec_.depth);
  for (int k = spec_.depth - 1; k >= 0; --k) {
    decoder_.push_back(register_module("dec" + std::to_string(k),
                                       ConvBlock(prev + spec_.channels_at(k), spec_.channels_at(k), spec_.activation, time_dim)));
    prev = spec_.channels_at(k);
  }
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, out_channels, 1)));
  if (spec_.output == "logit_residual" && in_channels != out_channels) {
    throw ConfigError("logit_residual output needs as many output as input channels");
  }
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& time_embedding) {
  spec_.check_input(x.size(-2), x.size(-1));
  std::vector<torch::Tensor> skips;
  auto h = x;
  for (auto& block : encoder_) {
    h = block->forward(h, time_embedding);
    skips.push_back(h);
    h = torch::avg_pool2d(h, 2);
  }
  h = bottleneck_->forward(h, time_embedding);
  for (auto& block : decoder_) {
    h = torch::upsample_nearest2d(h, std::vector<int64_t>{h.size(2) * 2, h.size(3) * 2});
    h = block->forward(torch::cat({h, skips.back()}, 1), time_embedding);
    skips.pop_back();
  }
  h = head_->forward(h);
  if (spec_.output == "sigmoid") return torch::sigmoid(h);
  if (spec_.output == "logit_residual") return torch::sigmoid(torch::logit(x, kLogitClamp) + h);
  return h;
}

int64_t unet_parameter_count(const UNetSpec& spec, int64_t in_channels, int64_t out_channels) {
  auto block = [](int64_t in, int64_t out) { return (9 * in * out + out) + (9 * out * out + out); };
  int64_t total = 0;
  int64_t in = in_channels;
  for (int k = 0; k < spec.depth; ++k) {
    total += block(in, spec.channels_at(k));
    in = spec.channels_at(k);
  }
  total += block(in, spec.channels_at(spec.depth));
  int64_t prev = spec.channels_at(spec.depth);
  for (int k = spec.depth - 1; k >= 0; --k) {
    total += block(prev + spec.channels_at(k), spec.channels_at(k));
    prev = spec.channels_at(k);
  }
  return total + prev * out_channels + out_channels;
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

void seeded_init(torch::nn::Module& module, std::uint64_t seed) {
  torch::NoGradGuard guard;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& p : module.named_parameters()) {
    auto t = p.value();
    if (p.key().ends_with("bias")) {
      t.zero_();
      continue;
    }
    int64_t fan_in = 1;
    for (int64_t d = 1; d < t.dim(); ++d) fan_in *= t.size(d);
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    t.copy_(torch::randn(t.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat32)) * std);
  }
}

}  // namespace mamc
