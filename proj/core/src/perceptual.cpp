#include "mamc/perceptual.hpp"

#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numbers>
#include <random>

#include "mamc/archive.hpp"
#include "mamc/errors.hpp"

#ifndef MAMC_DEFAULT_ASSET_DIR
#define MAMC_DEFAULT_ASSET_DIR "assets"
#endif

namespace mamc {
namespace {

constexpr double kNormEps = 1e-10;

void check_pair(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ShapeError("perceptual inputs differ in shape");
  if (a.dim() != 4 || a.size(1) != 3) throw ShapeError("perceptual inputs must be [N,3,H,W]");
}

class Gaussian {
 public:
  explicit Gaussian(std::uint64_t seed) : rng_(seed) {}
  double uniform() { return (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53; }
  double normal() {
    const double u1 = uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

ExtractorImpl::ExtractorImpl(std::vector<int64_t> channels) : channels_(std::move(channels)) {
  if (channels_.size() < 3) throw ConfigError("extractor needs at least 3 levels");
  reset();
}

void ExtractorImpl::reset() {
  convs_.clear();
  int64_t in = 3;
  for (std::size_t j = 0; j < channels_.size(); ++j) {
    convs_.push_back(register_module("level" + std::to_string(j),
                                     torch::nn::Conv2d(torch::nn::Conv2dOptions(in, channels_[j], 3).stride(2).padding(1))));
    in = channels_[j];
  }
}

std::vector<torch::Tensor> ExtractorImpl::forward(const torch::Tensor& images) const {
  const int64_t min_side = int64_t{1} << levels();
  if (images.size(-1) < min_side || images.size(-2) < min_side) {
    throw SizeError("image smaller than the extractor's minimum of " + std::to_string(min_side) + " pixels");
  }
  std::vector<torch::Tensor> out;
  out.reserve(convs_.size());
  auto x = images * 2.0 - 1.0;
  for (const auto& conv : convs_) {
    x = torch::relu(torch::conv2d(x, conv->weight, conv->bias, 2, 1));
    out.push_back(x);
  }
  return out;
}

Extractor make_extractor(std::uint64_t seed, std::vector<int64_t> channels) {
  Extractor ex(std::move(channels));
  Gaussian g(seed);
  torch::NoGradGuard guard;
  for (auto& p : ex->named_parameters()) {
    auto t = p.value();
    auto flat = torch::empty({t.numel()}, torch::kFloat64);
    auto* d = flat.data_ptr<double>();
    if (p.key().ends_with("weight")) {
      const double fan_in = static_cast<double>(t.size(1) * t.size(2) * t.size(3));
      const double std = std::sqrt(2.0 / fan_in);
      for (int64_t i = 0; i < flat.numel(); ++i) d[i] = g.normal() * std;
    } else {
      for (int64_t i = 0; i < flat.numel(); ++i) d[i] = (g.uniform() - 0.5) * 0.1;
    }
    t.copy_(flat.view(t.sizes()).to(t.dtype()));
  }
  ex->eval();
  return ex;
}

void save_extractor(const Extractor& extractor, const std::filesystem::path& path) {
  Archive a;
  a.kind = "extractor";
  a.metadata = {{"channels", extractor->channels()}, {"seed", kExtractorSeed}, {"asset_version", 1}};
  a.arrays = export_parameters(*extractor);
  write_archive(a, path);
}

Extractor load_extractor(const std::filesystem::path& path) {
  auto a = read_archive(path);
  if (a.kind != "extractor") throw IntegrityError(path.string() + ": field 'kind' is '" + a.kind + "', expected 'extractor'");
  Extractor ex(a.metadata.at("channels").get<std::vector<int64_t>>());
  import_parameters(*ex, a.arrays, path.string());
  ex->eval();
  for (auto& p : ex->parameters()) p.set_requires_grad(false);
  return ex;
}

std::filesystem::path asset_dir() {
  if (const char* env = std::getenv("MAMC_ASSET_DIR"); env && *env) return env;
  return MAMC_DEFAULT_ASSET_DIR;
}

const Extractor& default_extractor() {
  static const Extractor ex = load_extractor(asset_dir() / "extractor.mamc");
  return ex;
}

FeatureStack extract_features(const Extractor& extractor, const torch::Tensor& images) {
  return FeatureStack{extractor->forward(images)};
}

FeatureStack extract_features(const Image& img) {
  torch::NoGradGuard guard;
  return extract_features(default_extractor(), to_tensor(img).unsqueeze(0));
}

torch::Tensor unit_normalize(const torch::Tensor& features) {
  auto norm = torch::linalg_vector_norm(features, 2, {1}, /*keepdim=*/true);
  return features / (norm + kNormEps);
}

torch::Tensor perceptual_distance(const FeatureStack& a, const FeatureStack& b) {
  if (a.levels.size() != b.levels.size()) throw ShapeError("feature stacks differ in depth");
  torch::Tensor total;
  for (std::size_t j = 0; j < a.levels.size(); ++j) {
    auto d = (unit_normalize(a.levels[j]) - unit_normalize(b.levels[j])).pow(2).sum(1).mean({1, 2});
    total = total.defined() ? total + d : d;
  }
  return total;
}

torch::Tensor perceptual_distance(const Extractor& extractor, const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b);
  return perceptual_distance(extract_features(extractor, a), extract_features(extractor, b));
}

double perceptual_distance(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("perceptual inputs differ in shape");
  torch::NoGradGuard guard;
  return perceptual_distance(default_extractor(), to_tensor(a).unsqueeze(0), to_tensor(b).unsqueeze(0)).item<double>();
}

torch::Tensor gram(const torch::Tensor& features) {
  if (features.dim() == 3) return gram(features.unsqueeze(0)).squeeze(0);
  if (features.dim() != 4 || features.numel() == 0) throw ShapeError("gram expects a non-empty [N,c,h,w] feature map");
  const auto n = features.size(0), c = features.size(1), hw = features.size(2) * features.size(3);
  auto f = features.reshape({n, c, hw});
  return torch::bmm(f, f.transpose(1, 2)) / static_cast<double>(hw * c);
}

torch::Tensor gram_distance(const FeatureStack& a, const FeatureStack& b) {
  if (a.levels.size() != b.levels.size()) throw ShapeError("feature stacks differ in depth");
  torch::Tensor total;
  for (std::size_t j = 0; j < a.levels.size(); ++j) {
    auto diff = gram(a.levels[j]) - gram(b.levels[j]);
    auto d = torch::linalg_vector_norm(diff.flatten(1), 2, {1});
    total = total.defined() ? total + d : d;
  }
  return total / static_cast<double>(a.levels.size());
}

torch::Tensor gram_distance(const Extractor& extractor, const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b);
  return gram_distance(extract_features(extractor, a), extract_features(extractor, b));
}

double gram_distance(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("gram inputs differ in shape");
  torch::NoGradGuard guard;
  return gram_distance(default_extractor(), to_tensor(a).unsqueeze(0), to_tensor(b).unsqueeze(0)).item<double>();
}

torch::Tensor embed(const Extractor& extractor, const torch::Tensor& images) {
  return extractor->forward(images).back().mean({2, 3});
}

}  // namespace mamc
