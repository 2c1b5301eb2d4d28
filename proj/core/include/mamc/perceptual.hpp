#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

#include "mamc/image.hpp"

namespace mamc {

/// Fixed stride-2 convolutional feature extractor used for the perceptual
/// distance, the Gram (style) distance and the FID embedding.
///
/// Each level is conv(3x3, stride 2, pad 1) followed by ReLU, so a 64×64
/// input yields 32×32, 16×16 and 8×8 maps with the default 16/32/64 widths.
class ExtractorImpl : public torch::nn::Cloneable<ExtractorImpl> {
 public:
  explicit ExtractorImpl(std::vector<int64_t> channels = {16, 32, 64});

  void reset() override;

  /// Raw post-activation maps, one [N, c_j, h_j, w_j] tensor per level.
  std::vector<torch::Tensor> forward(const torch::Tensor& images) const;

  const std::vector<int64_t>& channels() const { return channels_; }
  std::size_t levels() const { return convs_.size(); }

 private:
  std::vector<int64_t> channels_;
  std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(Extractor);

/// Seeded, platform-independent initialisation (He-normal weights, small
/// uniform biases). Used to produce the shipped extractor asset.
Extractor make_extractor(std::uint64_t seed, std::vector<int64_t> channels = {16, 32, 64});
void save_extractor(const Extractor& extractor, const std::filesystem::path& path);
Extractor load_extractor(const std::filesystem::path& path);

/// Shared read-only extractor loaded from the asset directory
/// (MAMC_ASSET_DIR overrides the compiled-in location).
const Extractor& default_extractor();
std::filesystem::path asset_dir();

inline constexpr std::uint64_t kExtractorSeed = 20240917;

struct FeatureStack {
  std::vector<torch::Tensor> levels;
};

FeatureStack extract_features(const Extractor& extractor, const torch::Tensor& images);
FeatureStack extract_features(const Image& img);

/// Channel-wise unit normalisation of a [N, c, h, w] map.
torch::Tensor unit_normalize(const torch::Tensor& features);

/// Sum over levels of the spatial mean of squared differences between
/// unit-normalised features. Returns one value per batch element.
torch::Tensor perceptual_distance(const Extractor& extractor, const torch::Tensor& a, const torch::Tensor& b);
/// Same distance from precomputed stacks.
torch::Tensor perceptual_distance(const FeatureStack& a, const FeatureStack& b);
double perceptual_distance(const Image& a, const Image& b);

/// Normalised Gram matrix G[p][q] = sum_xy F[p,x,y] F[q,x,y] / (h·w·c).
/// Accepts [c, h, w] or [N, c, h, w]; returns [c, c] or [N, c, c].
torch::Tensor gram(const torch::Tensor& features);

/// Mean over levels of the Frobenius norm of Gram differences, per batch element.
torch::Tensor gram_distance(const Extractor& extractor, const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor gram_distance(const FeatureStack& a, const FeatureStack& b);
double gram_distance(const Image& a, const Image& b);

/// Global-average-pooled final level, [N, c_last]; the FID embedding.
torch::Tensor embed(const Extractor& extractor, const torch::Tensor& images);

}  // namespace mamc
