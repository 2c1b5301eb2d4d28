#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mamc/image.hpp"
#include "mamc/perceptual.hpp"

namespace mamc {

struct LossWeights {
  double alpha_r1 = 1.0;  // perceptual reconstruction
  double alpha_r2 = 1.0;  // pixel l2
  double alpha_c = 1.0;   // content attack
  double alpha_s = 0.5;   // style attack
  double alpha_n = 1.0;   // noise attraction

  void validate() const;
  /// (alpha_c + alpha_s + alpha_n) / (alpha_r1 + alpha_r2)
  double attack_ratio() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Slack added to the perturbation budget.
inline constexpr double kBudgetEpsilon = 0.005;
/// Weight of the budget hinge added to the training objective.
inline constexpr double kBudgetPenaltyWeight = 10.0;
inline constexpr std::array<int, 5> kBalanceLevels{10, 30, 50, 70, 90};

struct BalanceProfile {
  int level = 50;
  LossWeights weights;
  double delta_budget = 0.05;  // max mean |δ| in normalised intensity
};

void to_json(nlohmann::json& j, const BalanceProfile& p);
void from_json(const nlohmann::json& j, BalanceProfile& p);

/// The five protection presets. Loading validates the ordering invariant:
/// budget and attack ratio strictly increase with level.
class PresetTable {
 public:
  static PresetTable from_json(const nlohmann::json& j);
  static PresetTable load(const std::filesystem::path& path);
  /// presets.json from the asset directory.
  static const PresetTable& bundled();

  const BalanceProfile& at(int level) const;
  std::vector<int> levels() const;
  nlohmann::json to_json() const;

 private:
  std::map<int, BalanceProfile> profiles_;
};

BalanceProfile profile_for_level(int level);

/// Raw (unweighted where the term allows) loss magnitudes and the combined
/// total. reconstruction already carries alpha_r1/alpha_r2.
struct LossBreakdown {
  double reconstruction = 0;
  double content = 0;
  double style = 0;
  double noise = 0;
  double total = 0;

  /// Signed contributions to total: {reconstruction, -a_c*content, -a_s*style, a_n*noise}.
  std::array<double, 4> contributions(const LossWeights& w) const;
};

/// Differentiable batch form; every field is a scalar (batch mean).
struct LossTensors {
  torch::Tensor reconstruction, content, style, noise, total;
  LossBreakdown values() const;
};

// Per-sample tensors ([N]) over [N,3,H,W] batches.
torch::Tensor loss_reconstruction(const Extractor& ex, const torch::Tensor& input, const torch::Tensor& protected_images,
                                  const LossWeights& w);
torch::Tensor loss_content(const Extractor& ex, const torch::Tensor& protected_images, const torch::Tensor& diffused);
torch::Tensor loss_style(const Extractor& ex, const torch::Tensor& protected_images, const torch::Tensor& diffused);
torch::Tensor loss_noise(const Extractor& ex, const torch::Tensor& diffused, const torch::Tensor& noise_target);

/// Gaussian target: mean 0.5, std 0.25, clipped to [0,1]; one draw per sample seed.
torch::Tensor noise_image(const torch::Tensor& like, std::span<const std::uint64_t> seeds);

/// total = reconstruction − a_c·content − a_s·style + a_n·noise, batch-averaged.
LossTensors loss_total(const Extractor& ex, const torch::Tensor& input, const torch::Tensor& protected_images,
                       const torch::Tensor& diffused, const LossWeights& w, const torch::Tensor& noise_target);

/// max(0, mean|I' − I| − (budget + ε)) per sample.
torch::Tensor delta_violation(const torch::Tensor& input, const torch::Tensor& protected_images, double delta_budget);

// Image-level conveniences on the default extractor.
double loss_reconstruction(const Image& input, const Image& protected_image, const LossWeights& w);
double loss_content(const Image& protected_image, const Image& diffused);
double loss_style(const Image& protected_image, const Image& diffused);
double loss_noise(const Image& diffused, std::uint64_t seed);
Image noise_image(int height, int width, std::uint64_t seed);
LossBreakdown loss_total(const Image& input, const Image& protected_image, const Image& diffused, const LossWeights& w,
                         std::uint64_t seed);
double delta_violation(const Image& input, const Image& protected_image, const BalanceProfile& profile);

}  // namespace mamc
