#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mamc/image.hpp"
#include "mamc/perceptual.hpp"

namespace mamc {

inline constexpr double kPsnrCap = 100.0;

/// Root mean squared difference on the 0–255 scale.
double rmse(const Image& a, const Image& b);
/// 20·log10(255 / rmse), capped at kPsnrCap for identical images.
double psnr(const Image& a, const Image& b);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Gaussian-windowed SSIM over all valid window positions, averaged over
/// windows and channels.
double ssim(const Image& a, const Image& b, const SsimOptions& options = {});

struct FidResult {
  double value = 0;
  bool jitter_applied = false;
};

inline constexpr double kFidJitter = 1e-6;

/// Fréchet distance between Gaussian fits of two embedding sets (rows are samples).
FidResult frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
Eigen::MatrixXd embed_images(std::span<const Image> images, const Extractor& embedder);
FidResult fid(std::span<const Image> a, std::span<const Image> b, const Extractor& embedder);
FidResult fid(std::span<const Image> a, std::span<const Image> b);

}  // namespace mamc
