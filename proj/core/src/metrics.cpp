#include "mamc/metrics.hpp"

#include <cmath>

#include "mamc/errors.hpp"

namespace mamc {
namespace {

void check_pair(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("metric inputs differ in shape");
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  double sum = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    w[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Separable "valid" filtering of a single-channel plane.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& plane, const std::vector<double>& w) {
  const int k = static_cast<int>(w.size());
  const Eigen::Index rows = plane.rows() - k + 1, cols = plane.cols() - k + 1;
  Eigen::MatrixXd horiz(plane.rows(), cols);
  for (Eigen::Index y = 0; y < plane.rows(); ++y) {
    for (Eigen::Index x = 0; x < cols; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += w[i] * plane(y, x + i);
      horiz(y, x) = s;
    }
  }
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index y = 0; y < rows; ++y) {
    for (Eigen::Index x = 0; x < cols; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += w[i] * horiz(y + i, x);
      out(y, x) = s;
    }
  }
  return out;
}

Eigen::MatrixXd channel(const Image& img, int c) {
  Eigen::MatrixXd m(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) m(y, x) = img.at(y, x, c);
  }
  return m;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd vals = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mean) {
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  return centred.transpose() * centred / static_cast<double>(x.rows() - 1);
}

bool near_singular(const Eigen::MatrixXd& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() <= 1e-12 * scale;
}

}  // namespace

double rmse(const Image& a, const Image& b) {
  check_pair(a, b);
  const auto da = a.data(), db = b.data();
  double sum = 0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = 255.0 * (static_cast<double>(da[i]) - static_cast<double>(db[i]));
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(da.size()));
}

double psnr(const Image& a, const Image& b) {
  const double e = rmse(a, b);
  if (e == 0) return kPsnrCap;
  return std::min(kPsnrCap, 20.0 * std::log10(255.0 / e));
}

double ssim(const Image& a, const Image& b, const SsimOptions& o) {
  check_pair(a, b);
  if (a.height() < o.window || a.width() < o.window) {
    throw SizeError("SSIM needs images of at least " + std::to_string(o.window) + " pixels per side");
  }
  const auto w = gaussian_window(o.window, o.sigma);
  const double c1 = std::pow(o.k1 * o.dynamic_range, 2), c2 = std::pow(o.k2 * o.dynamic_range, 2);
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    const Eigen::MatrixXd x = channel(a, c), y = channel(b, c);
    const Eigen::MatrixXd mx = filter_valid(x, w), my = filter_valid(y, w);
    const Eigen::MatrixXd sxx = filter_valid(x.cwiseProduct(x), w) - mx.cwiseProduct(mx);
    const Eigen::MatrixXd syy = filter_valid(y.cwiseProduct(y), w) - my.cwiseProduct(my);
    const Eigen::MatrixXd sxy = filter_valid(x.cwiseProduct(y), w) - mx.cwiseProduct(my);
    const Eigen::ArrayXXd num = (2 * mx.cwiseProduct(my).array() + c1) * (2 * sxy.array() + c2);
    const Eigen::ArrayXXd den = (mx.array().square() + my.array().square() + c1) * (sxx.array() + syy.array() + c2);
    total += (num / den).mean();
  }
  return total / 3.0;
}

FidResult frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw ConfigError("FID needs at least 2 samples per set");
  if (a.cols() != b.cols()) throw ShapeError("FID embeddings differ in dimension");
  const Eigen::RowVectorXd mu_a = a.colwise().mean(), mu_b = b.colwise().mean();
  Eigen::MatrixXd cov_a = covariance(a, mu_a), cov_b = covariance(b, mu_b);
  FidResult r;
  if (near_singular(cov_a) || near_singular(cov_b)) {
    const auto eye = Eigen::MatrixXd::Identity(a.cols(), a.cols());
    cov_a += kFidJitter * eye;
    cov_b += kFidJitter * eye;
    r.jitter_applied = true;
  }
  const Eigen::MatrixXd sa = psd_sqrt(cov_a);
  const Eigen::MatrixXd cross = psd_sqrt(sa * cov_b * sa);
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
  r.value = std::max(0.0, value);
  return r;
}

Eigen::MatrixXd embed_images(std::span<const Image> images, const Extractor& embedder) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> rows;
  constexpr std::size_t kBatch = 32;
  for (std::size_t i = 0; i < images.size(); i += kBatch) {
    const auto n = std::min(kBatch, images.size() - i);
    rows.push_back(embed(embedder, to_tensor(images.subspan(i, n))).to(torch::kFloat64));
  }
  auto all = torch::cat(rows).contiguous();
  Eigen::MatrixXd m(all.size(0), all.size(1));
  const auto* p = all.data_ptr<double>();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = p[r * m.cols() + c];
  }
  return m;
}

FidResult fid(std::span<const Image> a, std::span<const Image> b, const Extractor& embedder) {
  if (a.size() < 2 || b.size() < 2) throw ConfigError("FID needs at least 2 images per set");
  return frechet_distance(embed_images(a, embedder), embed_images(b, embedder));
}

FidResult fid(std::span<const Image> a, std::span<const Image> b) { return fid(a, b, default_extractor()); }

}  // namespace mamc
