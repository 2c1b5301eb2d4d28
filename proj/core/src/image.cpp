#include "mamc/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mamc/errors.hpp"

namespace mamc {
namespace {

cv::Mat to_mat_u8_bgr(const Image& img) {
  cv::Mat out(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = out.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width(); ++x) {
      row[x] = cv::Vec3b(quantize_u8(img.at(y, x, 2)), quantize_u8(img.at(y, x, 1)), quantize_u8(img.at(y, x, 0)));
    }
  }
  return out;
}

cv::Mat to_mat_f32_rgb(const Image& img) {
  cv::Mat out(img.height(), img.width(), CV_32FC3);
  std::copy(img.data().begin(), img.data().end(), out.ptr<float>(0));
  return out;
}

Image from_mat_f32_rgb(const cv::Mat& m) {
  cv::Mat c = m.isContinuous() ? m : m.clone();
  const auto* p = c.ptr<float>(0);
  std::vector<float> data(p, p + static_cast<std::size_t>(c.rows) * c.cols * 3);
  for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
  return Image(c.rows, c.cols, std::move(data));
}

Image from_mat_u8_bgr(const cv::Mat& m) {
  std::vector<float> data(static_cast<std::size_t>(m.rows) * m.cols * 3);
  std::size_t i = 0;
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      data[i++] = normalize_u8(row[x][2]);
      data[i++] = normalize_u8(row[x][1]);
      data[i++] = normalize_u8(row[x][0]);
    }
  }
  return Image(m.rows, m.cols, std::move(data));
}

bool is_png(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t sig[] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  return b.size() >= 8 && std::equal(std::begin(sig), std::end(sig), b.begin());
}

bool is_jpeg(std::span<const std::uint8_t> b) {
  return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF;
}

cv::Mat decode_mat(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (!is_png(bytes) && !is_jpeg(bytes)) {
    throw FormatError("unsupported image format (expected PNG or JPEG): " + origin);
  }
  cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat decoded = cv::imdecode(raw, cv::IMREAD_COLOR);
  if (decoded.empty()) throw IngestionError("failed to decode image: " + origin);
  return decoded;
}

}  // namespace

Image::Image(int height, int width, std::vector<float> data)
    : height_(height), width_(width), data_(std::move(data)) {
  if (height < kMinSide || width < kMinSide) {
    throw SizeError("image must be at least 8x8, got " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (data_.size() != static_cast<std::size_t>(height) * width * 3) {
    throw ShapeError("image data size does not match " + std::to_string(height) + "x" + std::to_string(width) + "x3");
  }
  for (float v : data_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ShapeError("image value outside [0,1]");
  }
}

Image Image::filled(int height, int width, float value) {
  return Image(height, width, std::vector<float>(static_cast<std::size_t>(height) * width * 3, value));
}

bool MaskSpec::within(int image_height, int image_width) const {
  return top >= 0 && left >= 0 && height >= 0 && width >= 0 && top + height <= image_height &&
         left + width <= image_width;
}

std::uint8_t quantize_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

Image decode_image(std::span<const std::uint8_t> bytes, int target_size, const std::string& origin) {
  cv::Mat m = decode_mat(bytes, origin);
  if (target_size > 0 && (m.rows != target_size || m.cols != target_size)) {
    cv::Mat resized;
    cv::Mat f;
    m.convertTo(f, CV_32FC3, 1.0 / 255.0);
    cv::resize(f, resized, cv::Size(target_size, target_size), 0, 0, cv::INTER_LINEAR);
    cv::cvtColor(resized, resized, cv::COLOR_BGR2RGB);
    return from_mat_f32_rgb(resized);
  }
  return from_mat_u8_bgr(m);
}

Image load_image(const std::filesystem::path& path, int target_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot read image file: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IngestionError("empty image file: " + path.string());
  return decode_image(bytes, target_size, path.string());
}

std::pair<int, int> probe_size(std::span<const std::uint8_t> bytes) {
  cv::Mat m = decode_mat(bytes, "<probe>");
  return {m.rows, m.cols};
}

std::vector<std::uint8_t> encode_png(const Image& img) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_mat_u8_bgr(img), out)) throw IoError("PNG encoding failed");
  return out;
}

void save_image(const Image& img, const std::filesystem::path& path) {
  auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write: " + path.string());
}

Image jpeg_roundtrip(const Image& img, int quality) {
  if (quality < 1 || quality > 100) throw ConfigError("JPEG quality must be in [1,100]");
  std::vector<std::uint8_t> buf;
  cv::imencode(".jpg", to_mat_u8_bgr(img), buf, {cv::IMWRITE_JPEG_QUALITY, quality});
  return from_mat_u8_bgr(cv::imdecode(buf, cv::IMREAD_COLOR));
}

Image gaussian_blur(const Image& img, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("blur kernel must be odd and positive, got " + std::to_string(kernel));
  cv::Mat out;
  const double sigma = kernel / 6.0;
  cv::GaussianBlur(to_mat_f32_rgb(img), out, cv::Size(kernel, kernel), sigma, sigma, cv::BORDER_REFLECT_101);
  return from_mat_f32_rgb(out);
}

Image resize(const Image& img, int height, int width) {
  if (img.height() == height && img.width() == width) return img;
  cv::Mat out;
  cv::resize(to_mat_f32_rgb(img), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return from_mat_f32_rgb(out);
}

DatasetSplit split_dataset(std::vector<std::string> corpus, std::uint64_t seed) {
  if (corpus.size() < 10) {
    throw ConfigError("corpus too small to split: " + std::to_string(corpus.size()) + " items (need >= 10)");
  }
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit index draw so the order does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = corpus.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(corpus[i], corpus[j]);
  }
  const auto n_train = static_cast<std::size_t>(std::lround(0.7 * static_cast<double>(corpus.size())));
  DatasetSplit split;
  split.seed = seed;
  split.train.assign(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.test.assign(corpus.begin() + static_cast<std::ptrdiff_t>(n_train), corpus.end());
  return split;
}

MaskSpec scale_mask(const MaskSpec& reference, int image_height, int image_width) {
  const double sy = static_cast<double>(image_height) / kReferenceResolution;
  const double sx = static_cast<double>(image_width) / kReferenceResolution;
  MaskSpec m;
  m.height = std::min(image_height, static_cast<int>(std::lround(reference.height * sy)));
  m.width = std::min(image_width, static_cast<int>(std::lround(reference.width * sx)));
  if (m.area() == 0) {
    throw MaskError("scaled mask has zero area at " + std::to_string(image_height) + "x" + std::to_string(image_width));
  }
  m.left = (image_width - m.width) / 2;
  m.top = std::clamp(static_cast<int>(std::lround(image_height / 4.0 - m.height / 2.0)), 0, image_height - m.height);
  return m;
}

MaskSpec scale_mask(const MaskSpec& reference, const Image& image) {
  return scale_mask(reference, image.height(), image.width());
}

Corpus ingest_directory(const std::filesystem::path& dir, int target_size, const std::filesystem::path& manifest) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IngestionError("not a directory: " + dir.string());
  std::vector<std::string> ids;
  if (!manifest.empty()) {
    std::ifstream in(manifest);
    if (!in) throw IngestionError("cannot read manifest: " + manifest.string());
    for (std::string line; std::getline(in, line);) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) ids.push_back(line);
    }
  } else {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      auto ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") ids.push_back(entry.path().filename().string());
    }
    std::sort(ids.begin(), ids.end());
  }
  Corpus corpus;
  for (const auto& id : ids) corpus.emplace(id, load_image(dir / id, target_size));
  return corpus;
}

std::vector<std::string> corpus_ids(const Corpus& corpus) {
  std::vector<std::string> ids;
  ids.reserve(corpus.size());
  for (const auto& [id, _] : corpus) ids.push_back(id);
  return ids;
}

Image synthetic_artwork(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53); };
  auto color = [&] { return cv::Scalar(uni(0, 1), uni(0, 1), uni(0, 1)); };

  cv::Mat canvas(size, size, CV_32FC3);
  // Background: linear gradient between two colours at a random angle.
  const cv::Scalar c0 = color(), c1 = color();
  const double angle = uni(0, 2 * std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int y = 0; y < size; ++y) {
    auto* row = canvas.ptr<cv::Vec3f>(y);
    for (int x = 0; x < size; ++x) {
      const double t = std::clamp(0.5 + ((x - size / 2.0) * ca + (y - size / 2.0) * sa) / size, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) row[x][c] = static_cast<float>(c0[c] * (1 - t) + c1[c] * t);
    }
  }
  // Stripes or sinusoidal texture on some images.
  if (uni(0, 1) < 0.5) {
    const double freq = uni(2, 8) * 2 * std::numbers::pi / size;
    const double amp = uni(0.05, 0.2);
    const double ta = uni(0, std::numbers::pi);
    for (int y = 0; y < size; ++y) {
      auto* row = canvas.ptr<cv::Vec3f>(y);
      for (int x = 0; x < size; ++x) {
        const float d = static_cast<float>(amp * std::sin(freq * (x * std::cos(ta) + y * std::sin(ta))));
        for (int c = 0; c < 3; ++c) row[x][c] += d;
      }
    }
  }
  // Shapes.
  const int shapes = 2 + static_cast<int>(rng() % 5);
  for (int s = 0; s < shapes; ++s) {
    const cv::Point centre(static_cast<int>(uni(0, size)), static_cast<int>(uni(0, size)));
    const cv::Scalar col = color();
    const int extent = static_cast<int>(uni(size / 16.0, size / 3.0));
    switch (rng() % 4) {
      case 0:
        cv::circle(canvas, centre, extent, col, cv::FILLED, cv::LINE_AA);
        break;
      case 1:
        cv::rectangle(canvas, centre, centre + cv::Point(extent, static_cast<int>(extent * uni(0.5, 1.5))), col,
                      cv::FILLED, cv::LINE_AA);
        break;
      case 2:
        cv::ellipse(canvas, centre, cv::Size(extent, std::max(1, extent / 2)), uni(0, 180), 0, 360, col, cv::FILLED,
                    cv::LINE_AA);
        break;
      default:
        cv::line(canvas, centre, cv::Point(static_cast<int>(uni(0, size)), static_cast<int>(uni(0, size))), col,
                 std::max(1, size / 32), cv::LINE_AA);
        break;
    }
  }
  // Fine grain.
  for (int y = 0; y < size; ++y) {
    auto* row = canvas.ptr<cv::Vec3f>(y);
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) row[x][c] += static_cast<float>(uni(-0.02, 0.02));
    }
  }
  return from_mat_f32_rgb(canvas);
}

Corpus synthetic_corpus(int count, int size, std::uint64_t seed) {
  Corpus corpus;
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05d.png", i);
    corpus.emplace(id, synthetic_artwork(size, seed * 1000003ULL + static_cast<std::uint64_t>(i)));
  }
  return corpus;
}

torch::Tensor to_tensor(const Image& img) {
  return torch::from_blob(const_cast<float*>(img.data().data()), {img.height(), img.width(), 3}, torch::kFloat32)
      .permute({2, 0, 1})
      .clone();
}

torch::Tensor to_tensor(std::span<const Image> batch) {
  std::vector<torch::Tensor> ts;
  ts.reserve(batch.size());
  for (const auto& img : batch) ts.push_back(to_tensor(img));
  return torch::stack(ts);
}

torch::Tensor to_tensor(const Corpus& corpus, std::span<const std::string> ids) {
  std::vector<torch::Tensor> ts;
  ts.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = corpus.find(id);
    if (it == corpus.end()) throw ConfigError("unknown image id: " + id);
    ts.push_back(to_tensor(it->second));
  }
  return torch::stack(ts);
}

Image from_tensor(const torch::Tensor& chw) {
  if (chw.dim() != 3 || chw.size(0) != 3) throw ShapeError("expected a [3,H,W] tensor");
  auto hwc = chw.detach().to(torch::kFloat32).clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
  const auto* p = hwc.data_ptr<float>();
  return Image(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)),
               std::vector<float>(p, p + hwc.numel()));
}

std::vector<Image> batch_from_tensor(const torch::Tensor& nchw) {
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(nchw.size(0)));
  for (int64_t i = 0; i < nchw.size(0); ++i) out.push_back(from_tensor(nchw[i]));
  return out;
}

torch::Tensor mask_tensor(const MaskSpec& mask, int height, int width) {
  if (!mask.within(height, width)) throw MaskError("mask lies outside the image bounds");
  auto m = torch::zeros({1, 1, height, width});
  if (mask.area() > 0) {
    m.index_put_({0, 0, torch::indexing::Slice(mask.top, mask.top + mask.height),
                  torch::indexing::Slice(mask.left, mask.left + mask.width)},
                 1.0);
  }
  return m;
}

}  // namespace mamc
