#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace mamc {

/// H×W×C image with values in [0, 1], stored row-major (HWC).
///
/// Constructed images always carry 3 channels and are at least 8×8; the
/// checked constructor enforces the range invariant.
class Image {
 public:
  static constexpr int kMinSide = 8;

  Image() = default;
  Image(int height, int width, std::vector<float> data);
  static Image filled(int height, int width, float value);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return 3; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  float at(int y, int x, int c) const { return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

struct MaskSpec {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  int area() const { return height * width; }
  bool within(int image_height, int image_width) const;
  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
};

/// In-memory image collection keyed by identifier.
using Corpus = std::map<std::string, Image>;

// 8-bit <-> normalized intensity.
inline float normalize_u8(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }
std::uint8_t quantize_u8(float v);

/// Decodes PNG or JPEG bytes, promotes grayscale to RGB and resizes
/// bilinearly to target_size × target_size. target_size 0 keeps the
/// native size.
Image decode_image(std::span<const std::uint8_t> bytes, int target_size, const std::string& origin = "<memory>");
Image load_image(const std::filesystem::path& path, int target_size);

std::vector<std::uint8_t> encode_png(const Image& img);
void save_image(const Image& img, const std::filesystem::path& path);

/// Baseline JPEG round trip at the given quality (1-100).
Image jpeg_roundtrip(const Image& img, int quality);
/// Gaussian blur with an odd square kernel, sigma = kernel / 6.
Image gaussian_blur(const Image& img, int kernel);
Image resize(const Image& img, int height, int width);

/// Native size of encoded bytes as (height, width).
std::pair<int, int> probe_size(std::span<const std::uint8_t> bytes);

DatasetSplit split_dataset(std::vector<std::string> corpus, std::uint64_t seed);

/// Reference inpainting mask: 120 wide × 66 tall at 512×512.
inline constexpr MaskSpec kReferenceMask{95, 196, 66, 120};
inline constexpr int kReferenceResolution = 512;

/// Scales a mask defined at kReferenceResolution to the image, centred
/// horizontally and vertically centred on the middle of the upper half.
MaskSpec scale_mask(const MaskSpec& reference, int image_height, int image_width);
MaskSpec scale_mask(const MaskSpec& reference, const Image& image);

/// Reads every PNG/JPEG in a directory (or the ids listed in `manifest`,
/// one per line) into memory at target_size.
Corpus ingest_directory(const std::filesystem::path& dir, int target_size,
                        const std::filesystem::path& manifest = {});
std::vector<std::string> corpus_ids(const Corpus& corpus);

/// Deterministic procedural artwork: gradients, shapes, stripes and texture.
Image synthetic_artwork(int size, std::uint64_t seed);
/// The bundled toy corpus: 1000 synthetic artworks at 64×64.
inline constexpr int kToyCorpusCount = 1000;
inline constexpr int kToyResolution = 64;
inline constexpr std::uint64_t kToyCorpusSeed = 1;
Corpus synthetic_corpus(int count, int size, std::uint64_t seed);

// Tensor bridge. Batches are [N, 3, H, W] float32.
torch::Tensor to_tensor(const Image& img);
torch::Tensor to_tensor(std::span<const Image> batch);
torch::Tensor to_tensor(const Corpus& corpus, std::span<const std::string> ids);
Image from_tensor(const torch::Tensor& chw);
std::vector<Image> batch_from_tensor(const torch::Tensor& nchw);

/// Binary mask tensor [1, 1, H, W], 1 inside the rectangle.
torch::Tensor mask_tensor(const MaskSpec& mask, int height, int width);

}  // namespace mamc
