#include "unit_test.hpp"

#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "mamc/errors.hpp"
#include "mamc/image.hpp"
#include "support.hpp"

using namespace mamc;

TEST_CASE("normalization endpoints and lattice round trip") {
  CHECK(normalize_u8(255) == 1.0f);
  CHECK(normalize_u8(0) == 0.0f);
  for (int v = 0; v <= 255; ++v) CHECK(quantize_u8(normalize_u8(static_cast<std::uint8_t>(v))) == v);
}

TEST_CASE("image construction enforces its invariants") {
  CHECK_THROWS_AS(Image(7, 8, std::vector<float>(7 * 8 * 3, 0.5f)), SizeError);
  CHECK_THROWS_AS(Image(8, 8, std::vector<float>(10, 0.5f)), ShapeError);
  auto bad = std::vector<float>(8 * 8 * 3, 0.5f);
  bad[5] = 1.5f;
  CHECK_THROWS_AS(Image(8, 8, bad), ShapeError);
  bad[5] = std::nanf("");
  CHECK_THROWS_AS(Image(8, 8, bad), ShapeError);
  const auto img = Image::filled(8, 9, 0.25f);
  CHECK(img.height() == 8);
  CHECK(img.width() == 9);
  CHECK(img.at(7, 8, 2) == 0.25f);
}

TEST_CASE("png save/load round trip stays within one quantization step") {
  testing::TempDir dir("image");
  const auto original = synthetic_artwork(32, 11);
  save_image(original, dir / "a.png");
  const auto first = load_image(dir / "a.png", 32);
  save_image(first, dir / "b.png");
  const auto second = load_image(dir / "b.png", 32);
  double worst = 0;
  for (std::size_t i = 0; i < first.size(); ++i) {
    worst = std::max(worst, std::abs(double(first.data()[i]) - second.data()[i]));
  }
  CHECK(worst <= 1.0 / 255.0 + 1e-7);
  CHECK(second == first);
}

TEST_CASE("decode resizes, promotes grayscale and rejects unknown formats") {
  cv::Mat gray(20, 30, CV_8UC1);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 30; ++x) gray.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(x * 8);
  std::vector<std::uint8_t> png;
  cv::imencode(".png", gray, png);
  const auto img = decode_image(png, 16);
  CHECK(img.height() == 16);
  CHECK(img.width() == 16);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      CHECK(img.at(y, x, 0) == img.at(y, x, 1));
      CHECK(img.at(y, x, 1) == img.at(y, x, 2));
    }
  }
  const auto native = decode_image(png, 0);
  CHECK(native.height() == 20);
  CHECK(native.width() == 30);
  CHECK(probe_size(png) == std::pair{20, 30});

  std::vector<std::uint8_t> jpeg;
  cv::imencode(".jpg", gray, jpeg);
  CHECK(decode_image(jpeg, 8).width() == 8);

  const std::vector<std::uint8_t> gif{'G', 'I', 'F', '8', '9', 'a', 0, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(decode_image(gif, 8), FormatError);
}

TEST_CASE("unreadable files name the path") {
  try {
    load_image("/nonexistent/dir/x.png", 16);
    FAIL("expected an ingestion error");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/dir/x.png") != std::string::npos);
  }
}

TEST_CASE("split is 70/30, disjoint, complete and deterministic") {
  auto ids = [](int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("img" + std::to_string(i));
    return v;
  };
  const auto s1000 = split_dataset(ids(1000), 3);
  CHECK(s1000.train.size() == 700);
  CHECK(s1000.test.size() == 300);
  const auto s10 = split_dataset(ids(10), 3);
  CHECK(s10.train.size() == 7);
  CHECK(s10.test.size() == 3);
  CHECK_THROWS_AS(split_dataset(ids(9), 3), ConfigError);

  std::set<std::string> all(s1000.train.begin(), s1000.train.end());
  for (const auto& t : s1000.test) CHECK(all.insert(t).second);
  CHECK(all.size() == 1000);

  const auto again = split_dataset(ids(1000), 3);
  CHECK(again.train == s1000.train);
  CHECK(again.test == s1000.test);
  CHECK(split_dataset(ids(1000), 4).train != s1000.train);
  for (int n : {10, 11, 13, 37, 101}) {
    const auto s = split_dataset(ids(n), 0);
    CHECK(s.train.size() == static_cast<std::size_t>(std::lround(0.7 * n)));
    CHECK(s.train.size() + s.test.size() == static_cast<std::size_t>(n));
  }
}

TEST_CASE("reference mask scaling") {
  const auto m64 = scale_mask(kReferenceMask, 64, 64);
  CHECK(m64.width == 15);
  CHECK(m64.height == 8);
  CHECK(m64.left == 24);
  CHECK(m64.top == 12);
  CHECK(m64.within(64, 64));
  CHECK(scale_mask(kReferenceMask, 512, 512) == kReferenceMask);
  for (int h = 8; h <= 96; h += 3) {
    for (int w = 8; w <= 96; w += 5) {
      try {
        CHECK(scale_mask(kReferenceMask, h, w).within(h, w));
      } catch (const MaskError&) {
        // Degenerate at this size; the error is the declared outcome.
      }
    }
  }
  CHECK_THROWS_AS(scale_mask(MaskSpec{0, 0, 1, 1}, 64, 64), MaskError);
}

TEST_CASE("ingestion honours the manifest and keeps the range invariant") {
  testing::TempDir dir("ingest");
  for (int i = 0; i < 4; ++i) save_image(testing::random_image(12 + i, 10, i), dir / ("p" + std::to_string(i) + ".png"));
  {
    std::ofstream m(dir / "list.txt");
    m << "p1.png\np3.png\n";
  }
  const auto all = ingest_directory(dir.path(), 16);
  CHECK(all.size() == 4);
  for (const auto& [id, img] : all) {
    CHECK(img.height() == 16);
    for (float v : img.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  const auto listed = ingest_directory(dir.path(), 16, dir / "list.txt");
  CHECK(corpus_ids(listed) == std::vector<std::string>{"p1.png", "p3.png"});
}

TEST_CASE("synthetic corpus is deterministic and within range") {
  const auto a = synthetic_corpus(12, 32, 5);
  const auto b = synthetic_corpus(12, 32, 5);
  CHECK((a == b));
  CHECK(a.size() == 12);
  CHECK(a.begin()->second != std::next(a.begin())->second);
  for (const auto& [id, img] : a) {
    for (float v : img.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }
}

TEST_CASE("post-processing operators") {
  const auto img = testing::random_image(32, 32, 9);
  CHECK_THROWS_AS(gaussian_blur(img, 4), ConfigError);
  CHECK_THROWS_AS(jpeg_roundtrip(img, 0), ConfigError);
  CHECK_THROWS_AS(jpeg_roundtrip(img, 101), ConfigError);
  const auto blurred = gaussian_blur(img, 11);
  const auto jpeg = jpeg_roundtrip(img, 5);
  CHECK(blurred.same_shape(img));
  CHECK(jpeg.same_shape(img));
  CHECK(blurred != img);
  const auto flat = Image::filled(16, 16, 0.5f);
  const auto flat_blur = gaussian_blur(flat, 7);
  for (float v : flat_blur.data()) CHECK(v == doctest::Approx(0.5f).epsilon(1e-5));
}

TEST_CASE("tensor bridge round trips") {
  const auto img = testing::random_image(8, 16, 2);
  const auto t = to_tensor(img);
  CHECK(t.sizes() == torch::IntArrayRef{3, 8, 16});
  CHECK(t[1][3][5].item<float>() == img.at(3, 5, 1));
  CHECK(from_tensor(t) == img);
  const auto m = mask_tensor(MaskSpec{1, 2, 3, 4}, 8, 16);
  CHECK(m.sum().item<float>() == 12.0f);
  CHECK(m[0][0][1][2].item<float>() == 1.0f);
  CHECK(m[0][0][0][2].item<float>() == 0.0f);
}
