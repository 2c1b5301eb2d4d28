#include "mamc/plot.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mamc/errors.hpp"

namespace mamc {
namespace {

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                               {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};

cv::Scalar colour(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

void write_png(const cv::Mat& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write plot: " + path.string());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Frame {
  cv::Rect area;
  double lo, hi;
  int y(double v) const { return area.y + area.height - static_cast<int>((v - lo) / (hi - lo) * area.height); }
};

Frame draw_axes(cv::Mat& canvas, const std::string& title, double lo, double hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  Frame f{cv::Rect(70, 40, canvas.cols - 230, canvas.rows - 80), lo - pad, hi + pad};
  cv::putText(canvas, title, {70, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
  cv::rectangle(canvas, f.area, {0, 0, 0}, 1);
  for (int k = 0; k <= 4; ++k) {
    const double v = f.lo + (f.hi - f.lo) * k / 4.0;
    const int yy = f.y(v);
    cv::line(canvas, {f.area.x - 4, yy}, {f.area.x, yy}, {0, 0, 0});
    cv::putText(canvas, fmt(v), {5, yy + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
  }
  if (f.lo < 0 && f.hi > 0) cv::line(canvas, {f.area.x, f.y(0)}, {f.area.x + f.area.width, f.y(0)}, {200, 200, 200});
  return f;
}

void draw_legend(cv::Mat& canvas, const std::vector<Series>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const int yy = 50 + static_cast<int>(i) * 20;
    cv::line(canvas, {canvas.cols - 150, yy}, {canvas.cols - 130, yy}, colour(i), 2);
    cv::putText(canvas, series[i].label, {canvas.cols - 125, yy + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1,
                cv::LINE_AA);
  }
}

cv::Mat to_bgr8(const Image& img) {
  cv::Mat m(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      m.at<cv::Vec3b>(y, x) = {quantize_u8(img.at(y, x, 2)), quantize_u8(img.at(y, x, 1)), quantize_u8(img.at(y, x, 0))};
    }
  }
  return m;
}

}  // namespace

void render_line_chart(const std::vector<Series>& series, const std::string& title, int width, int height,
                       const std::filesystem::path& path) {
  cv::Mat canvas(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    n = std::max(n, s.values.size());
  }
  if (!std::isfinite(lo)) lo = hi = 0;
  const auto f = draw_axes(canvas, title, lo, hi);
  auto x_at = [&](std::size_t i) {
    return f.area.x + (n <= 1 ? f.area.width / 2 : static_cast<int>(i * f.area.width / (n - 1)));
  };
  for (std::size_t i = 0; i < n; ++i) {
    cv::putText(canvas, std::to_string(i + 1), {x_at(i) - 4, f.area.y + f.area.height + 15}, cv::FONT_HERSHEY_SIMPLEX,
                0.4, {0, 0, 0}, 1, cv::LINE_AA);
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& v = series[k].values;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const cv::Point p(x_at(i), f.y(v[i]));
      cv::circle(canvas, p, 3, colour(k), cv::FILLED, cv::LINE_AA);
      if (i > 0) cv::line(canvas, {x_at(i - 1), f.y(v[i - 1])}, p, colour(k), 2, cv::LINE_AA);
    }
  }
  draw_legend(canvas, series);
  write_png(canvas, path);
}

void render_bar_chart(const std::vector<std::string>& categories, const std::vector<Series>& series,
                      const std::string& title, int width, int height, const std::filesystem::path& path) {
  cv::Mat canvas(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo = 0, hi = 0;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  const auto f = draw_axes(canvas, title, lo, hi);
  const int groups = std::max<int>(1, static_cast<int>(categories.size()));
  const int group_w = f.area.width / groups;
  const int bar_w = std::max(2, (group_w - 10) / std::max<int>(1, static_cast<int>(series.size())));
  for (int g = 0; g < groups; ++g) {
    const int gx = f.area.x + g * group_w + 5;
    if (g < static_cast<int>(categories.size())) {
      cv::putText(canvas, categories[g], {gx, f.area.y + f.area.height + 15}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                  {0, 0, 0}, 1, cv::LINE_AA);
    }
    for (std::size_t k = 0; k < series.size(); ++k) {
      if (g >= static_cast<int>(series[k].values.size()) || !std::isfinite(series[k].values[g])) continue;
      const int y0 = f.y(0), y1 = f.y(series[k].values[g]);
      cv::rectangle(canvas, cv::Point(gx + static_cast<int>(k) * bar_w, std::min(y0, y1)),
                    cv::Point(gx + static_cast<int>(k + 1) * bar_w - 2, std::max(y0, y1)), colour(k), cv::FILLED);
    }
  }
  draw_legend(canvas, series);
  write_png(canvas, path);
}

void render_table(const std::vector<std::vector<std::string>>& rows, const std::string& title,
                  const std::filesystem::path& path) {
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  std::vector<int> widths(cols, 60);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      int base = 0;
      const auto sz = cv::getTextSize(r[c], cv::FONT_HERSHEY_SIMPLEX, 0.45, 1, &base);
      widths[c] = std::max(widths[c], sz.width + 16);
    }
  }
  int total_w = 20;
  for (int w : widths) total_w += w;
  const int row_h = 24;
  cv::Mat canvas(50 + row_h * static_cast<int>(rows.size()), std::max(total_w, 300), CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(canvas, title, {10, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    int x = 10;
    const int y = 50 + static_cast<int>(r) * row_h;
    if (r == 0) cv::rectangle(canvas, {5, y - 17}, {total_w, y + 6}, {230, 230, 230}, cv::FILLED);
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      cv::putText(canvas, rows[r][c], {x, y}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
      x += widths[c];
    }
  }
  write_png(canvas, path);
}

void render_gallery(const std::vector<std::vector<Image>>& rows, const std::filesystem::path& path, int scale) {
  if (rows.empty()) throw ConfigError("gallery needs at least one row");
  int cell_h = 0, cell_w = 0;
  std::size_t cols = 0;
  for (const auto& r : rows) {
    cols = std::max(cols, r.size());
    for (const auto& img : r) {
      cell_h = std::max(cell_h, img.height() * scale);
      cell_w = std::max(cell_w, img.width() * scale);
    }
  }
  const int gap = 4;
  cv::Mat canvas(static_cast<int>(rows.size()) * (cell_h + gap) + gap, static_cast<int>(cols) * (cell_w + gap) + gap,
                 CV_8UC3, cv::Scalar(255, 255, 255));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      cv::Mat cell;
      cv::resize(to_bgr8(rows[r][c]), cell, {rows[r][c].width() * scale, rows[r][c].height() * scale}, 0, 0,
                 cv::INTER_NEAREST);
      cell.copyTo(canvas(cv::Rect(gap + static_cast<int>(c) * (cell_w + gap), gap + static_cast<int>(r) * (cell_h + gap),
                                  cell.cols, cell.rows)));
    }
  }
  write_png(canvas, path);
}

}  // namespace mamc
