#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mamc/image.hpp"

namespace mamc {

struct Series {
  std::string label;
  std::vector<double> values;
};

/// Line chart over x = 1..n with a legend; written as PNG.
void render_line_chart(const std::vector<Series>& series, const std::string& title, int width, int height,
                       const std::filesystem::path& path);

/// Grouped bars: one group per category, one bar per series.
void render_bar_chart(const std::vector<std::string>& categories, const std::vector<Series>& series,
                      const std::string& title, int width, int height, const std::filesystem::path& path);

/// Plain text table rendered to PNG; first row is the header.
void render_table(const std::vector<std::vector<std::string>>& rows, const std::string& title,
                  const std::filesystem::path& path);

/// Image grid: each inner vector is one row. Cells are upscaled by `scale`.
void render_gallery(const std::vector<std::vector<Image>>& rows, const std::filesystem::path& path, int scale = 2);

}  // namespace mamc
