#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "occmem/core/error.hpp"
#include "occmem/core/image.hpp"
#include "occmem/detection/box.hpp"

namespace occmem::eval {

using Rgb = std::array<std::uint8_t, 3>;

inline Rgb class_color(int label) {
  static const Rgb colors[] = {{230, 60, 60}, {60, 120, 230}, {240, 190, 40}, {170, 70, 200},
                               {40, 190, 170}, {250, 120, 30}};
  return colors[(std::max(label, 1) - 1) % 6];
}

inline Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  OCCMEM_CHECK(img.channels == 1, "expected a 1- or 3-channel image");
  Image out(img.width, img.height, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, y, 0);
  return out;
}

// Outline, clipped to the image. `dashed` skips every other 3 px run.
inline void draw_box(Image& img, const det::Box& b, Rgb color, int thickness = 1, bool dashed = false) {
  OCCMEM_CHECK(img.channels == 3, "draw_box needs an RGB image");
  const int x1 = static_cast<int>(std::floor(b.x1)), y1 = static_cast<int>(std::floor(b.y1));
  const int x2 = static_cast<int>(std::ceil(b.x2)) - 1, y2 = static_cast<int>(std::ceil(b.y2)) - 1;
  auto put = [&](int x, int y, int along) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    if (dashed && (along / 3) % 2) return;
    for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[c];
  };
  for (int t = 0; t < thickness; ++t) {
    for (int x = x1; x <= x2; ++x) {
      put(x, y1 + t, x - x1);
      put(x, y2 - t, x - x1);
    }
    for (int y = y1; y <= y2; ++y) {
      put(x1 + t, y, y - y1);
      put(x2 - t, y, y - y1);
    }
  }
}

// Row-major grid of equally sized RGB tiles with a `gap` px white border.
inline Image tile(const std::vector<std::vector<Image>>& rows, int gap = 2) {
  OCCMEM_CHECK(!rows.empty() && !rows[0].empty(), "nothing to tile");
  const int w = rows[0][0].width, h = rows[0][0].height;
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  const int W = static_cast<int>(cols) * (w + gap) + gap;
  const int H = static_cast<int>(rows.size()) * (h + gap) + gap;
  Image out(W, H, 3, 255);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const Image t = to_rgb(rows[r][c]);
      OCCMEM_CHECK(t.width == w && t.height == h, "tiles must share dims");
      const int ox = gap + static_cast<int>(c) * (w + gap), oy = gap + static_cast<int>(r) * (h + gap);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int ch = 0; ch < 3; ++ch) out.at(ox + x, oy + y, ch) = t.at(x, y, ch);
    }
  return out;
}

}  // namespace occmem::eval
