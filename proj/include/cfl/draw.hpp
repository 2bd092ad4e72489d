#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "cfl/png_io.hpp"

namespace cfl::draw {

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
};

inline constexpr Color kWhite{255, 255, 255};
inline constexpr Color kBlack{0, 0, 0};
inline constexpr Color kGray{128, 128, 128};
inline constexpr Color kLightGray{220, 220, 220};
inline constexpr Color kUnknown{255, 0, 255};

/// Distinct colors for ID classes, cycled when there are more classes.
inline Color class_color(int id) {
  static constexpr std::array<Color, 6> palette = {
      Color{230, 25, 75}, Color{60, 180, 75}, Color{0, 130, 200}, Color{255, 225, 25}, Color{245, 130, 48}, Color{70, 240, 240}};
  return palette[static_cast<std::size_t>(id) % palette.size()];
}

namespace detail {

struct Glyph {
  char c;
  std::array<std::uint8_t, 7> rows;  // 5 low bits per row, MSB on the left
};

// 5x7 font; lowercase letters render as uppercase.
inline constexpr Glyph kFont[] = {
    {' ', {0, 0, 0, 0, 0, 0, 0}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'.', {0, 0, 0, 0, 0, 0x0C, 0x0C}},
    {',', {0, 0, 0, 0, 0x0C, 0x04, 0x08}},
    {':', {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}},
    {'-', {0, 0, 0, 0x1F, 0, 0, 0}},
    {'_', {0, 0, 0, 0, 0, 0, 0x1F}},
    {'=', {0, 0, 0x1F, 0, 0x1F, 0, 0}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {'/', {0, 0x01, 0x02, 0x04, 0x08, 0x10, 0}},
    {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
    {'+', {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}},
    {'|', {0x04, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'<', {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02}},
    {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}},
    {'?', {0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04}},
};

inline const Glyph& glyph(char c) {
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : kFont)
    if (g.c == u) return g;
  return kFont[sizeof(kFont) / sizeof(kFont[0]) - 1];
}

}  // namespace detail

inline void put(RgbRaster& img, int x, int y, Color c) { img.set(x, y, c.r, c.g, c.b); }

inline void fill_rect(RgbRaster& img, int x0, int y0, int x1, int y1, Color c) {
  for (int y = std::max(0, y0); y < std::min(img.height, y1); ++y)
    for (int x = std::max(0, x0); x < std::min(img.width, x1); ++x) put(img, x, y, c);
}

inline void line(RgbRaster& img, int x0, int y0, int x1, int y1, Color c) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    put(img, x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

/// Outline of [x0,x1) x [y0,y1), `thickness` pixels drawn inwards.
inline void rect(RgbRaster& img, int x0, int y0, int x1, int y1, Color c, int thickness = 1) {
  for (int t = 0; t < thickness; ++t) {
    line(img, x0 + t, y0 + t, x1 - 1 - t, y0 + t, c);
    line(img, x0 + t, y1 - 1 - t, x1 - 1 - t, y1 - 1 - t, c);
    line(img, x0 + t, y0 + t, x0 + t, y1 - 1 - t, c);
    line(img, x1 - 1 - t, y0 + t, x1 - 1 - t, y1 - 1 - t, c);
  }
}

/// Dashed outline, used to tell unknown-class boxes apart at a glance.
inline void dashed_rect(RgbRaster& img, int x0, int y0, int x1, int y1, Color c, int thickness = 1, int dash = 4) {
  auto seg = [&](int xa, int ya, int xb, int yb) {
    const int len = std::max(std::abs(xb - xa), std::abs(yb - ya));
    for (int i = 0; i <= len; ++i) {
      if ((i / dash) % 2) continue;
      const int x = len ? xa + (xb - xa) * i / len : xa;
      const int y = len ? ya + (yb - ya) * i / len : ya;
      put(img, x, y, c);
    }
  };
  for (int t = 0; t < thickness; ++t) {
    seg(x0 + t, y0 + t, x1 - 1 - t, y0 + t);
    seg(x0 + t, y1 - 1 - t, x1 - 1 - t, y1 - 1 - t);
    seg(x0 + t, y0 + t, x0 + t, y1 - 1 - t);
    seg(x1 - 1 - t, y0 + t, x1 - 1 - t, y1 - 1 - t);
  }
}

inline int text_width(const std::string& s, int scale = 1) { return static_cast<int>(s.size()) * 6 * scale; }
inline int text_height(int scale = 1) { return 7 * scale; }

inline void text(RgbRaster& img, int x, int y, const std::string& s, Color c, int scale = 1) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& g = detail::glyph(s[i]);
    const int ox = x + static_cast<int>(i) * 6 * scale;
    for (int r = 0; r < 7; ++r)
      for (int col = 0; col < 5; ++col)
        if (g.rows[r] & (0x10 >> col)) fill_rect(img, ox + col * scale, y + r * scale, ox + (col + 1) * scale, y + (r + 1) * scale, c);
  }
}

/// Text on a filled box, clamped inside the image.
inline void label(RgbRaster& img, int x, int y, const std::string& s, Color fg, Color bg, int scale = 1) {
  const int w = text_width(s, scale) + 2;
  const int h = text_height(scale) + 2;
  x = std::clamp(x, 0, std::max(0, img.width - w));
  y = std::clamp(y, 0, std::max(0, img.height - h));
  fill_rect(img, x, y, x + w, y + h, bg);
  text(img, x + 1, y + 1, s, fg, scale);
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline RgbRaster upscale(const RgbRaster& src, int factor) {
  RgbRaster out(src.width * factor, src.height * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const auto* p = &src.data[(static_cast<std::size_t>(y / factor) * src.width + x / factor) * 3];
      out.set(x, y, p[0], p[1], p[2]);
    }
  return out;
}

struct Series {
  std::string name;
  Color color;
  std::vector<std::pair<double, double>> points;
};

/// Line chart with labelled axes and a legend.
inline RgbRaster line_plot(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           int width = 800, int height = 480) {
  RgbRaster img(width, height, 255);
  const int left = 70, right = width - 170, top = 30, bottom = height - 40;
  text(img, left, 10, title, kBlack, 2);
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(y)) continue;
      if (!any) {
        x0 = x1 = x;
        y0 = y1 = y;
        any = true;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  y0 = std::min(y0, 0.0);
  auto px = [&](double x) { return left + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (right - left))); };
  auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (bottom - top))); };

  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0;
    line(img, left, py(yv), right, py(yv), kLightGray);
    text(img, 4, py(yv) - 3, fixed(yv, 3), kBlack);
  }
  line(img, left, top, left, bottom, kBlack);
  line(img, left, bottom, right, bottom, kBlack);
  text(img, left, bottom + 6, fixed(x0, 0), kBlack);
  text(img, right - text_width(fixed(x1, 0)), bottom + 6, fixed(x1, 0), kBlack);
  text(img, (left + right - text_width(x_label)) / 2, bottom + 20, x_label, kBlack);

  int ly = top;
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.points.size(); ++i) {
      const auto& a = s.points[i - 1];
      const auto& b = s.points[i];
      if (std::isfinite(a.second) && std::isfinite(b.second)) line(img, px(a.first), py(a.second), px(b.first), py(b.second), s.color);
    }
    fill_rect(img, right + 12, ly, right + 24, ly + 7, s.color);
    text(img, right + 30, ly, s.name, kBlack);
    ly += 14;
  }
  return img;
}

/// Renders rows of cells as a grid; the first row is drawn as a header.
inline RgbRaster table_image(const std::vector<std::vector<std::string>>& rows, const std::string& title, int scale = 2) {
  std::vector<int> widths;
  for (const auto& r : rows) {
    if (widths.size() < r.size()) widths.resize(r.size(), 0);
    for (std::size_t c = 0; c < r.size(); ++c) widths[c] = std::max(widths[c], text_width(r[c], scale));
  }
  const int pad = 6 * scale;
  const int row_h = text_height(scale) + 2 * pad;
  int total_w = 0;
  for (int w : widths) total_w += w + 2 * pad;
  const int title_h = text_height(scale) + 2 * pad;
  RgbRaster img(std::max(total_w, text_width(title, scale) + 2 * pad) + 1, title_h + row_h * static_cast<int>(rows.size()) + 1, 255);
  text(img, pad, pad, title, kBlack, scale);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int y = title_h + static_cast<int>(r) * row_h;
    if (r == 0) fill_rect(img, 0, y, total_w, y + row_h, kLightGray);
    int x = 0;
    for (std::size_t c = 0; c < widths.size(); ++c) {
      if (c < rows[r].size()) text(img, x + pad, y + pad, rows[r][c], kBlack, scale);
      rect(img, x, y, x + widths[c] + 2 * pad + 1, y + row_h + 1, kGray);
      x += widths[c] + 2 * pad;
    }
  }
  return img;
}

}  // namespace cfl::draw
