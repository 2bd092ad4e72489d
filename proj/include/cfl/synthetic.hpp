#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cfl/geometry.hpp"
#include "cfl/random.hpp"

namespace cfl {

enum class Shape : int { Circle = 0, Square, Triangle, Cross, Star, Ring };

inline constexpr int kNumShapes = 6;
inline constexpr std::array<std::string_view, kNumShapes> kShapeNames = {
    "circle", "square", "triangle", "cross", "star", "ring"};

inline std::string_view shape_name(Shape s) { return kShapeNames[static_cast<int>(s)]; }

inline Shape parse_shape(std::string_view name) {
  for (int i = 0; i < kNumShapes; ++i) {
    if (kShapeNames[i] == name) return static_cast<Shape>(i);
  }
  throw std::invalid_argument("unknown shape class '" + std::string(name) + "'");
}

struct ShapeObject {
  Shape shape = Shape::Circle;
  BoundingBox box;
};

/// A rendered RGB image. Pixels are stored planar (channel, row, column) with
/// values in [0,1]; rendering quantises to multiples of 1/255 so a PNG round
/// trip is exact. `instance_map` holds 0 for background and i+1 for pixels of
/// objects[i]; it is dropped by loaders and not maintained by augmentation.
struct ShapeImage {
  int height = 64;
  int width = 64;
  std::vector<float> pixels;
  std::vector<ShapeObject> objects;
  std::vector<std::uint8_t> instance_map;
  std::uint64_t seed = 0;

  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

struct RenderOptions {
  int height = 64;
  int width = 64;
  int min_size = 14;
  int max_size = 26;
  // 0 draws a count uniformly from [1,4].
  int num_objects = 0;
  // per-pixel Gaussian sensor noise
  double noise_sigma = 0.02;
};

namespace detail {

/// Shape membership in a unit frame: (u,v) in [-1,1]^2, v grows downwards.
inline bool shape_contains(Shape s, double u, double v) {
  const double r = std::sqrt(u * u + v * v);
  switch (s) {
    case Shape::Circle:
      return r <= 1.0;
    case Shape::Square:
      return std::abs(u) <= 0.85 && std::abs(v) <= 0.85;
    case Shape::Triangle: {
      if (v < -0.9 || v > 0.9) return false;
      return std::abs(u) <= 0.95 * (v + 0.9) / 1.8;
    }
    case Shape::Cross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case Shape::Star: {
      const double theta = std::atan2(u, -v);  // 0 points up
      double t = theta * 5.0 / 6.283185307179586;
      t -= std::floor(t);
      const double tri = std::abs(2.0 * t - 1.0);  // 0 at a tip, 1 between tips
      return r <= 1.0 - 0.6 * tri;
    }
    case Shape::Ring:
      return r <= 1.0 && r >= 0.55;
  }
  return false;
}

inline float quantise(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::round(v * 255.0) / 255.0);
}

}  // namespace detail

/// Renders a deterministic image from `seed` whose objects are drawn only from
/// `allowed`. Objects never overlap and their boxes are the tight pixel extent
/// of the drawn mask.
inline ShapeImage render_image(std::uint64_t seed, const std::vector<Shape>& allowed,
                               const RenderOptions& opt = {}) {
  if (allowed.empty()) throw std::invalid_argument("render_image: no allowed classes");
  if (opt.num_objects < 0 || opt.num_objects > 4) {
    throw std::invalid_argument("render_image: num_objects must be in [0,4]");
  }
  Rng rng(derive_seed({seed, 0x5ea7}));
  ShapeImage img;
  img.height = opt.height;
  img.width = opt.width;
  img.seed = seed;
  const std::size_t plane = static_cast<std::size_t>(opt.height) * opt.width;
  img.pixels.assign(3 * plane, 0.f);
  img.instance_map.assign(plane, 0);

  std::array<double, 3> base{};
  std::array<double, 3> grad_x{};
  std::array<double, 3> grad_y{};
  for (int c = 0; c < 3; ++c) {
    base[c] = uniform(rng, 0.05, 0.35);
    grad_x[c] = uniform(rng, -0.1, 0.1);
    grad_y[c] = uniform(rng, -0.1, 0.1);
  }
  const int count = opt.num_objects > 0 ? opt.num_objects : uniform_int(rng, 1, 4);

  struct Placed {
    Shape shape;
    double x0, y0, size;
    std::array<double, 3> color;
  };
  std::vector<Placed> placed;
  for (int i = 0; i < count; ++i) {
    const Shape shape = allowed[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(allowed.size()) - 1))];
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double size = uniform(rng, opt.min_size, opt.max_size);
      const double x0 = uniform(rng, 1.0, opt.width - 1.0 - size);
      const double y0 = uniform(rng, 1.0, opt.height - 1.0 - size);
      const BoundingBox cand{x0 - 2, y0 - 2, x0 + size + 2, y0 + size + 2};
      bool clash = false;
      for (const auto& p : placed) {
        if (intersection_area(cand, {p.x0, p.y0, p.x0 + p.size, p.y0 + p.size}) > 0.0) {
          clash = true;
          break;
        }
      }
      if (clash) continue;
      std::array<double, 3> color{};
      for (auto& ch : color) ch = uniform(rng, 0.45, 1.0);
      placed.push_back({shape, x0, y0, size, color});
      break;
    }
  }

  for (int y = 0; y < opt.height; ++y) {
    for (int x = 0; x < opt.width; ++x) {
      const double gx = (x + 0.5) / opt.width - 0.5;
      const double gy = (y + 0.5) / opt.height - 0.5;
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(base[c] + grad_x[c] * gx + grad_y[c] * gy);
      }
    }
  }

  for (std::size_t i = 0; i < placed.size(); ++i) {
    const auto& p = placed[i];
    const double half = 0.5 * p.size;
    const double cx = p.x0 + half;
    const double cy = p.y0 + half;
    int x_lo = opt.width, y_lo = opt.height, x_hi = -1, y_hi = -1;
    for (int y = static_cast<int>(p.y0); y <= static_cast<int>(p.y0 + p.size) && y < opt.height; ++y) {
      for (int x = static_cast<int>(p.x0); x <= static_cast<int>(p.x0 + p.size) && x < opt.width; ++x) {
        const double u = (x + 0.5 - cx) / half;
        const double v = (y + 0.5 - cy) / half;
        if (!detail::shape_contains(p.shape, u, v)) continue;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(p.color[c]);
        img.instance_map[static_cast<std::size_t>(y) * opt.width + x] = static_cast<std::uint8_t>(img.objects.size() + 1);
        x_lo = std::min(x_lo, x);
        y_lo = std::min(y_lo, y);
        x_hi = std::max(x_hi, x);
        y_hi = std::max(y_hi, y);
      }
    }
    if (x_hi < 0) continue;
    img.objects.push_back({p.shape, {double(x_lo), double(y_lo), double(x_hi + 1), double(y_hi + 1)}});
  }

  for (auto& v : img.pixels) v = detail::quantise(v + normal(rng, 0.0, opt.noise_sigma));
  return img;
}

enum class AugmentStrength { Weak, Strong };

/// One concrete augmentation draw. A default-constructed value is the identity.
struct AugmentParams {
  bool flip = false;
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  std::optional<BoundingBox> erase;
  double erase_value = 0.0;

  bool photometric_identity() const {
    return brightness == 0.0 && contrast == 1.0 && noise_sigma == 0.0 && !erase;
  }
};

/// Draws augmentation parameters. Weak is a horizontal flip with p=0.5.
/// Strong adds photometric jitter plus noise, then erases one rectangle that
/// does not touch any object box.
inline AugmentParams sample_augment(const ShapeImage& img, AugmentStrength strength, std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0xa06}));
  AugmentParams p;
  p.flip = bernoulli(rng, 0.5);
  if (strength == AugmentStrength::Weak) return p;
  p.brightness = uniform(rng, -0.15, 0.15);
  p.contrast = uniform(rng, 0.7, 1.3);
  p.noise_sigma = uniform(rng, 0.0, 0.05);
  p.noise_seed = rng();
  for (int attempt = 0; attempt < 20; ++attempt) {
    const double w = uniform(rng, 6.0, 14.0);
    const double h = uniform(rng, 6.0, 14.0);
    const double x0 = std::floor(uniform(rng, 0.0, img.width - w));
    const double y0 = std::floor(uniform(rng, 0.0, img.height - h));
    const BoundingBox r{x0, y0, x0 + std::ceil(w), y0 + std::ceil(h)};
    // the erase rectangle is expressed in post-flip coordinates
    bool touches = false;
    for (const auto& o : img.objects) {
      BoundingBox b = o.box;
      if (p.flip) b = {img.width - o.box.x_max, o.box.y_min, img.width - o.box.x_min, o.box.y_max};
      if (intersection_area(r, b) > 0.0) {
        touches = true;
        break;
      }
    }
    if (!touches) {
      p.erase = r;
      p.erase_value = uniform(rng, 0.0, 1.0);
      break;
    }
  }
  return p;
}

inline BoundingBox flip_box(const BoundingBox& b, int width) {
  return {width - b.x_max, b.y_min, width - b.x_min, b.y_max};
}

inline ShapeImage apply_augment(const ShapeImage& img, const AugmentParams& p) {
  ShapeImage out = img;
  out.instance_map.clear();
  const int h = img.height;
  const int w = img.width;
  if (p.flip) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y, w - 1 - x);
    for (auto& o : out.objects) o.box = flip_box(o.box, w);
  }
  if (p.photometric_identity()) return out;
  Rng noise(p.noise_seed);
  for (auto& v : out.pixels) {
    double t = (v - 0.5) * p.contrast + 0.5 + p.brightness;
    if (p.noise_sigma > 0.0) t += normal(noise, 0.0, p.noise_sigma);
    v = static_cast<float>(std::clamp(t, 0.0, 1.0));
  }
  if (p.erase) {
    const auto& r = *p.erase;
    for (int c = 0; c < 3; ++c)
      for (int y = static_cast<int>(r.y_min); y < static_cast<int>(r.y_max) && y < h; ++y)
        for (int x = static_cast<int>(r.x_min); x < static_cast<int>(r.x_max) && x < w; ++x)
          out.at(c, y, x) = static_cast<float>(p.erase_value);
  }
  return out;
}

inline ShapeImage augment(const ShapeImage& img, AugmentStrength strength, std::uint64_t seed) {
  return apply_augment(img, sample_augment(img, strength, seed));
}

}  // namespace cfl
