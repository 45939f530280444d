#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "occmem/core/error.hpp"
#include "occmem/core/image.hpp"
#include "occmem/detection/box.hpp"
#include "occmem/nn/init.hpp"

namespace occmem::synth {

enum class Background { plain, cluttered };

// untextured occluders are painted with the background itself
enum class OccluderMode { untextured, distinct };

struct SceneSpec {
  int width = 128;
  int height = 128;
  int length = 36;
  int min_objects = 1;
  int max_objects = 2;
  int num_classes = 3;
  int min_size = 16;
  int max_size = 40;
  double min_speed = 0.0;  // px / frame
  double max_speed = 0.4;
  int occluders = 1;
  int occluder_margin = 6;  // px beyond the target on every side
  int min_occlusion = 20;
  int max_occlusion = 24;
  int lead_in = 5;          // fully visible frames before the occluder arrives
  int approach = 3;         // frames to slide on/off the target
  OccluderMode occluder_mode = OccluderMode::untextured;
  Background background = Background::plain;
  double noise = 0.0;       // per-frame pixel noise std
  double occluded_threshold = 0.25;
  bool blend_edges = true;

  void validate() const {
    OCCMEM_CHECK(width >= 16 && height >= 16, "canvas too small");
    OCCMEM_CHECK(length >= 1, "sequence length must be >= 1");
    OCCMEM_CHECK(min_objects >= 0 && max_objects >= min_objects, "bad object count range");
    OCCMEM_CHECK(num_classes >= 1 && num_classes <= 3, "classes must be in [1, 3]");
    OCCMEM_CHECK(min_size >= 4 && max_size >= min_size, "bad sprite size range");
    OCCMEM_CHECK(max_size + 2 * occluder_margin <= std::min(width, height),
                 "sprite plus occluder does not fit the canvas");
    OCCMEM_CHECK(min_speed >= 0 && max_speed >= min_speed, "speeds must be >= 0");
    OCCMEM_CHECK(occluders >= 0, "occluder count must be >= 0");
    OCCMEM_CHECK(min_occlusion >= 1 && max_occlusion >= min_occlusion, "bad occlusion range");
    OCCMEM_CHECK(occluded_threshold > 0 && occluded_threshold <= 1, "bad occlusion threshold");
    if (occluders > 0) {
      OCCMEM_CHECK(min_objects >= 1, "occluders need a target object");
      const int need = lead_in + approach + min_occlusion;
      if (need > length)
        throw ContractError("occlusion of " + std::to_string(min_occlusion) +
                            " frames (plus " + std::to_string(lead_in + approach) +
                            " lead-in) does not fit a " + std::to_string(length) +
                            "-frame sequence");
    }
  }
};

// plain background, fixed sizes, long occlusions
inline SceneSpec staged_preset() {
  SceneSpec s;
  s.background = Background::plain;
  s.min_size = 24;
  s.max_size = 32;
  s.max_speed = 0.3;
  return s;
}

// cluttered background, wide scale range, sensor noise
inline SceneSpec assembly_preset() {
  SceneSpec s;
  s.background = Background::cluttered;
  s.min_size = 16;
  s.max_size = 40;
  s.max_speed = 0.4;
  s.noise = 3.0;
  return s;
}

inline SceneSpec preset(const std::string& name) {
  if (name == "staged") return staged_preset();
  if (name == "assembly") return assembly_preset();
  throw ContractError("unknown preset '" + name + "' (expected staged or assembly)");
}

struct ObjectAnnotation {
  det::Box box;  // label = class + 1
  int cls = 0;
  bool occluded = false;
  double visible_fraction = 1.0;

  friend bool operator==(const ObjectAnnotation&, const ObjectAnnotation&) = default;
};

struct FrameAnnotation {
  int frame = 0;
  // same object order in every frame of a sequence
  std::vector<ObjectAnnotation> objects;

  friend bool operator==(const FrameAnnotation&, const FrameAnnotation&) = default;
};

struct SequenceSample {
  std::vector<Image> frames;
  std::vector<FrameAnnotation> annotations;

  friend bool operator==(const SequenceSample&, const SequenceSample&) = default;
};

struct Composite {
  Image image;
  std::vector<ObjectAnnotation> objects;
};

inline det::BoxSet gt_boxes(const std::vector<ObjectAnnotation>& objs) {
  det::BoxSet out;
  for (const auto& o : objs) out.push_back(o.box);
  return out;
}

// Sprite with per-pixel coverage in [0, 1] (2x2 supersampled).
struct Sprite {
  int size = 0;
  int cls = 0;
  std::vector<std::array<std::uint8_t, 3>> rgb;
  std::vector<float> alpha;

  float coverage(int x, int y) const { return alpha[static_cast<std::size_t>(y) * size + x]; }
  bool solid(int x, int y) const { return coverage(x, y) >= 0.5f; }
  const std::array<std::uint8_t, 3>& color(int x, int y) const {
    return rgb[static_cast<std::size_t>(y) * size + x];
  }
};

namespace detail {

inline bool inside_shape(int cls, double u, double v) {
  // u, v in [0, 1] sprite-local coordinates
  switch (cls) {
    case 0: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case 1: return u >= 0.04 && u <= 0.96 && v >= 0.04 && v <= 0.96;
    default: return std::abs(u - 0.5) <= 0.5 * v;
  }
}

inline std::uint8_t clamp8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace detail

// Class-specific texture (rings, checker, stripes) in a random colour pair.
inline Sprite make_sprite(int cls, int size, nn::Rng& rng) {
  OCCMEM_CHECK(cls >= 0 && cls < 3, "sprite class must be 0..2");
  OCCMEM_CHECK(size >= 4, "sprite too small");
  Sprite s;
  s.size = size;
  s.cls = cls;
  std::array<double, 3> a, b;
  for (int c = 0; c < 3; ++c) {
    a[c] = nn::uniform(rng, 30.0, 225.0);
    b[c] = std::fmod(a[c] + nn::uniform(rng, 70.0, 150.0), 255.0);
  }
  const double period = nn::uniform(rng, 4.0, 7.0);
  s.rgb.resize(static_cast<std::size_t>(size) * size);
  s.alpha.resize(s.rgb.size());
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      int hit = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx)
          hit += detail::inside_shape(cls, (x + 0.25 + 0.5 * sx) / size,
                                      (y + 0.25 + 0.5 * sy) / size);
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      s.alpha[i] = hit / 4.0f;
      const double cx = x + 0.5 - size / 2.0, cy = y + 0.5 - size / 2.0;
      bool band;
      if (cls == 0) band = static_cast<int>(std::sqrt(cx * cx + cy * cy) / (period / 2)) % 2;
      else if (cls == 1) band = (static_cast<int>(x / period) + static_cast<int>(y / period)) % 2;
      else band = static_cast<int>(y / (period / 2)) % 2;
      for (int c = 0; c < 3; ++c) s.rgb[i][c] = detail::clamp8(band ? a[c] : b[c]);
    }
  return s;
}

inline Image make_background(const SceneSpec& spec, nn::Rng& rng) {
  Image img(spec.width, spec.height, 3);
  std::array<double, 3> base;
  for (int c = 0; c < 3; ++c) base[c] = nn::uniform(rng, 80.0, 170.0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = detail::clamp8(base[c]);
  if (spec.background == Background::plain) return img;
  // low-contrast rectangles and bars
  const int patches = 40;
  for (int k = 0; k < patches; ++k) {
    const int w = nn::uniform_int(rng, 6, 40), h = nn::uniform_int(rng, 4, 30);
    const int x0 = nn::uniform_int(rng, -w / 2, img.width - w / 2);
    const int y0 = nn::uniform_int(rng, -h / 2, img.height - h / 2);
    std::array<double, 3> col;
    for (int c = 0; c < 3; ++c) col[c] = base[c] + nn::uniform(rng, -45.0, 45.0);
    const double a = nn::uniform(rng, 0.3, 0.8);
    for (int y = std::max(0, y0); y < std::min(img.height, y0 + h); ++y)
      for (int x = std::max(0, x0); x < std::min(img.width, x0 + w); ++x)
        for (int c = 0; c < 3; ++c)
          img.at(x, y, c) = detail::clamp8((1 - a) * img.at(x, y, c) + a * col[c]);
  }
  return img;
}

// Pastes the sprite with its top-left at (x0, y0). Pixels with coverage
// >= 0.5 are written to `mask` (if given) with `id`.
inline void paste(Image& img, const Sprite& s, int x0, int y0, bool blend,
                  std::vector<int>* mask = nullptr, int id = 0) {
  for (int y = 0; y < s.size; ++y)
    for (int x = 0; x < s.size; ++x) {
      const int ix = x0 + x, iy = y0 + y;
      if (ix < 0 || iy < 0 || ix >= img.width || iy >= img.height) continue;
      const float a = s.coverage(x, y);
      if (a <= 0) continue;
      const auto& col = s.color(x, y);
      if (blend) {
        for (int c = 0; c < 3; ++c)
          img.at(ix, iy, c) = detail::clamp8(a * col[c] + (1 - a) * img.at(ix, iy, c));
      } else if (a >= 0.5f) {
        for (int c = 0; c < 3; ++c) img.at(ix, iy, c) = col[c];
      }
      if (mask && a >= 0.5f) (*mask)[static_cast<std::size_t>(iy) * img.width + ix] = id;
    }
}

namespace detail {

struct Body {
  double x = 0, y = 0, vx = 0, vy = 0;
  int size = 0;
};

inline void advance(Body& b, int width, int height) {
  b.x += b.vx;
  b.y += b.vy;
  const double mx = width - b.size, my = height - b.size;
  if (b.x < 0) { b.x = -b.x; b.vx = -b.vx; }
  if (b.x > mx) { b.x = 2 * mx - b.x; b.vx = -b.vx; }
  if (b.y < 0) { b.y = -b.y; b.vy = -b.vy; }
  if (b.y > my) { b.y = 2 * my - b.y; b.vy = -b.vy; }
}

inline void add_noise(Image& img, double std, nn::Rng& rng) {
  if (std <= 0) return;
  for (auto& p : img.pixels) p = clamp8(p + nn::normal<double>(rng, std));
}

struct OccluderPlan {
  int target = 0;
  int start = 0;     // first fully locked frame
  int duration = 0;  // locked frames
  double dir_x = 0, dir_y = 0;
  double off_x = 0, off_y = 0;
  int margin = 0;
  std::array<double, 3> color{};
};

}  // namespace detail

// Simulation state per frame, for inspection.
struct SceneTrace {
  std::vector<std::vector<std::array<int, 2>>> positions;  // sprite top-left
  std::vector<std::vector<det::Box>> occluders;
  std::vector<Sprite> sprites;
};

inline SequenceSample generate_sequence(const SceneSpec& spec, std::uint64_t seed,
                                        SceneTrace* trace = nullptr) {
  spec.validate();
  nn::Rng rng = nn::make_rng(seed, 1);
  const Image background = make_background(spec, rng);
  const int n = nn::uniform_int(rng, spec.min_objects, spec.max_objects);
  std::vector<detail::Body> bodies(n);
  std::vector<Sprite> sprites;
  for (int i = 0; i < n; ++i) {
    auto& b = bodies[i];
    b.size = nn::uniform_int(rng, spec.min_size, spec.max_size);
    b.x = nn::uniform(rng, 0.0, spec.width - b.size);
    b.y = nn::uniform(rng, 0.0, spec.height - b.size);
    const double speed = nn::uniform(rng, spec.min_speed, spec.max_speed);
    const double ang = nn::uniform(rng, 0.0, 2 * M_PI);
    b.vx = speed * std::cos(ang);
    b.vy = speed * std::sin(ang);
    sprites.push_back(make_sprite(nn::uniform_int(rng, 0, spec.num_classes - 1), b.size, rng));
  }
  std::vector<detail::OccluderPlan> plans;
  for (int k = 0; k < spec.occluders && n > 0; ++k) {
    detail::OccluderPlan p;
    p.target = k % n;
    p.duration = nn::uniform_int(rng, spec.min_occlusion,
                                 std::min(spec.max_occlusion,
                                          spec.length - spec.lead_in - spec.approach));
    p.start = nn::uniform_int(rng, spec.lead_in + spec.approach,
                              spec.length - p.duration);
    const double ang = nn::uniform(rng, 0.0, 2 * M_PI);
    p.dir_x = std::cos(ang);
    p.dir_y = std::sin(ang);
    p.margin = spec.occluder_margin;
    p.off_x = nn::uniform(rng, -p.margin / 2.0, p.margin / 2.0);
    p.off_y = nn::uniform(rng, -p.margin / 2.0, p.margin / 2.0);
    for (auto& c : p.color) c = nn::uniform(rng, 20.0, 235.0);
    plans.push_back(p);
  }

  SequenceSample out;
  if (trace) *trace = SceneTrace{{}, {}, sprites};
  nn::Rng noise_rng = nn::make_rng(seed, 2);
  for (int t = 0; t < spec.length; ++t) {
    Image img = background;
    std::vector<int> mask(static_cast<std::size_t>(spec.width) * spec.height, -1);
    std::vector<int> total(n, 0), visible(n, 0);
    std::vector<std::array<int, 2>> pos(n);
    for (int i = 0; i < n; ++i) {
      pos[i] = {static_cast<int>(std::lround(bodies[i].x)),
                static_cast<int>(std::lround(bodies[i].y))};
      paste(img, sprites[i], pos[i][0], pos[i][1], spec.blend_edges, &mask, i);
      const Sprite& s = sprites[i];
      for (int y = 0; y < s.size; ++y)
        for (int x = 0; x < s.size; ++x) total[i] += s.solid(x, y);
    }
    std::vector<det::Box> occ_boxes;
    for (const auto& p : plans) {
      // distance (in occluder sizes) from the locked pose
      double slide;
      if (t < p.start - spec.approach || t >= p.start + p.duration + spec.approach) continue;
      if (t < p.start) slide = static_cast<double>(p.start - t) / (spec.approach + 1);
      else if (t >= p.start + p.duration)
        slide = static_cast<double>(t - (p.start + p.duration) + 1) / (spec.approach + 1);
      else slide = 0;
      const auto& b = bodies[p.target];
      const int side = b.size + 2 * p.margin;
      const double ox = pos[p.target][0] - p.margin + p.off_x + slide * side * p.dir_x;
      const double oy = pos[p.target][1] - p.margin + p.off_y + slide * side * p.dir_y;
      const int x0 = static_cast<int>(std::lround(ox)), y0 = static_cast<int>(std::lround(oy));
      occ_boxes.push_back(det::Box{static_cast<double>(x0), static_cast<double>(y0),
                                   static_cast<double>(x0 + side), static_cast<double>(y0 + side)});
      for (int y = std::max(0, y0); y < std::min(spec.height, y0 + side); ++y)
        for (int x = std::max(0, x0); x < std::min(spec.width, x0 + side); ++x) {
          mask[static_cast<std::size_t>(y) * spec.width + x] = -1;
          for (int c = 0; c < 3; ++c) {
            std::uint8_t v;
            if (spec.occluder_mode == OccluderMode::untextured) {
              v = background.at(x, y, c);
            } else {
              const bool edge = x - x0 < 2 || y - y0 < 2 || x0 + side - x <= 2 || y0 + side - y <= 2;
              const double shade = ((x + y) / 3) % 2 ? 1.0 : 0.8;
              v = detail::clamp8(p.color[c] * (edge ? 0.5 : shade));
            }
            img.at(x, y, c) = v;
          }
        }
    }
    for (int v : mask)
      if (v >= 0) ++visible[v];
    detail::add_noise(img, spec.noise, noise_rng);

    FrameAnnotation fa;
    fa.frame = t;
    for (int i = 0; i < n; ++i) {
      ObjectAnnotation o;
      o.cls = sprites[i].cls;
      o.box = det::Box{static_cast<double>(pos[i][0]), static_cast<double>(pos[i][1]),
                       static_cast<double>(pos[i][0] + sprites[i].size),
                       static_cast<double>(pos[i][1] + sprites[i].size), 1.0, o.cls + 1};
      o.visible_fraction = total[i] > 0 ? static_cast<double>(visible[i]) / total[i] : 0.0;
      o.occluded = o.visible_fraction < spec.occluded_threshold;
      fa.objects.push_back(o);
    }
    out.frames.push_back(std::move(img));
    out.annotations.push_back(std::move(fa));
    if (trace) {
      trace->positions.push_back(pos);
      trace->occluders.push_back(occ_boxes);
    }
    for (auto& b : bodies) detail::advance(b, spec.width, spec.height);
  }
  return out;
}

// Static cut-and-paste images: random sprites at random poses, overlaps allowed.
inline std::vector<Composite> generate_static_composites(const SceneSpec& spec,
                                                         std::uint64_t seed, int count) {
  OCCMEM_CHECK(count >= 1, "need at least one composite");
  spec.validate();
  std::vector<Composite> out;
  for (int k = 0; k < count; ++k) {
    nn::Rng rng = nn::make_rng(seed, 1000 + static_cast<std::uint64_t>(k));
    Composite c;
    c.image = make_background(spec, rng);
    const int n = nn::uniform_int(rng, std::max(1, spec.min_objects), std::max(1, spec.max_objects));
    std::vector<int> mask(static_cast<std::size_t>(spec.width) * spec.height, -1);
    std::vector<Sprite> sprites;
    std::vector<std::array<int, 2>> pos;
    for (int i = 0; i < n; ++i) {
      const int size = nn::uniform_int(rng, spec.min_size, spec.max_size);
      sprites.push_back(make_sprite(nn::uniform_int(rng, 0, spec.num_classes - 1), size, rng));
      pos.push_back({nn::uniform_int(rng, 0, spec.width - size),
                     nn::uniform_int(rng, 0, spec.height - size)});
      paste(c.image, sprites.back(), pos[i][0], pos[i][1], spec.blend_edges, &mask, i);
    }
    std::vector<int> total(n, 0), visible(n, 0);
    for (int i = 0; i < n; ++i)
      for (int y = 0; y < sprites[i].size; ++y)
        for (int x = 0; x < sprites[i].size; ++x) total[i] += sprites[i].solid(x, y);
    for (int v : mask)
      if (v >= 0) ++visible[v];
    nn::Rng noise_rng = nn::make_rng(seed, 5000 + static_cast<std::uint64_t>(k));
    detail::add_noise(c.image, spec.noise, noise_rng);
    for (int i = 0; i < n; ++i) {
      ObjectAnnotation o;
      o.cls = sprites[i].cls;
      o.box = det::Box{static_cast<double>(pos[i][0]), static_cast<double>(pos[i][1]),
                       static_cast<double>(pos[i][0] + sprites[i].size),
                       static_cast<double>(pos[i][1] + sprites[i].size), 1.0, o.cls + 1};
      o.visible_fraction = static_cast<double>(visible[i]) / total[i];
      o.occluded = o.visible_fraction < spec.occluded_threshold;
      c.objects.push_back(o);
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace occmem::synth
