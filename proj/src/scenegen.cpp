#include "bmod/scenegen.hpp"

#include "bmod/error.hpp"
#include "bmod/rng.hpp"

#include <algorithm>
#include <cmath>

namespace bmod::scenegen {

std::string to_string(BackgroundKind kind) {
  switch (kind) {
    case BackgroundKind::kFlat: return "flat";
    case BackgroundKind::kGradient: return "gradient";
    case BackgroundKind::kPerlin: return "perlin-texture";
    case BackgroundKind::kTiled: return "tiled";
  }
  return "flat";
}

BackgroundKind background_kind_from_string(const std::string& name) {
  if (name == "flat") return BackgroundKind::kFlat;
  if (name == "gradient") return BackgroundKind::kGradient;
  if (name == "perlin-texture" || name == "perlin") return BackgroundKind::kPerlin;
  if (name == "tiled") return BackgroundKind::kTiled;
  throw ConfigError("unknown background_kind '" + name + "'");
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = nlohmann::json{{"image_height", s.image_height},
                     {"image_width", s.image_width},
                     {"num_frames", s.num_frames},
                     {"num_moving", s.num_moving},
                     {"num_static", s.num_static},
                     {"sprite_size_range", s.sprite_size_range},
                     {"velocity_range", s.velocity_range},
                     {"background_kind", to_string(s.background_kind)},
                     {"camera_pan", s.camera_pan},
                     {"spawn_top_fraction", s.spawn_top_fraction},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  j.at("image_height").get_to(s.image_height);
  j.at("image_width").get_to(s.image_width);
  j.at("num_frames").get_to(s.num_frames);
  j.at("num_moving").get_to(s.num_moving);
  j.at("num_static").get_to(s.num_static);
  j.at("sprite_size_range").get_to(s.sprite_size_range);
  j.at("velocity_range").get_to(s.velocity_range);
  s.background_kind = background_kind_from_string(j.at("background_kind").get<std::string>());
  j.at("camera_pan").get_to(s.camera_pan);
  s.spawn_top_fraction = j.value("spawn_top_fraction", 0.0);
  j.at("seed").get_to(s.seed);
}

void validate(const SceneSpec& s) {
  if (s.image_height <= 0 || s.image_width <= 0) throw ConfigError("image dimensions must be positive");
  if (s.num_frames < 2) throw ConfigError("num_frames must be >= 2");
  if (s.num_moving < 1) throw ConfigError("num_moving must be >= 1");
  if (s.num_static < 0) throw ConfigError("num_static must be >= 0");
  if (s.num_moving + s.num_static > 65535) throw ConfigError("too many instances for 16-bit ids");
  const auto [lo, hi] = s.sprite_size_range;
  if (lo <= 0 || hi < lo) throw ConfigError("sprite_size_range must be positive and ordered");
  if (hi >= std::min(s.image_height, s.image_width))
    throw ConfigError("sprites must be smaller than the frame");
  const auto [vlo, vhi] = s.velocity_range;
  if (vlo < 1 || vhi < vlo) throw ConfigError("velocity_range must satisfy 1 <= min <= max");
  if (s.spawn_top_fraction < 0.0 || s.spawn_top_fraction >= 1.0)
    throw ConfigError("spawn_top_fraction must be in [0, 1)");
}

namespace {

enum class Shape { kDisk, kRect, kTriangle };

struct Color {
  double r = 0, g = 0, b = 0;
};

Color hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h * 6.0, 6.0);
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  Color out;
  if (hp < 1) out = {c, x, 0};
  else if (hp < 2) out = {x, c, 0};
  else if (hp < 3) out = {0, c, x};
  else if (hp < 4) out = {0, x, c};
  else if (hp < 5) out = {x, 0, c};
  else out = {c, 0, x};
  const double m = v - c;
  return {out.r + m, out.g + m, out.b + m};
}

Color lerp(const Color& a, const Color& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

struct Sprite {
  Shape shape = Shape::kDisk;
  int box_w = 0, box_h = 0;
  Color color, stripe_color;
  bool textured = false;
  bool moving = false;
  std::array<int, 2> velocity{0, 0};  // screen motion including camera pan
  std::array<int, 2> origin{0, 0};    // top-left at frame 0

  // Pixel-center membership in sprite-local coordinates.
  bool contains(double lx, double ly) const {
    if (lx < 0 || ly < 0 || lx >= box_w || ly >= box_h) return false;
    switch (shape) {
      case Shape::kRect: return true;
      case Shape::kDisk: {
        const double rx = box_w / 2.0, ry = box_h / 2.0;
        const double dx = (lx - rx) / rx, dy = (ly - ry) / ry;
        return dx * dx + dy * dy <= 1.0;
      }
      case Shape::kTriangle: {
        // apex at top-center, base along the bottom edge
        const double half = (box_w / 2.0) * (ly / box_h);
        return std::fabs(lx - box_w / 2.0) <= half;
      }
    }
    return false;
  }

  Color shade(double lx, double ly) const {
    if (!textured) return color;
    return (static_cast<int>(std::floor((lx + ly) / 3.0)) % 2 == 0) ? color : stripe_color;
  }
};

double lattice(std::uint64_t seed, int ix, int iy) {
  const std::uint64_t h = mix64(seed ^ mix64(static_cast<std::uint64_t>(static_cast<std::uint32_t>(ix)) |
                                            (static_cast<std::uint64_t>(static_cast<std::uint32_t>(iy)) << 32)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double value_noise(std::uint64_t seed, double x, double y, double cell) {
  const double fx = x / cell, fy = y / cell;
  const int ix = static_cast<int>(std::floor(fx)), iy = static_cast<int>(std::floor(fy));
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  const double tx = smooth(fx - ix), ty = smooth(fy - iy);
  const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
  return (a + (b - a) * tx) * (1 - ty) + (c + (d - c) * tx) * ty;
}

struct Background {
  BackgroundKind kind = BackgroundKind::kFlat;
  Color base, alt;
  std::uint64_t noise_seed = 0;
  int image_height = 1;

  // World coordinates; the camera offset is subtracted by the caller.
  Color at(double wx, double wy) const {
    switch (kind) {
      case BackgroundKind::kFlat: return base;
      case BackgroundKind::kGradient: {
        const double t = std::clamp(wy / image_height, 0.0, 1.0);
        return lerp(base, alt, t);
      }
      case BackgroundKind::kPerlin: {
        const double n = 0.65 * value_noise(noise_seed, wx, wy, 8.0) +
                         0.35 * value_noise(noise_seed + 1, wx, wy, 3.0);
        return lerp(base, alt, n);
      }
      case BackgroundKind::kTiled: {
        const int tx = static_cast<int>(std::floor(wx / 8.0));
        const int ty = static_cast<int>(std::floor(wy / 8.0));
        return ((tx + ty) % 2 == 0) ? base : alt;
      }
    }
    return base;
  }
};

Color background_color(Rng& rng) {
  return hsv(rng.uniform(), rng.uniform(0.0, 0.2), rng.uniform(0.3, 0.55));
}

// Admissible frame-0 coordinate range along one axis so that the box stays in
// [min_pos, extent) for t = 0..frames-1.
bool origin_range(int extent, int box, int velocity, int frames, int min_pos, int& lo, int& hi) {
  const int travel = velocity * (frames - 1);
  lo = std::max(min_pos, min_pos - travel);
  hi = std::min(extent - box, extent - box - travel);
  return lo <= hi;
}

bool boxes_overlap(const Sprite& a, const Sprite& b) {
  return a.origin[0] < b.origin[0] + b.box_w && b.origin[0] < a.origin[0] + a.box_w &&
         a.origin[1] < b.origin[1] + b.box_h && b.origin[1] < a.origin[1] + a.box_h;
}

}  // namespace

VideoSample generate_sequence(const SceneSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  const int h = spec.image_height, w = spec.image_width, frames = spec.num_frames;
  const int count = spec.num_moving + spec.num_static;
  const int min_row = static_cast<int>(std::ceil(spec.spawn_top_fraction * h));

  Background bg;
  bg.kind = spec.background_kind;
  bg.base = background_color(rng);
  bg.alt = background_color(rng);
  bg.noise_seed = rng.next();
  bg.image_height = h;

  // Which instance ids move is drawn from the seed, so depth order and
  // motion are independent.
  std::vector<bool> moving(count, false);
  for (int i = 0; i < spec.num_moving; ++i) moving[i] = true;
  for (int i = count - 1; i > 0; --i) std::swap(moving[i], moving[rng.integer(0, i)]);

  std::vector<Sprite> sprites;
  for (int id = 0; id < count; ++id) {
    Sprite best;
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !(placed && attempt >= 16); ++attempt) {
      Sprite s;
      s.shape = static_cast<Shape>(rng.integer(0, 2));
      const int size = rng.integer(spec.sprite_size_range[0], spec.sprite_size_range[1]);
      s.box_w = size;
      s.box_h = s.shape == Shape::kRect
                    ? std::max(spec.sprite_size_range[0], static_cast<int>(std::lround(size * rng.uniform(0.6, 1.0))))
                    : size;
      const double hue = rng.uniform();
      s.color = hsv(hue, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0));
      s.stripe_color = hsv(hue, rng.uniform(0.7, 1.0), rng.uniform(0.45, 0.6));
      s.textured = rng.bernoulli(0.5);
      s.moving = moving[id];
      std::array<int, 2> v{0, 0};
      if (s.moving) {
        const int vmax = spec.velocity_range[1], vmin = spec.velocity_range[0];
        do {
          v = {rng.integer(-vmax, vmax), rng.integer(-vmax, vmax)};
        } while (std::max(std::abs(v[0]), std::abs(v[1])) < vmin);
      }
      s.velocity = {v[0] + spec.camera_pan[0], v[1] + spec.camera_pan[1]};
      int xlo, xhi, ylo, yhi;
      if (!origin_range(w, s.box_w, s.velocity[0], frames, 0, xlo, xhi) ||
          !origin_range(h, s.box_h, s.velocity[1], frames, min_row, ylo, yhi))
        continue;
      s.origin = {rng.integer(xlo, xhi), rng.integer(ylo, yhi)};
      const bool clear = std::none_of(sprites.begin(), sprites.end(),
                                      [&](const Sprite& o) { return boxes_overlap(o, s); });
      if (!placed || clear) {
        best = s;
        placed = true;
        if (clear) break;
      }
    }
    if (!placed)
      throw ConfigError("sprites cannot fit in frame for the given size and velocity ranges");
    sprites.push_back(best);
  }

  VideoSample out;
  out.spec = spec;
  out.num_frames = frames;
  out.height = h;
  out.width = w;
  out.moving_flags = moving;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  out.frames.assign(plane * frames * 3, 0.0f);
  out.gt_instance.assign(plane * frames, 0);
  out.flow.assign(plane * frames * 2, 0.0f);

  auto quantize = [](double c) {
    return static_cast<float>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0)) / 255.0f;
  };

  for (int t = 0; t < frames; ++t) {
    const double cam_x = spec.camera_pan[0] * t, cam_y = spec.camera_pan[1] * t;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        Color c = bg.at(px - cam_x, py - cam_y);
        int label = 0;
        std::array<int, 2> flow = spec.camera_pan;
        // Higher instance ids are drawn on top.
        for (int id = 0; id < count; ++id) {
          const Sprite& s = sprites[id];
          const double lx = px - (s.origin[0] + s.velocity[0] * t);
          const double ly = py - (s.origin[1] + s.velocity[1] * t);
          if (s.contains(lx, ly)) {
            c = s.shade(lx, ly);
            label = id + 1;
            flow = s.velocity;
          }
        }
        const std::size_t p = t * plane + static_cast<std::size_t>(y) * w + x;
        out.frames[3 * p + 0] = quantize(c.r);
        out.frames[3 * p + 1] = quantize(c.g);
        out.frames[3 * p + 2] = quantize(c.b);
        out.gt_instance[p] = static_cast<std::uint16_t>(label);
        out.flow[2 * p + 0] = static_cast<float>(flow[0]);
        out.flow[2 * p + 1] = static_cast<float>(flow[1]);
      }
    }
  }
  return out;
}

SceneSpec scene_preset(const std::string& name, std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  if (name == "tiny") {
    s.image_height = 16;
    s.image_width = 16;
    s.num_frames = 4;
    s.num_moving = 1;
    s.num_static = 1;
    s.sprite_size_range = {4, 6};
    s.velocity_range = {1, 1};
    s.background_kind = BackgroundKind::kFlat;
  } else if (name == "easy") {
    s.image_height = 32;
    s.image_width = 48;
    s.num_frames = 8;
    s.num_moving = 2;
    s.num_static = 2;
    s.sprite_size_range = {7, 11};
    s.velocity_range = {1, 2};
    s.background_kind = static_cast<BackgroundKind>(seed % 4);
  } else if (name == "urban-toy") {
    s.image_height = 32;
    s.image_width = 48;
    s.num_frames = 8;
    s.num_moving = 2;
    s.num_static = 3;
    s.sprite_size_range = {6, 10};
    s.velocity_range = {1, 2};
    s.background_kind = static_cast<BackgroundKind>(seed % 4);
    s.spawn_top_fraction = 1.0 / 3.0;
  } else {
    throw ConfigError("unknown scene preset '" + name + "'");
  }
  return s;
}

}  // namespace bmod::scenegen
