#include "bmod/motion_cues.hpp"

#include "bmod/error.hpp"
#include "bmod/image_io.hpp"
#include "bmod/rng.hpp"
#include "bmod/scenegen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace bmod::motion {

std::size_t Mask::area() const {
  std::size_t n = 0;
  for (auto v : data) n += v != 0;
  return n;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kGt: return "gt";
    case Provenance::kEstimated: return "estimated";
    case Provenance::kInjectedNoise: return "injected-noise";
  }
  return "estimated";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "gt") return Provenance::kGt;
  if (s == "estimated") return Provenance::kEstimated;
  if (s == "injected-noise") return Provenance::kInjectedNoise;
  throw IoError("unknown mask provenance '" + s + "'");
}

namespace {

double median(std::vector<float> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    const float lower = *std::max_element(v.begin(), v.begin() + mid);
    m = 0.5 * (m + lower);
  }
  return m;
}

}  // namespace

FrameMasks extract_motion_masks(std::span<const float> flow, int height, int width,
                                double min_magnitude, int min_area) {
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (flow.size() != n * 2) throw std::invalid_argument("extract_motion_masks: flow size mismatch");
  std::vector<float> u(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = flow[2 * i];
    v[i] = flow[2 * i + 1];
  }
  const double mu = median(u), mv = median(v);
  std::vector<std::uint8_t> moving(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double du = u[i] - mu, dv = v[i] - mv;
    moving[i] = std::sqrt(du * du + dv * dv) >= min_magnitude;
  }

  FrameMasks out;
  std::vector<int> label(n, -1);
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (!moving[seed] || label[seed] >= 0) continue;
    Mask m(height, width);
    std::size_t area = 0;
    stack.assign(1, seed);
    label[seed] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      m.data[p] = 1;
      ++area;
      const int y = static_cast<int>(p / width), x = static_cast<int>(p % width);
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= height || nx[k] < 0 || nx[k] >= width) continue;
        const std::size_t q = static_cast<std::size_t>(ny[k]) * width + nx[k];
        if (moving[q] && label[q] < 0) {
          label[q] = 1;
          stack.push_back(q);
        }
      }
    }
    if (static_cast<int>(area) >= min_area) out.push_back({std::move(m), Provenance::kEstimated});
  }
  return out;
}

MotionMaskSet extract_motion_masks(const scenegen::VideoSample& sample, double min_magnitude,
                                   int min_area) {
  MotionMaskSet set{sample.height, sample.width, {}};
  const std::size_t plane = sample.pixels();
  for (int t = 0; t < sample.num_frames; ++t) {
    std::span<const float> flow(sample.flow.data() + t * plane * 2, plane * 2);
    set.frames.push_back(extract_motion_masks(flow, sample.height, sample.width, min_magnitude, min_area));
  }
  return set;
}

MotionMaskSet gt_motion_masks(const scenegen::VideoSample& sample) {
  MotionMaskSet set{sample.height, sample.width, {}};
  const std::size_t plane = sample.pixels();
  for (int t = 0; t < sample.num_frames; ++t) {
    FrameMasks frame;
    for (int id = 1; id <= sample.num_instances(); ++id) {
      if (!sample.moving_flags[id - 1]) continue;
      Mask m(sample.height, sample.width);
      bool any = false;
      for (std::size_t i = 0; i < plane; ++i)
        if (sample.gt_instance[t * plane + i] == id) {
          m.data[i] = 1;
          any = true;
        }
      if (any) frame.push_back({std::move(m), Provenance::kGt});
    }
    set.frames.push_back(std::move(frame));
  }
  return set;
}

MovingForeground fuse_foreground(std::span<const MotionMask> masks, int height, int width) {
  MovingForeground out{Mask(height, width), 0};
  for (const auto& m : masks) {
    if (m.mask.height != height || m.mask.width != width)
      throw std::invalid_argument("fuse_foreground: mask dimension mismatch");
    for (std::size_t i = 0; i < out.m_fg.size(); ++i) out.m_fg.data[i] |= m.mask.data[i];
  }
  out.unlabeled_count = out.m_fg.size() - out.m_fg.area();
  return out;
}

MotionMaskSet inject_label_noise(const MotionMaskSet& set, const NoiseConfig& noise, std::uint64_t seed) {
  if (noise.drop_rate < 0.0 || noise.drop_rate > 1.0 || noise.spurious_rate < 0.0)
    throw ConfigError("inject_label_noise: rates out of range");
  if (noise.blob_size_range[0] < 1 || noise.blob_size_range[1] < noise.blob_size_range[0])
    throw ConfigError("inject_label_noise: bad blob_size_range");
  if (noise.row_band[0] < 0.0 || noise.row_band[1] > 1.0 || noise.row_band[1] <= noise.row_band[0])
    throw ConfigError("inject_label_noise: bad row_band");
  Rng rng(seed);
  MotionMaskSet out{set.height, set.width, {}};
  const int h = set.height, w = set.width;
  for (const auto& frame : set.frames) {
    FrameMasks kept;
    for (const auto& m : frame)
      if (!rng.bernoulli(noise.drop_rate)) kept.push_back(m);
    const int blobs = rng.poisson(noise.spurious_rate);
    for (int b = 0; b < blobs; ++b) {
      const double rx = rng.integer(noise.blob_size_range[0], noise.blob_size_range[1]) / 2.0;
      const double ry = rng.integer(noise.blob_size_range[0], noise.blob_size_range[1]) / 2.0;
      const double cx = rng.uniform(0.0, w);
      const double cy = rng.uniform(noise.row_band[0] * h, noise.row_band[1] * h);
      Mask m(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
          if (dx * dx + dy * dy <= 1.0) m.at(y, x) = 1;
        }
      // Always nonempty: the pixel under the center belongs to the blob.
      m.at(std::clamp(static_cast<int>(cy), 0, h - 1), std::clamp(static_cast<int>(cx), 0, w - 1)) = 1;
      kept.push_back({std::move(m), Provenance::kInjectedNoise});
    }
    out.frames.push_back(std::move(kept));
  }
  return out;
}

FrameMasks filter_top_tier(const FrameMasks& masks, int image_height) {
  FrameMasks out;
  const double boundary = image_height / 3.0;
  for (const auto& m : masks) {
    double rows = 0;
    std::size_t count = 0;
    for (int y = 0; y < m.mask.height; ++y)
      for (int x = 0; x < m.mask.width; ++x)
        if (m.mask.at(y, x)) {
          rows += y + 0.5;
          ++count;
        }
    if (count > 0 && rows / count >= boundary) out.push_back(m);
  }
  return out;
}

MotionMaskSet filter_top_tier(const MotionMaskSet& set, int image_height) {
  MotionMaskSet out{set.height, set.width, {}};
  for (const auto& f : set.frames) out.frames.push_back(filter_top_tier(f, image_height));
  return out;
}

Mask resize_to_attention(const Mask& mask, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0 || mask.height % out_h != 0 || mask.width % out_w != 0)
    throw std::invalid_argument("resize_to_attention: target must divide the mask size");
  const int fy = mask.height / out_h, fx = mask.width / out_w;
  Mask out(out_h, out_w);
  const int cell = fy * fx;
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      int count = 0;
      for (int dy = 0; dy < fy; ++dy)
        for (int dx = 0; dx < fx; ++dx) count += mask.at(y * fy + dy, x * fx + dx) != 0;
      // average >= 0.5, evaluated in integers
      out.at(y, x) = 2 * count >= cell;
    }
  return out;
}

void write_mask_set(const MotionMaskSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json sidecar;
  sidecar["version"] = 1;
  sidecar["height"] = set.height;
  sidecar["width"] = set.width;
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t t = 0; t < set.frames.size(); ++t) {
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t c = 0; c < set.frames[t].size(); ++c) {
      char name[64];
      std::snprintf(name, sizeof(name), "mask_%04zu_%02zu.png", t, c);
      const Mask& m = set.frames[t][c].mask;
      io::Image8 img{m.width, m.height, 1, std::vector<std::uint8_t>(m.size())};
      for (std::size_t i = 0; i < m.size(); ++i) img.data[i] = m.data[i] ? 255 : 0;
      io::write_png8(dir / name, img);
      entries.push_back({{"file", name}, {"provenance", to_string(set.frames[t][c].provenance)}});
    }
    frames.push_back(entries);
  }
  sidecar["frames"] = frames;
  std::ofstream os(dir / "masks.json");
  if (!os) throw IoError("cannot write " + (dir / "masks.json").string());
  os << sidecar.dump(2) << '\n';
}

MotionMaskSet read_mask_set(const std::filesystem::path& dir) {
  const auto path = dir / "masks.json";
  std::ifstream is(path);
  if (!is) throw IoError("missing file: " + path.string());
  MotionMaskSet set;
  try {
    const auto j = nlohmann::json::parse(is);
    if (j.at("version").get<int>() != 1) throw IoError("version mismatch in " + path.string());
    set.height = j.at("height").get<int>();
    set.width = j.at("width").get<int>();
    for (const auto& entries : j.at("frames")) {
      FrameMasks frame;
      for (const auto& e : entries) {
        const auto file = dir / e.at("file").get<std::string>();
        const io::Image8 img = io::read_png8(file);
        if (img.width != set.width || img.height != set.height || img.channels != 1)
          throw IoError("unexpected mask shape in " + file.string());
        Mask m(set.height, set.width);
        for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = img.data[i] > 127;
        frame.push_back({std::move(m), provenance_from_string(e.at("provenance").get<std::string>())});
      }
      set.frames.push_back(std::move(frame));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed " + path.string() + ": " + e.what());
  }
  return set;
}

}  // namespace bmod::motion
