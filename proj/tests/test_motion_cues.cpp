#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bmod/motion_cues.hpp"
#include "bmod/rng.hpp"
#include "bmod/scenegen.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

using namespace bmod;
using namespace bmod::motion;

namespace {

scenegen::SceneSpec one_sprite(std::array<int, 2> pan = {0, 0}) {
  scenegen::SceneSpec s;
  s.image_height = 32;
  s.image_width = 48;
  s.num_frames = 4;
  s.num_moving = 1;
  s.num_static = 0;
  s.sprite_size_range = {7, 9};
  s.velocity_range = {3, 3};
  s.camera_pan = pan;
  s.seed = 11;
  return s;
}

Mask rect(int h, int w, int y0, int x0, int y1, int x1) {
  Mask m(h, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.at(y, x) = 1;
  return m;
}

// Reference labeling: union-find over 4-neighbours.
std::set<std::vector<int>> oracle_components(const std::vector<std::uint8_t>& on, int h, int w, int min_area) {
  std::vector<int> parent(on.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      if (!on[i]) continue;
      if (x + 1 < w && on[i + 1]) parent[find(i)] = find(i + 1);
      if (y + 1 < h && on[i + w]) parent[find(i)] = find(i + w);
    }
  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < h * w; ++i)
    if (on[i]) groups[find(i)].push_back(i);
  std::set<std::vector<int>> out;
  for (auto& [root, pixels] : groups)
    if (static_cast<int>(pixels.size()) >= min_area) out.insert(pixels);
  return out;
}

std::set<std::vector<int>> as_sets(const FrameMasks& masks) {
  std::set<std::vector<int>> out;
  for (const auto& m : masks) {
    std::vector<int> pixels;
    for (std::size_t i = 0; i < m.mask.size(); ++i)
      if (m.mask.data[i]) pixels.push_back(static_cast<int>(i));
    out.insert(pixels);
  }
  return out;
}

Mask moving_union(const scenegen::VideoSample& s, int t) {
  Mask m(s.height, s.width);
  for (std::size_t i = 0; i < s.pixels(); ++i) {
    const int id = s.gt_instance[t * s.pixels() + i];
    m.data[i] = id > 0 && s.moving_flags[id - 1];
  }
  return m;
}

}  // namespace

TEST_CASE("a lone mover is recovered exactly from its flow") {
  for (auto pan : {std::array<int, 2>{0, 0}, std::array<int, 2>{1, 0}}) {
    const auto s = scenegen::generate_sequence(one_sprite(pan));
    const auto set = extract_motion_masks(s, 1.0, 1);
    REQUIRE(set.frames.size() == static_cast<std::size_t>(s.num_frames));
    for (int t = 0; t < s.num_frames; ++t) {
      REQUIRE(set.frames[t].size() == 1);
      CHECK(set.frames[t][0].mask == moving_union(s, t));
      CHECK(set.frames[t][0].provenance == Provenance::kEstimated);
    }
  }
}

TEST_CASE("zero flow gives no masks") {
  const std::vector<float> flow(16 * 16 * 2, 0.0f);
  CHECK(extract_motion_masks(flow, 16, 16, 0.5, 1).empty());
}

TEST_CASE("connected components match a union-find oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = rng.integer(4, 20), w = rng.integer(4, 20);
    std::vector<std::uint8_t> on(static_cast<std::size_t>(h) * w);
    std::vector<float> flow(on.size() * 2, 0.0f);
    for (std::size_t i = 0; i < on.size(); ++i) {
      on[i] = rng.bernoulli(0.3);
      if (on[i]) flow[2 * i] = 3.0f;  // same velocity everywhere
    }
    const int min_area = rng.integer(1, 3);
    const auto got = extract_motion_masks(flow, h, w, 1.0, min_area);
    CHECK(as_sets(got) == oracle_components(on, h, w, min_area));
  }
}

TEST_CASE("two equal-velocity sprites with disjoint support give two masks") {
  std::vector<float> flow(16 * 24 * 2, 0.0f);
  for (int y = 2; y < 6; ++y)
    for (int x = 2; x < 6; ++x) flow[2 * (y * 24 + x)] = 2.0f;
  for (int y = 9; y < 13; ++y)
    for (int x = 15; x < 20; ++x) flow[2 * (y * 24 + x)] = 2.0f;
  const auto masks = extract_motion_masks(flow, 16, 24, 1.0, 1);
  REQUIRE(masks.size() == 2);
  CHECK(masks[0].mask.area() + masks[1].mask.area() == 16 + 20);
}

TEST_CASE("fuse_foreground") {
  const Mask a = rect(16, 16, 0, 0, 2, 5);   // area 10
  const Mask b = rect(16, 16, 8, 0, 12, 5);  // area 20
  std::vector<MotionMask> ms{{a, Provenance::kGt}, {b, Provenance::kGt}};
  auto f = fuse_foreground(ms, 16, 16);
  CHECK(f.m_fg.area() == 30);
  CHECK(f.unlabeled_count == 256 - 30);

  const auto empty = fuse_foreground({}, 16, 16);
  CHECK(empty.m_fg.area() == 0);
  CHECK(empty.unlabeled_count == 256);

  const Mask c = rect(16, 16, 1, 3, 10, 4);
  ms.push_back({c, Provenance::kInjectedNoise});
  f = fuse_foreground(ms, 16, 16);
  CHECK(f.m_fg.area() < a.area() + b.area() + c.area());
  for (auto v : f.m_fg.data) CHECK(v <= 1);

  // idempotent, order invariant, monotone
  std::vector<MotionMask> twice = ms;
  twice.insert(twice.end(), ms.begin(), ms.end());
  CHECK(fuse_foreground(twice, 16, 16).m_fg == f.m_fg);
  std::vector<MotionMask> reversed(ms.rbegin(), ms.rend());
  CHECK(fuse_foreground(reversed, 16, 16).m_fg == f.m_fg);
  std::vector<MotionMask> fewer(ms.begin(), ms.begin() + 1);
  const auto small = fuse_foreground(fewer, 16, 16);
  for (std::size_t i = 0; i < small.m_fg.size(); ++i) CHECK(small.m_fg.data[i] <= f.m_fg.data[i]);

  std::vector<MotionMask> bad{{Mask(8, 8), Provenance::kGt}};
  CHECK_THROWS_AS(fuse_foreground(bad, 16, 16), std::invalid_argument);
}

TEST_CASE("gt masks fuse to the union of moving instances") {
  const auto s = scenegen::generate_sequence(scenegen::scene_preset("easy", 21));
  const auto set = gt_motion_masks(s);
  for (int t = 0; t < s.num_frames; ++t) {
    for (const auto& m : set.frames[t]) {
      CHECK(m.provenance == Provenance::kGt);
      CHECK(m.mask.area() > 0);
    }
    CHECK(fuse_foreground(set.frames[t], s.height, s.width).m_fg == moving_union(s, t));
  }
}

TEST_CASE("label noise") {
  const auto s = scenegen::generate_sequence(scenegen::scene_preset("easy", 4));
  const auto clean = gt_motion_masks(s);
  CHECK(inject_label_noise(clean, NoiseConfig{}, 1) == clean);

  NoiseConfig drop_all;
  drop_all.drop_rate = 1.0;
  for (const auto& f : inject_label_noise(clean, drop_all, 1).frames) CHECK(f.empty());

  NoiseConfig spurious;
  spurious.spurious_rate = 2.0;
  MotionMaskSet blank;
  blank.height = 32;
  blank.width = 48;
  blank.frames.resize(1000);
  const auto noisy = inject_label_noise(blank, spurious, 7);
  std::size_t added = 0;
  for (const auto& f : noisy.frames) {
    added += f.size();
    for (const auto& m : f) {
      CHECK(m.provenance == Provenance::kInjectedNoise);
      CHECK(m.mask.area() > 0);
    }
  }
  const double mean = static_cast<double>(added) / 1000.0;
  CHECK(mean >= 1.8);
  CHECK(mean <= 2.2);
  CHECK(inject_label_noise(blank, spurious, 7) == noisy);
  CHECK_FALSE(inject_label_noise(blank, spurious, 8) == noisy);

  NoiseConfig top = spurious;
  top.row_band = {0.0, 1.0 / 3.0};
  for (const auto& f : inject_label_noise(blank, top, 9).frames)
    for (const auto& m : f) {
      double rows = 0.0;
      for (int y = 0; y < m.mask.height; ++y)
        for (int x = 0; x < m.mask.width; ++x) rows += m.mask.at(y, x) * (y + 0.5);
      CHECK(rows / m.mask.area() < 32.0 / 3.0 + 4.0);
    }
}

TEST_CASE("top-tier filter") {
  const int h = 30, w = 30;
  FrameMasks masks{{rect(h, w, 0, 0, 7, 5), Provenance::kEstimated},
                   {rect(h, w, 12, 12, 18, 18), Provenance::kEstimated}};
  // rows 6..17: centroid row 12 = 0.4 h, straddles h/3 = 10
  masks.push_back({rect(h, w, 6, 20, 18, 24), Provenance::kEstimated});
  const auto kept = filter_top_tier(masks, h);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].mask == masks[1].mask);
  CHECK(kept[1].mask == masks[2].mask);
  CHECK(filter_top_tier(kept, h) == kept);
}

TEST_CASE("resize_to_attention") {
  Mask ones(16, 16);
  std::fill(ones.data.begin(), ones.data.end(), 1);
  const auto r = resize_to_attention(ones, 4, 4);
  CHECK(r.area() == 16);

  const auto block = resize_to_attention(rect(16, 16, 4, 8, 8, 12), 4, 4);
  CHECK(block.area() == 1);
  CHECK(block.at(1, 2) == 1);

  Mask checker(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) checker.at(y, x) = (x + y) % 2;
  CHECK(resize_to_attention(checker, 4, 4).area() == 16);

  // 7 of 16 pixels in a cell is below one half
  Mask sparse(4, 4);
  for (int i = 0; i < 7; ++i) sparse.data[i] = 1;
  CHECK(resize_to_attention(sparse, 1, 1).area() == 0);
}

TEST_CASE("mask sets round trip through png stacks") {
  const auto dir = std::filesystem::temp_directory_path() / "bmod_test_masks";
  std::filesystem::remove_all(dir);
  const auto s = scenegen::generate_sequence(scenegen::scene_preset("easy", 8));
  NoiseConfig n;
  n.spurious_rate = 1.5;
  const auto set = inject_label_noise(extract_motion_masks(s, 0.5, 4), n, 2);
  write_mask_set(set, dir);
  CHECK(read_mask_set(dir) == set);
  std::filesystem::remove_all(dir);
}
