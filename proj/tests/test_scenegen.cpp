#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bmod/error.hpp"
#include "bmod/image_io.hpp"
#include "bmod/scenegen.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace bmod;
using namespace bmod::scenegen;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bmod_test_scenegen_" + name);
  std::filesystem::remove_all(p);
  return p;
}

SceneSpec single_mover(int speed, std::array<int, 2> pan = {0, 0}) {
  SceneSpec s;
  s.image_height = 32;
  s.image_width = 48;
  s.num_frames = 5;
  s.num_moving = 1;
  s.num_static = 0;
  s.sprite_size_range = {6, 8};
  s.velocity_range = {speed, speed};
  s.background_kind = BackgroundKind::kPerlin;
  s.camera_pan = pan;
  s.seed = 17;
  return s;
}

}  // namespace

TEST_CASE("same scene parameters give a bitwise identical sample") {
  const auto spec = scene_preset("easy", 42);
  CHECK(generate_sequence(spec) == generate_sequence(spec));
  auto other = spec;
  other.seed = 43;
  CHECK_FALSE(generate_sequence(spec) == generate_sequence(other));
}

TEST_CASE("a single mover has constant flow on its pixels and zero elsewhere") {
  const auto s = generate_sequence(single_mover(3));
  const std::size_t plane = s.pixels();
  std::set<std::pair<float, float>> sprite_flows;
  for (int t = 0; t < s.num_frames; ++t)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t p = t * plane + i;
      const float u = s.flow[2 * p], v = s.flow[2 * p + 1];
      if (s.gt_instance[p] == 0) {
        CHECK(u == 0.0f);
        CHECK(v == 0.0f);
      } else {
        sprite_flows.insert({u, v});
      }
    }
  REQUIRE(sprite_flows.size() == 1);
  const auto [u, v] = *sprite_flows.begin();
  CHECK(std::max(std::fabs(u), std::fabs(v)) == 3.0f);
}

TEST_CASE("warping by the flow reproduces the next frame where labels persist") {
  for (std::array<int, 2> pan : {std::array<int, 2>{0, 0}, std::array<int, 2>{1, 0}}) {
    const auto s = generate_sequence(single_mover(2, pan));
    const int h = s.height, w = s.width;
    const std::size_t plane = s.pixels();
    int checked = 0;
    for (int t = 0; t + 1 < s.num_frames; ++t)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const std::size_t p = t * plane + static_cast<std::size_t>(y) * w + x;
          const int qx = x + static_cast<int>(s.flow[2 * p]), qy = y + static_cast<int>(s.flow[2 * p + 1]);
          if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
          const std::size_t q = (t + 1) * plane + static_cast<std::size_t>(qy) * w + qx;
          if (s.gt_instance[q] != s.gt_instance[p]) continue;
          for (int c = 0; c < 3; ++c) REQUIRE(s.frames[3 * q + c] == s.frames[3 * p + c]);
          ++checked;
        }
    CHECK(checked > h * w);
  }
}

TEST_CASE("static sprites do not move and ids are stable") {
  const auto s = generate_sequence(scene_preset("easy", 5));
  const std::size_t plane = s.pixels();
  CHECK(s.num_instances() == 4);
  for (int id = 1; id <= s.num_instances(); ++id) {
    if (s.moving_flags[id - 1]) continue;
    for (int t = 1; t < s.num_frames; ++t)
      for (std::size_t i = 0; i < plane; ++i) {
        // A static sprite pixel stays put unless something moved over it.
        if (s.gt_instance[i] == id && s.gt_instance[t * plane + i] != id) {
          const int cover = s.gt_instance[t * plane + i];
          REQUIRE(cover > id);
          REQUIRE(s.moving_flags[cover - 1]);
        }
      }
  }
  for (auto v : s.gt_instance) CHECK(v <= s.num_instances());
}

TEST_CASE("frames are quantized to 8-bit levels in [0, 1]") {
  const auto s = generate_sequence(scene_preset("easy", 9));
  for (float v : s.frames) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
    REQUIRE(std::fabs(v * 255.0f - std::round(v * 255.0f)) < 1e-4f);
  }
}

TEST_CASE("scene validation") {
  auto s = single_mover(1);
  s.num_moving = 0;
  CHECK_THROWS_AS(generate_sequence(s), ConfigError);
  s = single_mover(1);
  s.num_frames = 1;
  CHECK_THROWS_AS(generate_sequence(s), ConfigError);
  s = single_mover(1);
  s.sprite_size_range = {40, 40};
  CHECK_THROWS_AS(generate_sequence(s), ConfigError);
  s = single_mover(12);
  s.num_frames = 8;
  CHECK_THROWS_AS(generate_sequence(s), ConfigError);
  CHECK_THROWS_AS(scene_preset("no-such-preset", 0), ConfigError);
}

TEST_CASE("spawn_top_fraction keeps sprites below the band") {
  const auto spec = scene_preset("urban-toy", 3);
  const auto s = generate_sequence(spec);
  const int band = static_cast<int>(std::ceil(spec.spawn_top_fraction * s.height));
  for (int t = 0; t < s.num_frames; ++t)
    for (int y = 0; y < band; ++y)
      for (int x = 0; x < s.width; ++x) REQUIRE(s.gt_instance[t * s.pixels() + y * s.width + x] == 0);
}

TEST_CASE("dataset round trip is lossless") {
  const auto dir = scratch("roundtrip");
  std::vector<VideoSample> samples;
  for (int i = 0; i < 3; ++i) {
    auto spec = scene_preset("easy", 100 + i);
    spec.camera_pan = {i - 1, 0};
    samples.push_back(generate_sequence(spec));
  }
  const auto manifest = write_dataset(samples, dir);
  CHECK(manifest.num_sequences == 3);
  CHECK(manifest.sequences.size() == 3);
  CHECK(std::filesystem::exists(dir / "seq_0000" / "frame_0000.png"));
  CHECK(std::filesystem::exists(dir / "seq_0002" / "inst_0007.png"));
  CHECK(std::filesystem::exists(dir / "seq_0001" / "flow_0003.flo"));
  const auto back = read_dataset(dir);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) CHECK(back[i] == samples[i]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("reading an empty directory reports no sequences") {
  const auto dir = scratch("empty");
  std::filesystem::create_directories(dir);
  try {
    read_dataset(dir);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("no sequences") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt and version-mismatched files name the path") {
  const auto dir = scratch("corrupt");
  write_dataset({generate_sequence(scene_preset("tiny", 1))}, dir);
  const auto flo = dir / "seq_0000" / "flow_0001.flo";
  { std::ofstream(flo, std::ios::binary | std::ios::trunc) << "garbage"; }
  try {
    read_dataset(dir);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("flow_0001.flo") != std::string::npos);
  }
  write_dataset({generate_sequence(scene_preset("tiny", 1))}, dir);
  {
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    os << R"({"version": 99, "num_sequences": 1, "sequences": ["seq_0000"]})";
  }
  try {
    read_dataset(dir);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("manifest.json") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("png and flo codecs round trip") {
  const auto dir = scratch("codecs");
  std::filesystem::create_directories(dir);
  io::Image16 inst;
  inst.width = 5;
  inst.height = 3;
  inst.channels = 1;
  for (int i = 0; i < 15; ++i) inst.data.push_back(static_cast<std::uint16_t>(i * 4000));
  io::write_png16(dir / "a.png", inst);
  CHECK(io::read_png16(dir / "a.png") == inst);
  io::FlowField f;
  f.width = 4;
  f.height = 2;
  for (int i = 0; i < 16; ++i) f.uv.push_back(0.25f * i - 2.0f);
  io::write_flo(dir / "a.flo", f);
  CHECK(io::read_flo(dir / "a.flo") == f);
  CHECK_THROWS_AS(io::read_png8(dir / "missing.png"), IoError);
  std::filesystem::remove_all(dir);
}
