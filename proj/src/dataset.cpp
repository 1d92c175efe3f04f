#include "bmod/error.hpp"
#include "bmod/image_io.hpp"
#include "bmod/scenegen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace bmod::scenegen {

namespace fs = std::filesystem;

namespace {

std::string indexed(const char* stem, int idx, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04d%s", stem, idx, ext);
  return buf;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing file: " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void write_sequence(const VideoSample& s, const fs::path& dir) {
  fs::create_directories(dir);
  const int h = s.height, w = s.width;
  const std::size_t plane = s.pixels();
  for (int t = 0; t < s.num_frames; ++t) {
    io::Image8 rgb{w, h, 3, std::vector<std::uint8_t>(plane * 3)};
    for (std::size_t i = 0; i < plane * 3; ++i)
      rgb.data[i] = static_cast<std::uint8_t>(std::lround(s.frames[t * plane * 3 + i] * 255.0f));
    io::write_png8(dir / indexed("frame", t, ".png"), rgb);

    io::Image16 inst{w, h, 1, std::vector<std::uint16_t>(s.gt_instance.begin() + t * plane,
                                                         s.gt_instance.begin() + (t + 1) * plane)};
    io::write_png16(dir / indexed("inst", t, ".png"), inst);

    io::FlowField flo{w, h, std::vector<float>(s.flow.begin() + t * plane * 2,
                                               s.flow.begin() + (t + 1) * plane * 2)};
    io::write_flo(dir / indexed("flow", t, ".flo"), flo);
  }
  nlohmann::json meta;
  meta["version"] = kDatasetVersion;
  meta["num_frames"] = s.num_frames;
  meta["height"] = h;
  meta["width"] = w;
  meta["moving_flags"] = s.moving_flags;
  meta["spec"] = s.spec;
  meta["seed"] = s.spec.seed;
  write_json(dir / "meta.json", meta);
}

VideoSample read_sequence(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  const nlohmann::json meta = read_json(meta_path);
  VideoSample s;
  try {
    if (meta.at("version").get<int>() != kDatasetVersion)
      throw IoError("version mismatch in " + meta_path.string());
    s.num_frames = meta.at("num_frames").get<int>();
    s.height = meta.at("height").get<int>();
    s.width = meta.at("width").get<int>();
    s.moving_flags = meta.at("moving_flags").get<std::vector<bool>>();
    s.spec = meta.at("spec").get<SceneSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed " + meta_path.string() + ": " + e.what());
  }
  const int h = s.height, w = s.width;
  const std::size_t plane = s.pixels();
  s.frames.reserve(plane * 3 * s.num_frames);
  s.gt_instance.reserve(plane * s.num_frames);
  s.flow.reserve(plane * 2 * s.num_frames);
  for (int t = 0; t < s.num_frames; ++t) {
    const fs::path fp = dir / indexed("frame", t, ".png");
    const io::Image8 rgb = io::read_png8(fp);
    if (rgb.width != w || rgb.height != h || rgb.channels != 3)
      throw IoError("unexpected frame shape in " + fp.string());
    for (std::uint8_t v : rgb.data) s.frames.push_back(static_cast<float>(v) / 255.0f);

    const fs::path ip = dir / indexed("inst", t, ".png");
    const io::Image16 inst = io::read_png16(ip);
    if (inst.width != w || inst.height != h) throw IoError("unexpected instance shape in " + ip.string());
    for (std::uint16_t v : inst.data) {
      if (v > s.moving_flags.size()) throw IoError("instance id without moving flag in " + ip.string());
      s.gt_instance.push_back(v);
    }

    const fs::path flp = dir / indexed("flow", t, ".flo");
    const io::FlowField flo = io::read_flo(flp);
    if (flo.width != w || flo.height != h) throw IoError("unexpected flow shape in " + flp.string());
    s.flow.insert(s.flow.end(), flo.uv.begin(), flo.uv.end());
  }
  return s;
}

}  // namespace

Manifest write_dataset(const std::vector<VideoSample>& samples, const fs::path& dir) {
  fs::create_directories(dir);
  Manifest m;
  m.version = kDatasetVersion;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string name = indexed("seq", static_cast<int>(i), "");
    write_sequence(samples[i], dir / name);
    m.sequences.push_back(name);
  }
  m.num_sequences = static_cast<int>(m.sequences.size());
  write_json(dir / "manifest.json",
             {{"version", m.version}, {"num_sequences", m.num_sequences}, {"sequences", m.sequences}});
  return m;
}

std::vector<VideoSample> read_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    if (fs::is_directory(dir) && fs::is_empty(dir))
      throw IoError("no sequences in " + dir.string());
    throw IoError("no sequences: missing " + manifest_path.string());
  }
  const nlohmann::json j = read_json(manifest_path);
  std::vector<std::string> names;
  try {
    if (j.at("version").get<int>() != kDatasetVersion)
      throw IoError("version mismatch in " + manifest_path.string());
    names = j.at("sequences").get<std::vector<std::string>>();
    if (j.at("num_sequences").get<int>() != static_cast<int>(names.size()))
      throw IoError("sequence count mismatch in " + manifest_path.string());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed " + manifest_path.string() + ": " + e.what());
  }
  if (names.empty()) throw IoError("no sequences in " + dir.string());
  std::vector<VideoSample> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(read_sequence(dir / n));
  return out;
}

}  // namespace bmod::scenegen
