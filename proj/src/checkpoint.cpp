#include "bmod/checkpoint.hpp"

#include "bmod/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace bmod::model {

namespace {

constexpr char kMagic[8] = {'B', 'M', 'O', 'D', 'C', 'K', 'P', 'T'};
constexpr int kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "little-endian host assumed");

struct Raw {
  nlohmann::json header;
  std::ifstream stream;
};

Raw open_checkpoint(const std::filesystem::path& path) {
  Raw raw;
  raw.stream.open(path, std::ios::binary);
  if (!raw.stream) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  if (!raw.stream.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("not a checkpoint (bad magic): " + path.string());
  if (!raw.stream.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (64u << 20))
    throw IoError("corrupt checkpoint header length: " + path.string());
  std::string text(len, '\0');
  if (!raw.stream.read(text.data(), static_cast<std::streamsize>(len)))
    throw IoError("truncated checkpoint header: " + path.string());
  try {
    raw.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  if (raw.header.value("format_version", -1) != kFormatVersion)
    throw IoError("unsupported checkpoint version in " + path.string());
  return raw;
}

CheckpointInfo info_from_header(const nlohmann::json& h, const std::filesystem::path& path) {
  try {
    CheckpointInfo info;
    info.config = h.at("config").get<ModelConfig>();
    info.step = h.at("step").get<std::int64_t>();
    info.extra = h.value("extra", nlohmann::json::object());
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, std::int64_t step,
                     const nlohmann::json& extra) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["config"] = model.config();
  header["step"] = step;
  header["extra"] = extra;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : model.parameters()) manifest.push_back({{"name", p.name}, {"shape", p.shape}});
  header["parameters"] = manifest;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  os.write(kMagic, 8);
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    std::vector<float> buf(p.value.begin(), p.value.end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return info_from_header(open_checkpoint(path).header, path);
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info_out) {
  Raw raw = open_checkpoint(path);
  CheckpointInfo info = info_from_header(raw.header, path);
  Model<T> model(info.config);
  const auto& manifest = raw.header.at("parameters");
  auto& params = model.parameters();
  if (manifest.size() != params.size())
    throw IoError("parameter count mismatch in " + path.string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.at("name").get<std::string>() != params[i].name ||
        entry.at("shape").get<nn::Shape>() != params[i].shape)
      throw IoError("parameter manifest mismatch at '" + params[i].name + "' in " + path.string());
    std::vector<float> buf(params[i].value.size());
    if (!raw.stream.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw IoError("truncated checkpoint data in " + path.string());
    std::copy(buf.begin(), buf.end(), params[i].value.begin());
  }
  if (raw.stream.peek() != std::char_traits<char>::eof())
    throw IoError("trailing bytes in checkpoint " + path.string());
  if (info_out) *info_out = std::move(info);
  return model;
}

template void save_checkpoint<float>(const std::filesystem::path&, const Model<float>&, std::int64_t,
                                     const nlohmann::json&);
template void save_checkpoint<double>(const std::filesystem::path&, const Model<double>&, std::int64_t,
                                      const nlohmann::json&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointInfo*);
template Model<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointInfo*);

}  // namespace bmod::model
