#include "dod/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace dod {

namespace {

static_assert(std::endian::native == std::endian::little, "DODT I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw CheckpointError("DODT: truncated stream");
  return value;
}

std::string file_name_for(const std::string& param) {
  std::string out = param;
  for (char& c : out) {
    if (c == '/' || c == '\\') c = '_';
  }
  return out + ".dodt";
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("DODT", 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DODT", 4) != 0) throw CheckpointError("DODT: bad magic");
  const auto rank = get<std::uint32_t>(is);
  if (rank > 16) throw CheckpointError("DODT: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(is);
  std::vector<double> data(shape_numel(shape));
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
    throw CheckpointError("DODT: truncated payload");
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write " + path.string());
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("missing tensor file " + path.string());
  return read_tensor(is);
}

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params, const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [name, t] : params.items()) {
    const std::string file = file_name_for(name);
    save_tensor(dir / file, t);
    files[name] = file;
  }
  nlohmann::json manifest = {{"meta", meta}, {"params", files}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw CheckpointError("missing checkpoint manifest " + (dir / "manifest.json").string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed manifest in " + dir.string() + ": " + e.what());
  }
}

nlohmann::json load_checkpoint(const std::filesystem::path& dir, ParamSet& params) {
  nlohmann::json manifest = read_manifest(dir);
  const auto& files = manifest.at("params");
  if (files.size() != params.size()) {
    throw CheckpointError("checkpoint " + dir.string() + " holds " + std::to_string(files.size()) +
                          " parameters, model expects " + std::to_string(params.size()));
  }
  for (const auto& [name, t] : params.items()) {
    if (!files.contains(name)) throw CheckpointError("checkpoint " + dir.string() + " lacks '" + name + "'");
    Tensor loaded = load_tensor(dir / files.at(name).get<std::string>());
    if (loaded.shape() != t.shape()) {
      throw CheckpointError("checkpoint '" + name + "' has shape " + shape_str(loaded.shape()) +
                            ", model expects " + shape_str(t.shape()));
    }
    Tensor target = t;
    std::copy(loaded.data().begin(), loaded.data().end(), target.mutable_data().begin());
  }
  return manifest.at("meta");
}

}  // namespace dod
