#include "cdfsl/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace cdfsl {

namespace {

constexpr char kMagic[4] = {'C', 'D', 'F', 'V'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("checkpoint: cannot open " + tmp.string() + " for writing");
    os.write(kMagic, 4);
    write_u32(os, ckpt.version);
    write_u64(os, ckpt.config_digest);
    write_u32(os, static_cast<std::uint32_t>(ckpt.stage.size()));
    os.write(ckpt.stage.data(), static_cast<std::streamsize>(ckpt.stage.size()));
    write_u32(os, ckpt.epoch);
    write_u32(os, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, tensor] : ckpt.params) {
      write_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(os, static_cast<std::uint32_t>(tensor.rank()));
      for (int d = 0; d < tensor.rank(); ++d) {
        write_u64(os, static_cast<std::uint64_t>(tensor.dim(d)));
      }
      os.write(reinterpret_cast<const char*>(tensor.values().data()),
               static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    }
    if (!os) throw Error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingDependencyError("checkpoint not found: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw ConsistencyError("checkpoint: bad magic in " + path.string());
  }
  Checkpoint ckpt;
  ckpt.version = read_u32(is);
  if (ckpt.version != 1) {
    throw ConsistencyError("checkpoint: unsupported format version " +
                           std::to_string(ckpt.version));
  }
  ckpt.config_digest = read_u64(is);
  std::uint32_t stage_len = read_u32(is);
  ckpt.stage.resize(stage_len);
  is.read(ckpt.stage.data(), stage_len);
  ckpt.epoch = read_u32(is);
  std::uint32_t count = read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = read_u32(is);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<int>(read_u64(is)));
    }
    std::vector<double> data(shape_numel(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw ConsistencyError("checkpoint: truncated file " + path.string());
    ckpt.params.insert(name, Tensor::from(std::move(shape), std::move(data)));
  }
  return ckpt;
}

}  // namespace cdfsl
