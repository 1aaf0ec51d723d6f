#include "mergevit/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace mergevit {

namespace {

constexpr char kMagic[8] = {'M', 'V', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

template <typename T>
void save_impl(const std::string& file,
               const std::vector<std::pair<std::string, const Tensor<T>*>>& entries) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open '" + file + "' for writing");
  os.write(kMagic, sizeof kMagic);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [path, tensor] : entries) {
    if (path.size() > 0xffff) throw ConfigError("checkpoint path too long: " + path);
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(path.size()));
    os.write(path.data(), static_cast<std::streamsize>(path.size()));
    write_pod<std::uint8_t>(os, sizeof(T));
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(tensor->shape.size()));
    for (int d : tensor->shape) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(tensor->data.data()),
             static_cast<std::streamsize>(tensor->data.size() * sizeof(T)));
  }
  if (!os) throw IoError("checkpoint: write to '" + file + "' failed");
}

}  // namespace

void save_checkpoint(const std::string& file,
                     const std::vector<std::pair<std::string, const TensorF*>>& entries) {
  save_impl(file, entries);
}

void save_checkpoint(const std::string& file,
                     const std::vector<std::pair<std::string, const TensorD*>>& entries) {
  save_impl(file, entries);
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + file + "'");
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError("checkpoint: '" + file + "' is not a checkpoint file");
  const auto count = read_pod<std::uint32_t>(is);
  std::vector<CheckpointEntry> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto path_len = read_pod<std::uint16_t>(is);
    e.path.resize(path_len);
    is.read(e.path.data(), path_len);
    e.dtype_bytes = read_pod<std::uint8_t>(is);
    if (e.dtype_bytes != 4 && e.dtype_bytes != 8)
      throw IoError("checkpoint: bad dtype in entry '" + e.path + "'");
    const auto ndim = read_pod<std::uint8_t>(is);
    std::size_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      const auto dim = read_pod<std::uint32_t>(is);
      e.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    e.values.resize(numel);
    if (e.dtype_bytes == 4) {
      std::vector<float> buf(numel);
      is.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(numel * sizeof(float)));
      for (std::size_t j = 0; j < numel; ++j) e.values[j] = buf[j];
    } else {
      is.read(reinterpret_cast<char*>(e.values.data()),
              static_cast<std::streamsize>(numel * sizeof(double)));
    }
    if (!is) throw IoError("checkpoint: truncated entry '" + e.path + "'");
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace mergevit
