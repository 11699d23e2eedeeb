#include "tevit/serialize.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "tevit/common.hpp"

namespace tevit {

namespace {
// Host is little-endian on every platform this targets; write raw.
template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated TVT1 file: " + path);
  return v;
}
}  // namespace

void write_tvt(const std::string& path, const Tensor& t, TvtDtype dtype) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("TVT1", 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(dtype));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  auto vals = t.values();
  if (dtype == TvtDtype::f64) {
    os.write(reinterpret_cast<const char*>(vals.data()),
             static_cast<std::streamsize>(vals.size() * sizeof(double)));
  } else {
    std::vector<float> f(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) f[i] = static_cast<float>(vals[i]);
    os.write(reinterpret_cast<const char*>(f.data()),
             static_cast<std::streamsize>(f.size() * sizeof(float)));
  }
  if (!os) throw IoError("write failed: " + path);
}

Tensor read_tvt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TVT1", 4) != 0) {
    throw IoError("bad TVT1 magic in " + path);
  }
  const auto dtype = get<std::uint32_t>(is, path);
  if (dtype > 1) throw IoError("unknown TVT1 dtype tag in " + path);
  const auto rank = get<std::uint32_t>(is, path);
  if (rank > 16) throw IoError("implausible TVT1 rank in " + path);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::int64_t>(get<std::uint64_t>(is, path));
  const std::int64_t n = numel(shape);
  std::vector<double> data(static_cast<std::size_t>(n));
  if (dtype == static_cast<std::uint32_t>(TvtDtype::f64)) {
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  } else {
    std::vector<float> f(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
    for (std::size_t i = 0; i < f.size(); ++i) data[i] = static_cast<double>(f[i]);
  }
  if (!is) throw IoError("truncated TVT1 payload: " + path);
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace tevit
