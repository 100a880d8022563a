#include "lorsa/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace lorsa {
namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("tensor file: truncated");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string take_string(std::istream& is) {
  const uint32_t n = take<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("tensor file: truncated string");
  return s;
}

}  // namespace

const Tensor& TensorFile::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::runtime_error("tensor file: missing tensor '" + name + "'");
}

bool TensorFile::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void write_tensor_file(const std::string& path, const TensorFile& file) {
  if (file.magic.size() != 8) throw std::invalid_argument("tensor file: magic must be 8 bytes");
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
    os.write(file.magic.data(), 8);
    put<uint32_t>(os, 1);
    put<uint64_t>(os, file.config_json.size());
    os.write(file.config_json.data(), static_cast<std::streamsize>(file.config_json.size()));
    put<uint32_t>(os, static_cast<uint32_t>(file.tensors.size()));
    for (const auto& [name, t] : file.tensors) {
      put_string(os, name);
      put<uint32_t>(os, static_cast<uint32_t>(t.dtype));
      put<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
      for (size_t d : t.shape) put<uint64_t>(os, d);
      if (t.dtype == Dtype::f64) {
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
      } else {
        std::vector<float> f(t.data.begin(), t.data.end());
        os.write(reinterpret_cast<const char*>(f.data()),
                 static_cast<std::streamsize>(f.size() * sizeof(float)));
      }
    }
    if (!os) {
      std::remove(tmp.c_str());
      throw std::runtime_error("write failed for " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }
}

TensorFile read_tensor_file(const std::string& path, const std::string& expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  TensorFile file;
  char magic[8];
  is.read(magic, 8);
  if (!is) throw std::runtime_error("tensor file: truncated magic in " + path);
  file.magic.assign(magic, 8);
  if (!expected_magic.empty() && file.magic != expected_magic)
    throw std::runtime_error("tensor file: bad magic in " + path + " (got '" + file.magic + "')");
  const uint32_t version = take<uint32_t>(is);
  if (version != 1) throw std::runtime_error("tensor file: unsupported version");
  const uint64_t cfg_len = take<uint64_t>(is);
  file.config_json.resize(cfg_len);
  is.read(file.config_json.data(), static_cast<std::streamsize>(cfg_len));
  const uint32_t count = take<uint32_t>(is);
  file.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = take_string(is);
    Tensor t;
    t.dtype = static_cast<Dtype>(take<uint32_t>(is));
    const uint32_t ndim = take<uint32_t>(is);
    t.shape.resize(ndim);
    for (uint32_t d = 0; d < ndim; ++d) t.shape[d] = take<uint64_t>(is);
    const size_t n = Tensor::numel(t.shape);
    t.data.resize(n);
    if (t.dtype == Dtype::f64) {
      is.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
    } else {
      std::vector<float> f(n);
      is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(n * sizeof(float)));
      for (size_t j = 0; j < n; ++j) t.data[j] = f[j];
    }
    if (!is) throw std::runtime_error("tensor file: truncated tensor data");
    file.tensors.emplace_back(std::move(name), std::move(t));
  }
  return file;
}

}  // namespace lorsa
