#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lorsa/tensor.hpp"

namespace lorsa {

// Magic-tagged container: 8-byte magic, format version, a JSON config block,
// then a named tensor table. All integers little-endian. Layout:
//
//   magic[8]
//   u32 version (=1)
//   u64 config_len, config bytes (UTF-8 JSON)
//   u32 n_tensors
//   per tensor: u32 name_len, name bytes, u32 dtype (0=f64, 1=f32),
//               u32 ndim, u64 dims[ndim], raw values (row-major)
struct TensorFile {
  std::string magic;  // exactly 8 bytes
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_tensor_file(const std::string& path, const TensorFile& file);
TensorFile read_tensor_file(const std::string& path, const std::string& expected_magic);

}  // namespace lorsa
