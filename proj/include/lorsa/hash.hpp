#pragma once

#include <cstdint>
#include <string>

namespace lorsa {

// SHA-256 of a byte string, lowercase hex. Used as the content hash that
// ties every output artifact back to the exact config that produced it.
std::string sha256_hex(const std::string& bytes);

}  // namespace lorsa
