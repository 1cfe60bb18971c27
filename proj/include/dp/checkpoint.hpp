#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dp/tensor.hpp"

namespace dp {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Flat binary parameter container, little-endian throughout:
//   8-byte magic "DPTC0001", then per-parameter records until EOF:
//     u64 name length, UTF-8 name bytes,
//     u64 rank, u64 dims[rank],
//     f64 data[prod(dims)].
// Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const NamedParams& params);
NamedParams load_checkpoint(const std::filesystem::path& path);

}  // namespace dp
