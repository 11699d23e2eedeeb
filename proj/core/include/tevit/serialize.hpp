#pragma once

#include <string>

#include "tevit/tensor.hpp"

namespace tevit {

// TVT1 tensor container: magic "TVT1", little-endian u32 dtype tag
// (0 = f32, 1 = f64), u32 rank, rank x u64 dims, then the raw little-endian
// payload in row-major order.
enum class TvtDtype : std::uint32_t { f32 = 0, f64 = 1 };

void write_tvt(const std::string& path, const Tensor& t, TvtDtype dtype = TvtDtype::f64);
Tensor read_tvt(const std::string& path);

}  // namespace tevit
