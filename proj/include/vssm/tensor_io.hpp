#pragma once

#include <iosfwd>
#include <string>

#include "vssm/tensor.hpp"

namespace vssm {

/// MATD binary tensor format, bit-exact across implementations.
/// Layout (all integers little-endian):
///   bytes 0..3   magic "MATD"
///   u32          version (1)
///   u32          rank
///   u32 * rank   extents
///   u8           dtype: 0x08 = f64, 0x04 = f32
///   payload      little-endian IEEE-754 scalars, row-major
enum class MatdType : unsigned char { f64 = 0x08, f32 = 0x04 };

void matd_write(std::ostream& os, const Tensor& t, MatdType dtype = MatdType::f64);
Tensor matd_read(std::istream& is);

void matd_save(const std::string& path, const Tensor& t, MatdType dtype = MatdType::f64);
Tensor matd_load(const std::string& path);

}  // namespace vssm
