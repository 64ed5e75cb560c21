#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "sfmamba/tensor.hpp"

namespace sfm {

enum class DType : std::uint8_t { F64 = 0, F32 = 1 };

/// File cannot be opened, read, or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File contents violate the expected layout (bad magic, version, truncation, ...).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// TNSR1 layout: "TNSR", u8 version=1, u8 dtype (0=f64, 1=f32), u8 rank, rank x u32 LE dims,
// row-major payload in little-endian IEEE-754.
void write_tensor(std::ostream& os, const Tensor& t, DType dtype = DType::F64);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::F64);
Tensor load_tensor(const std::filesystem::path& path);

namespace le {
void put_u8(std::ostream& os, std::uint8_t v);
void put_u16(std::ostream& os, std::uint16_t v);
void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
std::uint8_t get_u8(std::istream& is);
std::uint16_t get_u16(std::istream& is);
std::uint32_t get_u32(std::istream& is);
std::uint64_t get_u64(std::istream& is);
}  // namespace le

}  // namespace sfm
