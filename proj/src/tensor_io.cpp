#include "sfmamba/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace sfm {

namespace le {

namespace {
template <typename U>
void put(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("truncated file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}
}  // namespace

void put_u8(std::ostream& os, std::uint8_t v) { put(os, v); }
void put_u16(std::ostream& os, std::uint16_t v) { put(os, v); }
void put_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void put_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
std::uint8_t get_u8(std::istream& is) { return get<std::uint8_t>(is); }
std::uint16_t get_u16(std::istream& is) { return get<std::uint16_t>(is); }
std::uint32_t get_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t get_u64(std::istream& is) { return get<std::uint64_t>(is); }

}  // namespace le

void write_tensor(std::ostream& os, const Tensor& t, DType dtype) {
  os.write("TNSR", 4);
  le::put_u8(os, 1);
  le::put_u8(os, static_cast<std::uint8_t>(dtype));
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  le::put_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) le::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.values()) {
    if (dtype == DType::F64) {
      le::put_u64(os, std::bit_cast<std::uint64_t>(v));
    } else {
      le::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated file");
  if (std::memcmp(magic, "TNSR", 4) != 0) throw FormatError("bad magic");
  const auto version = le::get_u8(is);
  if (version != 1) throw FormatError("unsupported TNSR version " + std::to_string(version));
  const auto dtype = le::get_u8(is);
  if (dtype > 1) throw FormatError("unknown dtype tag " + std::to_string(dtype));
  const auto rank = le::get_u8(is);
  Shape shape(rank);
  for (auto& d : shape) {
    d = le::get_u32(is);
    if (d == 0) throw FormatError("zero-sized dimension");
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) {
    v = dtype == 0 ? std::bit_cast<double>(le::get_u64(is))
                   : static_cast<double>(std::bit_cast<float>(le::get_u32(is)));
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t, dtype);
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_tensor(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace sfm
