#pragma once

// Tensor file format:
//   "MROS" | version u32 | rank u32 | extents u64[rank] | float64[numel] row-major
// All integers and floats little-endian.

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

#include "mros/binary_io.hpp"
#include "mros/tensor.hpp"

namespace mros {

inline constexpr std::uint32_t kTensorFormatVersion = 1;

inline void write_tensor(std::ostream& os, const Tensor& t) {
  binary::write_magic(os, "MROS");
  binary::write_le<std::uint32_t>(os, kTensorFormatVersion);
  binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto extent : t.shape()) binary::write_le<std::uint64_t>(os, extent);
  for (double v : t.data()) binary::write_le<double>(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  binary::expect_magic(is, "MROS", "tensor");
  auto version = binary::read_le<std::uint32_t>(is, "tensor version");
  if (version != kTensorFormatVersion) raise<DataError>("tensor: unsupported format version ", version);
  auto rank = binary::read_le<std::uint32_t>(is, "tensor rank");
  if (rank > 16) raise<DataError>("tensor: implausible rank ", rank);
  Shape shape(rank);
  for (auto& extent : shape) {
    extent = binary::read_le<std::uint64_t>(is, "tensor extent");
    if (extent == 0 || extent > (std::uint64_t{1} << 32)) raise<DataError>("tensor: invalid extent ", extent);
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = binary::read_le<double>(is, "tensor data");
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) raise<DataError>("cannot open ", path.string(), " for writing");
  write_tensor(os, t);
  if (!os) raise<DataError>("write failed for ", path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise<DataError>("cannot open tensor file ", path.string());
  return read_tensor(is);
}

}  // namespace mros
