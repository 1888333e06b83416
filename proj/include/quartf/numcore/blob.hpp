// QTNS tensor blob format:
//   magic "QTNS" | format version u32 | dtype u8 (0=f32, 1=f64) | rank u8 |
//   dims u64 little-endian each | raw little-endian values, row-major.
#pragma once

#include "quartf/numcore/tensor.hpp"

#include <cstring>
#include <istream>
#include <ostream>

namespace quartf {

inline constexpr std::uint32_t kBlobFormatVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  // Little-endian host assumed; values are memcpy'd as-is.
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  if (!is) throw IoError("blob: truncated input");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

template <typename Scalar>
void write_blob(std::ostream& os, const Tensor<Scalar>& t) {
  os.write("QTNS", 4);
  detail::write_le<std::uint32_t>(os, kBlobFormatVersion);
  detail::write_le<std::uint8_t>(os, sizeof(Scalar) == 4 ? 0 : 1);
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape().size()));
  for (Index d : t.shape()) detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  const auto& m = t.value();
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(Scalar)) * m.size());
  if (!os) throw IoError("blob: write failed");
}

template <typename Scalar>
Tensor<Scalar> read_blob(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "QTNS", 4) != 0) throw IoError("blob: bad magic");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kBlobFormatVersion)
    throw IoError("blob: unsupported format version " + std::to_string(version));
  const auto dtype = detail::read_le<std::uint8_t>(is);
  const std::uint8_t expected = sizeof(Scalar) == 4 ? 0 : 1;
  if (dtype != expected)
    throw IoError("blob: dtype code " + std::to_string(dtype) + " does not match requested scalar");
  const auto rank = detail::read_le<std::uint8_t>(is);
  if (rank > 2) throw IoError("blob: rank " + std::to_string(rank) + " unsupported by compute tensors");
  Shape shape;
  for (std::uint8_t i = 0; i < rank; ++i) {
    const auto d = detail::read_le<std::uint64_t>(is);
    if (d == 0) throw IoError("blob: zero dimension");
    shape.push_back(static_cast<Index>(d));
  }
  auto [r, c] = Tensor<Scalar>::storage_dims(shape);
  Matrix<Scalar> m(r, c);
  is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(Scalar)) * m.size());
  if (!is) throw IoError("blob: truncated payload");
  return Tensor<Scalar>::from_value(std::move(shape), std::move(m));
}

}  // namespace quartf
