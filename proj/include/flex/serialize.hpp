#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "flex/tensor.hpp"

// Tensor wire format (all little-endian):
//   uint32 rank
//   uint64 extent[rank]
//   float64 payload[product(extents)], row-major

namespace flex {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

namespace detail {

template <class U>
void write_pod(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U read_pod(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) fail(ErrorKind::PersistedState, "truncated tensor stream");
  return v;
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::write_pod<std::uint64_t>(os, e);
  for (T v : t.data()) detail::write_pod<double>(os, static_cast<double>(v));
  if (!os) fail(ErrorKind::PersistedState, "tensor write failed");
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
  const auto rank = detail::read_pod<std::uint32_t>(is);
  if (rank > 8) fail(ErrorKind::PersistedState, "implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = detail::read_pod<std::uint64_t>(is);
  const std::size_t n = shape_size(shape);
  if (n > (std::size_t{1} << 32)) fail(ErrorKind::PersistedState, "implausible tensor size");
  std::vector<double> raw(n);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) fail(ErrorKind::PersistedState, "truncated tensor payload");
  return Tensor<T>(std::move(shape), std::vector<T>(raw.begin(), raw.end()));
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::PersistedState, "cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::PersistedState, "cannot open " + path.string());
  return read_tensor<T>(is);
}

}  // namespace flex
