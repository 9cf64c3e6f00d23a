#pragma once

// Binary parameter snapshots.
//
// Layout (all integers and floats little-endian):
//   magic "RASW" | u32 version | u64 count
//   count x { u32 name_len | name bytes | u32 rank | rank x u64 dims | row-major f64 payload }

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ras/tensor/tape.hpp"

namespace ras::tensor {

inline constexpr std::array<char, 4> kSnapshotMagic = {'R', 'A', 'S', 'W'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

struct NamedArray {
  std::string name;
  Array value;
};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) throw std::runtime_error("snapshot: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace detail

inline void write_snapshot(std::ostream& os, const std::vector<NamedArray>& arrays) {
  os.write(kSnapshotMagic.data(), kSnapshotMagic.size());
  detail::write_le<std::uint32_t>(os, kSnapshotVersion);
  detail::write_le<std::uint64_t>(os, arrays.size());
  for (const auto& [name, value] : arrays) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint32_t>(os, 2);
    detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(value.rows()));
    detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(value.cols()));
    for (Eigen::Index i = 0; i < value.size(); ++i) detail::write_le<double>(os, value.data()[i]);
  }
  if (!os) throw std::runtime_error("snapshot: write failed");
}

inline std::vector<NamedArray> read_snapshot(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kSnapshotMagic) {
    throw std::runtime_error("snapshot: bad magic");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kSnapshotVersion) {
    throw std::runtime_error("snapshot: unsupported version " + std::to_string(version));
  }
  const auto count = detail::read_le<std::uint64_t>(is);
  std::vector<NamedArray> out;
  out.reserve(count);
  for (std::uint64_t n = 0; n < count; ++n) {
    NamedArray a;
    const auto len = detail::read_le<std::uint32_t>(is);
    a.name.resize(len);
    if (!is.read(a.name.data(), len)) throw std::runtime_error("snapshot: truncated name");
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank > 2) throw std::runtime_error("snapshot: rank " + std::to_string(rank) + " unsupported");
    std::array<std::uint64_t, 2> dims{1, 1};
    // rank-1 arrays load as a single row
    for (std::uint32_t r = 0; r < rank; ++r) dims[rank == 1 ? 1 : r] = detail::read_le<std::uint64_t>(is);
    a.value.resize(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
    for (Eigen::Index i = 0; i < a.value.size(); ++i) a.value.data()[i] = detail::read_le<double>(is);
    out.push_back(std::move(a));
  }
  return out;
}

inline void save_snapshot(const std::string& path, const std::vector<NamedArray>& arrays) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("snapshot: cannot open " + path);
  write_snapshot(os, arrays);
}

inline std::vector<NamedArray> load_snapshot(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("snapshot: cannot open " + path);
  return read_snapshot(is);
}

inline std::vector<NamedArray> to_named(const std::vector<const Parameter*>& params) {
  std::vector<NamedArray> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back({p->name, p->value});
  return out;
}

/// Copies arrays into parameters by name; every parameter must be present with its shape.
inline void assign_named(const std::vector<NamedArray>& arrays, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const NamedArray* hit = nullptr;
    for (const auto& a : arrays) {
      if (a.name == p->name) {
        hit = &a;
        break;
      }
    }
    if (!hit) throw std::runtime_error("snapshot: missing array " + p->name);
    if (hit->value.rows() != p->value.rows() || hit->value.cols() != p->value.cols()) {
      throw std::runtime_error("snapshot: array " + p->name + " has shape " + shape_of(hit->value) +
                               ", expected " + shape_of(p->value));
    }
    p->value = hit->value;
    p->zero_grad();
  }
}

}  // namespace ras::tensor
