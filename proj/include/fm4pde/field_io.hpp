#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/pde.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fm4pde {

static_assert(std::endian::native == std::endian::little,
              "field files are written with native little-endian integers and doubles");

// "FM4PDE01", u32 LE rank, rank x u32 LE extents (channel first), then the
// row-major float64 LE values.
inline constexpr char kFieldMagic[8] = {'F', 'M', '4', 'P', 'D', 'E', '0', '1'};

inline std::string encode_field(const GridField& field) {
  Eigen::Index expected = 1;
  for (auto e : field.extents) expected *= e;
  if (expected != field.data.size()) throw ContractError("encode_field: extents do not match data size");
  std::string bytes(kFieldMagic, sizeof(kFieldMagic));
  auto put_u32 = [&bytes](std::uint32_t v) { bytes.append(reinterpret_cast<const char*>(&v), sizeof(v)); };
  put_u32(static_cast<std::uint32_t>(field.extents.size()));
  for (auto e : field.extents) put_u32(static_cast<std::uint32_t>(e));
  bytes.append(reinterpret_cast<const char*>(field.data.data()),
               static_cast<std::size_t>(field.data.size()) * sizeof(double));
  return bytes;
}

inline GridField decode_field(const std::string& bytes) {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (bytes.size() - pos < n) throw FormatError("field file truncated");
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[8];
  take(magic, sizeof(magic));
  if (std::memcmp(magic, kFieldMagic, sizeof(magic)) != 0) throw FormatError("field file: bad magic");
  std::uint32_t rank = 0;
  take(&rank, sizeof(rank));
  if (rank == 0 || rank > 8) throw FormatError("field file: implausible rank " + std::to_string(rank));
  GridField field;
  Eigen::Index total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t e = 0;
    take(&e, sizeof(e));
    field.extents.push_back(e);
    total *= e;
  }
  if (bytes.size() - pos != static_cast<std::size_t>(total) * sizeof(double)) {
    throw FormatError("field file: payload size does not match extents");
  }
  field.data.resize(total);
  take(field.data.data(), static_cast<std::size_t>(total) * sizeof(double));
  return field;
}

inline void write_field(const std::filesystem::path& path, const GridField& field) {
  const std::string bytes = encode_field(field);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_field: cannot open " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write_field: write failed for " + path.string());
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline GridField read_field(const std::filesystem::path& path) { return decode_field(read_bytes(path)); }

}  // namespace fm4pde
