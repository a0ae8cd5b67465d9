#pragma once

#include "rxf/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rxf {

// Binary layout, all integers little-endian:
//   "RXF1" | u32 version | u8 endianness (1 = little) | u32 tensor count
//   per tensor: u32 name length, UTF-8 name, u8 dtype, u32 rank,
//               u64 dims[rank], u64 payload offset
//   u64 payload size | payload
//   u64 metadata length | metadata (JSON text)

inline constexpr std::uint32_t kContainerVersion = 1;

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1 };

struct ContainerEntry {
  std::string name;
  Dtype dtype = Dtype::kF64;
  Tensor tensor;
};

struct Container {
  std::vector<ContainerEntry> entries;
  nlohmann::json metadata = nlohmann::json::object();

  void add(std::string name, const Tensor& t, Dtype dtype = Dtype::kF64);
  /// Throws std::out_of_range naming the missing tensor.
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::string encode_container(const Container& c);
/// Throws std::runtime_error on malformed input or unsupported versions.
Container decode_container(const std::string& bytes);

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

}  // namespace rxf
