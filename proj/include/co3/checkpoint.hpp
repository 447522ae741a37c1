#pragma once

// Versioned tensor container shared by model and language-model files:
//
//   "CO3K" | u32 version | u32 n_meta | n_meta x (str key, str value)
//   | u32 n_tensors | manifest: n_tensors x (str name, u32 ndim, u64 dims..., u8 dtype)
//   | payloads: raw little-endian f64 in manifest order | u64 FNV-1a of all preceding bytes
//
// str = u32 byte length + bytes. All integers little-endian.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "co3/autodiff.hpp"

namespace co3 {

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  ad::Matrix value;
};

struct Container {
  std::map<std::string, std::string> metadata;
  std::vector<NamedTensor> tensors;

  const std::string& meta(const std::string& key) const;
  const NamedTensor* find(const std::string& name) const;
};

std::string serialize_container(const Container& c);
// Throws ErrorCode::checkpoint_format on any inconsistency; nothing partial escapes.
Container parse_container(const std::string& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace co3
