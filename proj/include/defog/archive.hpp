#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace defog {

/// Single-file container: a human-readable YAML manifest followed by named raw
/// little-endian arrays and a trailing checksum. Datasets and checkpoints both
/// use it.
///
///   "DEFOGARC" | u32 container_version | u64 manifest_len | manifest bytes
///   | u32 n_arrays | { u16 name_len | name | u8 dtype | u64 count | data }*
///   | u64 fnv1a(everything before)
class Archive {
public:
  enum class DType : std::uint8_t { F32 = 1, I32 = 2, U8 = 3, I64 = 4 };

  struct Array {
    DType dtype = DType::F32;
    std::vector<std::uint8_t> bytes;
    std::size_t count() const;
  };

  std::string manifest;

  void put_f32(const std::string& name, std::span<const float> values);
  void put_i32(const std::string& name, std::span<const std::int32_t> values);
  void put_i64(const std::string& name, std::span<const std::int64_t> values);
  void put_u8(const std::string& name, std::span<const std::uint8_t> values);

  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  const Array& at(const std::string& name) const;
  std::vector<float> get_f32(const std::string& name) const;
  std::vector<std::int32_t> get_i32(const std::string& name) const;
  std::vector<std::int64_t> get_i64(const std::string& name) const;
  std::vector<std::uint8_t> get_u8(const std::string& name) const;
  std::vector<std::string> names() const;

  void save(const std::string& path) const;
  static Archive load(const std::string& path);

private:
  std::map<std::string, Array> arrays_;
};

}  // namespace defog
