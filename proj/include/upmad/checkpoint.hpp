#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "upmad/net.hpp"

namespace upmad {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

/// Little-endian container:
///   magic "SG3P" | version u32 | count u32
///   count x (name_len u32 | name bytes | rank u32 | rank x u32 extents)
///   then every payload as float32, in manifest order.
std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedArray> arrays);
std::vector<NamedArray> decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedArray> arrays);
std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path);

template <typename T>
std::vector<NamedArray> snapshot(const Network<T>& net);

/// Names and shapes must match the network's parameter list exactly.
template <typename T>
void restore(Network<T>& net, std::span<const NamedArray> arrays);

}  // namespace upmad
