#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "upmad/grid.hpp"

namespace upmad {

enum class DType : std::uint32_t { Float32 = 1, UInt8 = 2 };

std::size_t dtype_size(DType t);

/// 28-byte little-endian SG3D header:
///   magic "SG3D" | version u32 | channels u32 | D u32 | H u32 | W u32 | dtype u32
/// followed by channels*D*H*W voxels, channel-major then D,H,W with W fastest.
struct VolumeHeader {
  static constexpr std::array<char, 4> kMagic{'S', 'G', '3', 'D'};
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kSize = 28;

  std::uint32_t version = kVersion;
  std::uint32_t channels = 1;
  Dims dims;
  DType dtype = DType::Float32;

  std::size_t payload_bytes() const { return channels * dims.count() * dtype_size(dtype); }
};

/// Header plus raw payload in the header's dtype.
struct Volume {
  VolumeHeader header;
  std::variant<std::vector<float>, std::vector<std::uint8_t>> payload;

  static Volume from_grids(std::span<const Grid<float>> channels);
  static Volume from_grids(std::span<const Mask> channels);
  /// Channel c as a grid; throws if the dtype differs.
  Grid<float> float_channel(std::size_t c) const;
  Grid<std::uint8_t> u8_channel(std::size_t c) const;
};

std::vector<std::uint8_t> encode_volume(const Volume& v);
Volume decode_volume(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

Volume read_volume(const std::filesystem::path& path);
void write_volume(const std::filesystem::path& path, const Volume& v);

enum class Modality : std::size_t { Flair = 0, T1ce = 1, T1 = 2, T2 = 3 };
inline constexpr std::array<const char*, 4> kModalityNames{"FLAIR", "T1ce", "T1", "T2"};

/// Label codes: 0 background, 1 necrosis, 2 edema, 4 enhancing.
bool valid_label_code(std::uint8_t code);

struct MultiModalVolume {
  std::array<Grid<float>, 4> modalities;
  std::optional<Grid<std::uint8_t>> labels;

  Dims dims() const { return modalities[0].dims; }
  const Grid<float>& flair() const { return modalities[static_cast<std::size_t>(Modality::Flair)]; }
  /// Throws on dimension disagreement or bad label codes.
  void validate() const;
};

/// Case files: 4-channel float image and 1-channel uint8 label volume.
void save_case(const MultiModalVolume& v, const std::filesystem::path& image_path,
               const std::optional<std::filesystem::path>& label_path);
MultiModalVolume load_case(const std::filesystem::path& image_path,
                           const std::optional<std::filesystem::path>& label_path);

/// Window start per axis: floor((src - target) / 2).
Dims crop_start(Dims src, Dims target);

template <typename T>
Grid<T> center_crop(const Grid<T>& g, Dims target) {
  const Dims s = crop_start(g.dims, target);
  Grid<T> out(target);
  for (std::size_t z = 0; z < target.d; ++z)
    for (std::size_t y = 0; y < target.h; ++y)
      for (std::size_t x = 0; x < target.w; ++x) out.at(z, y, x) = g.at(z + s.d, y + s.h, x + s.w);
  return out;
}

MultiModalVolume center_crop(const MultiModalVolume& v, Dims target);

enum class SliceAxis { Axial, Coronal, Sagittal };

/// Binary PGM (P5, maxval 255) of one slice; value v maps to
/// round(255 * clamp((v - lo) / (hi - lo), 0, 1)).
/// Axial fixes D (image H x W), coronal fixes H (D x W), sagittal fixes W (D x H).
std::vector<std::uint8_t> render_slice_pgm(const Grid<float>& g, SliceAxis axis, std::size_t index, double lo, double hi);
void export_slice_pgm(const Grid<float>& g, SliceAxis axis, std::size_t index, double lo, double hi,
                      const std::filesystem::path& path);

}  // namespace upmad
