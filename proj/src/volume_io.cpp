#include "upmad/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace upmad {

std::vector<Offset> neighbourhood(int connectivity) {
  std::vector<Offset> out;
  if (connectivity == 6) {
    out = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  } else if (connectivity == 26) {
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dz || dy || dx) out.push_back({dz, dy, dx});
  } else {
    throw ConfigError("connectivity must be 6 or 26, got " + std::to_string(connectivity));
  }
  return out;
}

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::Float32:
      return 4;
    case DType::UInt8:
      return 1;
  }
  throw FormatError("unknown dtype code " + std::to_string(static_cast<std::uint32_t>(t)));
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v == 0 || v > 0xFFFFFFFFu) throw ShapeError(std::string("volume ") + what + " must be in [1, 2^32)");
  return static_cast<std::uint32_t>(v);
}

template <typename T>
Volume volume_from(std::span<const Grid<T>> channels, DType dt) {
  if (channels.empty()) throw ShapeError("volume needs at least one channel");
  const Dims dims = channels[0].dims;
  if (dims.count() == 0) throw ShapeError("zero-voxel volume " + dims.str());
  std::vector<T> payload;
  payload.reserve(channels.size() * dims.count());
  for (const auto& c : channels) {
    if (!(c.dims == dims)) throw ShapeError("channel dims " + c.dims.str() + " differ from " + dims.str());
    payload.insert(payload.end(), c.data.begin(), c.data.end());
  }
  Volume v;
  v.header.channels = static_cast<std::uint32_t>(channels.size());
  v.header.dims = dims;
  v.header.dtype = dt;
  v.payload = std::move(payload);
  return v;
}

template <typename T>
Grid<T> channel_of(const Volume& v, std::size_t c) {
  const auto* p = std::get_if<std::vector<T>>(&v.payload);
  if (p == nullptr) throw FormatError("volume dtype does not match requested channel type");
  if (c >= v.header.channels) throw ShapeError("channel " + std::to_string(c) + " out of range");
  const std::size_t n = v.header.dims.count();
  return Grid<T>(v.header.dims, std::vector<T>(p->begin() + static_cast<std::ptrdiff_t>(c * n),
                                               p->begin() + static_cast<std::ptrdiff_t>((c + 1) * n)));
}

}  // namespace

Volume Volume::from_grids(std::span<const Grid<float>> channels) { return volume_from(channels, DType::Float32); }
Volume Volume::from_grids(std::span<const Mask> channels) { return volume_from(channels, DType::UInt8); }
Grid<float> Volume::float_channel(std::size_t c) const { return channel_of<float>(*this, c); }
Grid<std::uint8_t> Volume::u8_channel(std::size_t c) const { return channel_of<std::uint8_t>(*this, c); }

std::vector<std::uint8_t> encode_volume(const Volume& v) {
  const auto& h = v.header;
  const std::size_t n = h.channels * h.dims.count();
  if (n == 0) throw ShapeError("zero-voxel volume");
  std::vector<std::uint8_t> out;
  out.reserve(VolumeHeader::kSize + h.payload_bytes());
  out.insert(out.end(), VolumeHeader::kMagic.begin(), VolumeHeader::kMagic.end());
  put_u32(out, h.version);
  put_u32(out, checked_u32(h.channels, "channels"));
  put_u32(out, checked_u32(h.dims.d, "depth"));
  put_u32(out, checked_u32(h.dims.h, "height"));
  put_u32(out, checked_u32(h.dims.w, "width"));
  put_u32(out, static_cast<std::uint32_t>(h.dtype));
  if (h.dtype == DType::Float32) {
    const auto* p = std::get_if<std::vector<float>>(&v.payload);
    if (p == nullptr || p->size() != n) throw ShapeError("float payload does not match header");
    for (float f : *p) put_u32(out, std::bit_cast<std::uint32_t>(f));
  } else if (h.dtype == DType::UInt8) {
    const auto* p = std::get_if<std::vector<std::uint8_t>>(&v.payload);
    if (p == nullptr || p->size() != n) throw ShapeError("uint8 payload does not match header");
    out.insert(out.end(), p->begin(), p->end());
  } else {
    throw FormatError("unknown dtype code " + std::to_string(static_cast<std::uint32_t>(h.dtype)));
  }
  return out;
}

Volume decode_volume(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < VolumeHeader::kSize) throw TruncatedError("file shorter than the 28-byte SG3D header");
  if (!std::equal(VolumeHeader::kMagic.begin(), VolumeHeader::kMagic.end(), bytes.begin())) {
    throw FormatError("bad magic: not an SG3D volume");
  }
  Volume v;
  auto& h = v.header;
  h.version = get_u32(bytes, 4);
  if (h.version != VolumeHeader::kVersion) throw FormatError("unsupported SG3D version " + std::to_string(h.version));
  h.channels = get_u32(bytes, 8);
  h.dims = {get_u32(bytes, 12), get_u32(bytes, 16), get_u32(bytes, 20)};
  const std::uint32_t code = get_u32(bytes, 24);
  if (code != 1 && code != 2) throw FormatError("unknown dtype code " + std::to_string(code));
  h.dtype = static_cast<DType>(code);
  if (h.channels == 0 || h.dims.count() == 0) throw FormatError("SG3D header has a zero extent");
  const std::size_t need = h.payload_bytes();
  const std::size_t have = bytes.size() - VolumeHeader::kSize;
  if (have < need) {
    throw TruncatedError("truncated payload: expected " + std::to_string(need) + " bytes, found " + std::to_string(have));
  }
  if (have > need) throw FormatError("trailing bytes after SG3D payload");
  const std::size_t n = h.channels * h.dims.count();
  if (h.dtype == DType::Float32) {
    std::vector<float> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = std::bit_cast<float>(get_u32(bytes, VolumeHeader::kSize + 4 * i));
    v.payload = std::move(p);
  } else {
    v.payload = std::vector<std::uint8_t>(bytes.begin() + VolumeHeader::kSize, bytes.end());
  }
  return v;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Volume read_volume(const std::filesystem::path& path) { return decode_volume(read_file_bytes(path)); }

void write_volume(const std::filesystem::path& path, const Volume& v) { write_file_bytes(path, encode_volume(v)); }

bool valid_label_code(std::uint8_t code) { return code == 0 || code == 1 || code == 2 || code == 4; }

void MultiModalVolume::validate() const {
  const Dims d = dims();
  for (std::size_t m = 0; m < 4; ++m) {
    if (!(modalities[m].dims == d) || modalities[m].data.size() != d.count()) {
      throw ShapeError(std::string("modality ") + kModalityNames[m] + " dims differ from FLAIR");
    }
  }
  if (labels) {
    if (!(labels->dims == d)) throw ShapeError("label dims " + labels->dims.str() + " differ from image " + d.str());
    for (auto c : labels->data) {
      if (!valid_label_code(c)) throw FormatError("invalid label code " + std::to_string(c));
    }
  }
}

void save_case(const MultiModalVolume& v, const std::filesystem::path& image_path,
               const std::optional<std::filesystem::path>& label_path) {
  v.validate();
  write_volume(image_path, Volume::from_grids(std::span<const Grid<float>>(v.modalities)));
  if (label_path) {
    if (!v.labels) throw ShapeError("case has no labels to save");
    write_volume(*label_path, Volume::from_grids(std::span<const Mask>(&*v.labels, 1)));
  }
}

MultiModalVolume load_case(const std::filesystem::path& image_path,
                           const std::optional<std::filesystem::path>& label_path) {
  const Volume img = read_volume(image_path);
  if (img.header.channels != 4 || img.header.dtype != DType::Float32) {
    throw FormatError(image_path.string() + ": expected a 4-channel float32 image volume");
  }
  MultiModalVolume v;
  for (std::size_t m = 0; m < 4; ++m) v.modalities[m] = img.float_channel(m);
  if (label_path) {
    const Volume lbl = read_volume(*label_path);
    if (lbl.header.channels != 1 || lbl.header.dtype != DType::UInt8) {
      throw FormatError(label_path->string() + ": expected a 1-channel uint8 label volume");
    }
    v.labels = lbl.u8_channel(0);
  }
  v.validate();
  return v;
}

Dims crop_start(Dims src, Dims target) {
  if (target.d > src.d || target.h > src.h || target.w > src.w) {
    throw ShapeError("crop target " + target.str() + " exceeds source " + src.str());
  }
  if (target.count() == 0) throw ShapeError("crop target has a zero extent");
  return {(src.d - target.d) / 2, (src.h - target.h) / 2, (src.w - target.w) / 2};
}

MultiModalVolume center_crop(const MultiModalVolume& v, Dims target) {
  MultiModalVolume out;
  for (std::size_t m = 0; m < 4; ++m) out.modalities[m] = center_crop(v.modalities[m], target);
  if (v.labels) out.labels = center_crop(*v.labels, target);
  return out;
}

std::vector<std::uint8_t> render_slice_pgm(const Grid<float>& g, SliceAxis axis, std::size_t index, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("PGM range requires lo < hi");
  std::size_t rows = 0, cols = 0, limit = 0;
  switch (axis) {
    case SliceAxis::Axial:
      rows = g.dims.h, cols = g.dims.w, limit = g.dims.d;
      break;
    case SliceAxis::Coronal:
      rows = g.dims.d, cols = g.dims.w, limit = g.dims.h;
      break;
    case SliceAxis::Sagittal:
      rows = g.dims.d, cols = g.dims.h, limit = g.dims.w;
      break;
  }
  if (index >= limit) throw ShapeError("slice index " + std::to_string(index) + " out of bounds (" + std::to_string(limit) + ")");
  const std::string head = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  out.reserve(head.size() + rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      float v = 0;
      switch (axis) {
        case SliceAxis::Axial:
          v = g.at(index, r, c);
          break;
        case SliceAxis::Coronal:
          v = g.at(r, index, c);
          break;
        case SliceAxis::Sagittal:
          v = g.at(r, c, index);
          break;
      }
      const double t = std::clamp((static_cast<double>(v) - lo) / (hi - lo), 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * t)));
    }
  return out;
}

void export_slice_pgm(const Grid<float>& g, SliceAxis axis, std::size_t index, double lo, double hi,
                      const std::filesystem::path& path) {
  write_file_bytes(path, render_slice_pgm(g, axis, index, lo, hi));
}

}  // namespace upmad
