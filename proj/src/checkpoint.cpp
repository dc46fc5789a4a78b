#include "upmad/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "upmad/volume_io.hpp"

namespace upmad {

namespace {

constexpr char kMagic[4] = {'S', 'G', '3', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint64_t v) {
  if (v > 0xFFFFFFFFull) throw ShapeError("checkpoint field exceeds 32 bits");
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw TruncatedError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedArray> arrays) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, arrays.size());
  for (const auto& a : arrays) {
    if (shape_numel(a.shape) != a.values.size()) throw ShapeError("checkpoint entry " + a.name + ": size mismatch");
    put_u32(out, a.name.size());
    out.insert(out.end(), a.name.begin(), a.name.end());
    put_u32(out, a.shape.size());
    for (auto e : a.shape) put_u32(out, e);
  }
  for (const auto& a : arrays) {
    for (float f : a.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

std::vector<NamedArray> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an SG3P checkpoint");
  Reader r(bytes.subspan(4));
  if (const auto v = r.u32(); v != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(v));
  std::vector<NamedArray> out(r.u32());
  for (auto& a : out) {
    a.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 5) throw FormatError("checkpoint entry " + a.name + ": bad rank");
    for (std::uint32_t i = 0; i < rank; ++i) a.shape.push_back(r.u32());
  }
  for (auto& a : out) {
    a.values.resize(shape_numel(a.shape));
    for (float& f : a.values) f = std::bit_cast<float>(r.u32());
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return out;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedArray> arrays) {
  write_file_bytes(path, encode_checkpoint(arrays));
}

std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

template <typename T>
std::vector<NamedArray> snapshot(const Network<T>& net) {
  std::vector<NamedArray> out;
  for (const auto& p : net.params()) {
    const auto d = p.value.data();
    out.push_back({p.name, p.value.shape(), std::vector<float>(d.begin(), d.end())});
  }
  return out;
}

template <typename T>
void restore(Network<T>& net, std::span<const NamedArray> arrays) {
  auto& params = net.params();
  if (params.size() != arrays.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(arrays.size()) + " arrays, network has " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    if (params[i].name != arrays[i].name || params[i].value.shape() != arrays[i].shape) {
      throw ShapeError("checkpoint entry " + arrays[i].name + " " + shape_str(arrays[i].shape) + " does not match " +
                       params[i].name + " " + shape_str(params[i].value.shape()));
    }
  }
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    auto dst = params[i].value.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(arrays[i].values[j]);
  }
}

template std::vector<NamedArray> snapshot(const Network<float>&);
template std::vector<NamedArray> snapshot(const Network<double>&);
template void restore(Network<float>&, std::span<const NamedArray>);
template void restore(Network<double>&, std::span<const NamedArray>);

}  // namespace upmad
