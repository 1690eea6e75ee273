#pragma once

// Binary tensor records and named-tensor checkpoints.
//
// Tensor record (little-endian):
//   "SCSCT4"  6 bytes
//   n c h w   4 x u32
//   values    n*c*h*w x f64 (IEEE-754 bit pattern)
//
// Checkpoint:
//   "SCSC-CHECKPOINT 1\n"
//   "<count>\n"
//   count lines "<name> <n> <c> <h> <w>\n"   (manifest, fixed order)
//   count tensor records in manifest order

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "scsc/tensor.hpp"

namespace scsc {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kTensorMagic = "SCSCT4";
inline constexpr std::string_view kCheckpointHeader = "SCSC-CHECKPOINT 1";

namespace detail {

template <class U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(bytes.data(), bytes.size());
}

template <class U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw FormatError("tensor record truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& out, const Tensor4& t) {
  out.write(kTensorMagic.data(), static_cast<std::streamsize>(kTensorMagic.size()));
  const Shape s = t.shape();
  for (std::size_t d : {s.n, s.c, s.h, s.w}) {
    if (d > UINT32_MAX) throw FormatError("tensor extent exceeds u32");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (double v : t.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

inline Tensor4 read_tensor(std::istream& in) {
  std::array<char, kTensorMagic.size()> magic{};
  in.read(magic.data(), magic.size());
  if (!in || std::string_view(magic.data(), magic.size()) != kTensorMagic) {
    throw FormatError("not a tensor record (bad magic)");
  }
  Shape s;
  s.n = detail::get_le<std::uint32_t>(in);
  s.c = detail::get_le<std::uint32_t>(in);
  s.h = detail::get_le<std::uint32_t>(in);
  s.w = detail::get_le<std::uint32_t>(in);
  if (s.size() == 0) throw FormatError("tensor record has a zero extent");
  std::vector<double> data(s.size());
  for (double& v : data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(in));
  return Tensor4(s, std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor4& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_tensor(out, t);
}

inline Tensor4 load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_tensor(in);
}

inline void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out << kCheckpointHeader << '\n' << tensors.size() << '\n';
  for (const auto& t : tensors) {
    if (t.name.empty() || t.name.find_first_of(" \t\n") != std::string::npos) {
      throw FormatError("checkpoint names must be non-empty without whitespace: '" + t.name + "'");
    }
    const Shape s = t.value.shape();
    out << t.name << ' ' << s.n << ' ' << s.c << ' ' << s.h << ' ' << s.w << '\n';
  }
  for (const auto& t : tensors) write_tensor(out, t.value);
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointHeader) throw FormatError("not a checkpoint (bad header)");
  if (!std::getline(in, line)) throw FormatError("checkpoint truncated");
  std::size_t count = 0;
  try {
    count = std::stoul(line);
  } catch (const std::exception&) {
    throw FormatError("checkpoint count is not a number: '" + line + "'");
  }
  std::vector<NamedTensor> tensors(count);
  for (auto& t : tensors) {
    if (!std::getline(in, line)) throw FormatError("checkpoint manifest truncated");
    std::istringstream row(line);
    Shape s;
    if (!(row >> t.name >> s.n >> s.c >> s.h >> s.w)) throw FormatError("bad manifest row: '" + line + "'");
    t.value = Tensor4(s);
  }
  for (auto& t : tensors) {
    Tensor4 v = read_tensor(in);
    if (v.shape() != t.value.shape()) {
      throw FormatError("checkpoint tensor '" + t.name + "' has shape " + v.shape().str() +
                        " but manifest says " + t.value.shape().str());
    }
    t.value = std::move(v);
  }
  return tensors;
}

}  // namespace scsc
