#include "mfsan/binary_io.hpp"

#include <bit>
#include <limits>

namespace mfsan {

void BinaryWriter::u8(std::uint8_t v) { os_.put(static_cast<char>(v)); }

void BinaryWriter::u64(std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os_.write(buf, 8);
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::bytes(const std::string& s) {
  u64(s.size());
  raw(s);
}

void BinaryWriter::raw(const std::string& s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }

void BinaryWriter::tensor(const Tensor& t) {
  u64(t.rank());
  for (std::size_t d : t.shape()) u64(d);
  for (double v : t.values()) f64(v);
}

std::uint8_t BinaryReader::u8() {
  const int c = is_.get();
  if (c == std::char_traits<char>::eof()) throw CheckpointError("checkpoint truncated");
  return static_cast<std::uint8_t>(c);
}

std::uint64_t BinaryReader::u64() {
  unsigned char buf[8];
  if (!is_.read(reinterpret_cast<char*>(buf), 8)) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::bytes(std::uint64_t max_len) {
  const std::uint64_t n = u64();
  if (n > max_len) throw CheckpointError("checkpoint field length out of range");
  return raw(static_cast<std::size_t>(n));
}

std::string BinaryReader::raw(std::size_t n) {
  std::string s(n, '\0');
  if (n && !is_.read(s.data(), static_cast<std::streamsize>(n)))
    throw CheckpointError("checkpoint truncated");
  return s;
}

Tensor BinaryReader::tensor() {
  const std::uint64_t rank = u64();
  if (rank > 8) throw CheckpointError("checkpoint tensor rank out of range");
  Shape shape;
  std::uint64_t total = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    const std::uint64_t d = u64();
    if (d > (1u << 26) || total * std::max<std::uint64_t>(d, 1) > (1u << 28))
      throw CheckpointError("checkpoint tensor too large");
    shape.push_back(static_cast<std::size_t>(d));
    total *= d;
  }
  std::vector<double> values(static_cast<std::size_t>(total));
  for (double& v : values) v = f64();
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace mfsan
