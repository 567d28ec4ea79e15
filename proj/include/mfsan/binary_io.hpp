#pragma once

// Little-endian primitives for the checkpoint container.

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "mfsan/autodiff.hpp"

namespace mfsan {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  void u8(std::uint8_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void bytes(const std::string& s);  // length-prefixed
  void raw(const std::string& s);    // no prefix
  void tensor(const Tensor& t);

 private:
  std::ostream& os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is) : is_(is) {}

  std::uint8_t u8();
  std::uint64_t u64();
  double f64();
  std::string bytes(std::uint64_t max_len = 1u << 20);
  std::string raw(std::size_t n);
  Tensor tensor();

 private:
  std::istream& is_;
};

}  // namespace mfsan
