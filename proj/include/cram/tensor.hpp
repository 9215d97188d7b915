#pragma once
// Dense row-major tensors with value semantics, plus the ".tns" binary
// format (magic "TNS1", u8 dtype, u32 LE rank, u32 LE dims, raw LE data).
//
// A Tensor never mutates its element storage after construction; operations
// in ops.hpp/nn.hpp allocate fresh outputs. The optional node id links a
// value to the tape that produced it (tape.hpp).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cram/common.hpp"
#include "cram/rng.hpp"

namespace cram {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename S>
class Tensor {
  static_assert(std::is_floating_point_v<S>, "Tensor requires float/double");

 public:
  Tensor() : shape_{0}, data_(std::make_shared<const std::vector<S>>()) {}

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<S>>(std::move(data))) {
    if (numel(shape_) != data_->size())
      throw ShapeError(strformat("tensor shape %s does not hold %zu elements",
                                 shape_str(shape_).c_str(), data_->size()));
  }

  static Tensor zeros(Shape shape) {
    std::vector<S> d(numel(shape), S(0));
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, S value) {
    std::vector<S> d(numel(shape), value);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  static Tensor uniform(Shape shape, Rng& rng, S lo, S hi) {
    std::vector<S> d(numel(shape));
    for (auto& v : d) v = static_cast<S>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(d));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_->size(); }
  const S* data() const { return data_->data(); }
  const std::vector<S>& vec() const { return *data_; }
  S operator[](std::size_t i) const { return (*data_)[i]; }

  S item() const {
    if (size() != 1)
      throw UsageError(strformat("item() on tensor of %zu elements", size()));
    return (*data_)[0];
  }

  // Tape-node identifier; -1 marks a constant outside any graph.
  int node() const { return node_; }
  bool requires_grad() const { return node_ >= 0; }

  Tensor with_node(int node) const {
    Tensor t = *this;
    t.node_ = node;
    return t;
  }

  // Shares storage, drops the graph link.
  Tensor constant() const { return with_node(-1); }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw ShapeError(strformat("cannot reshape %s to %s",
                                 shape_str(shape_).c_str(),
                                 shape_str(shape).c_str()));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_data(const Tensor& other) const { return data_ == other.data_; }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<S>> data_;
  int node_ = -1;
};

// ---------------------------------------------------------------------------
// .tns serialization

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw FormatError(strformat("unexpected EOF reading %s at offset %lld",
                                what, static_cast<long long>(in.tellg())));
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

template <typename S>
constexpr std::uint8_t tns_dtype() {
  return std::is_same_v<S, float> ? 1 : 2;
}

}  // namespace detail

template <typename S>
void write_tns(std::ostream& out, const Tensor<S>& t) {
  out.write("TNS1", 4);
  const std::uint8_t dtype = detail::tns_dtype<S>();
  out.write(reinterpret_cast<const char*>(&dtype), 1);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i)
    detail::put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  if constexpr (std::is_same_v<S, float>) {
    for (std::size_t i = 0; i < t.size(); ++i)
      detail::put_u32(out, std::bit_cast<std::uint32_t>(t[i]));
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::uint64_t v = std::bit_cast<std::uint64_t>(t[i]);
      detail::put_u32(out, static_cast<std::uint32_t>(v));
      detail::put_u32(out, static_cast<std::uint32_t>(v >> 32));
    }
  }
  if (!out) throw IoError("write failure while serializing tensor");
}

template <typename S>
Tensor<S> read_tns(std::istream& in) {
  const auto start = in.tellg();
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "TNS1", 4) != 0)
    throw FormatError(strformat("bad tensor magic at offset %lld",
                                static_cast<long long>(start)));
  std::uint8_t dtype = 0;
  if (!in.read(reinterpret_cast<char*>(&dtype), 1))
    throw FormatError("unexpected EOF reading dtype");
  if (dtype != detail::tns_dtype<S>())
    throw FormatError(strformat("tensor dtype code %u does not match element "
                                "type (expected %u)",
                                dtype, detail::tns_dtype<S>()));
  const std::uint32_t rank = detail::get_u32(in, "rank");
  if (rank > 8) throw FormatError(strformat("implausible tensor rank %u", rank));
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_u32(in, "dim");
  std::vector<S> data(numel(shape));
  if constexpr (std::is_same_v<S, float>) {
    for (auto& v : data) v = std::bit_cast<float>(detail::get_u32(in, "data"));
  } else {
    for (auto& v : data) {
      const std::uint64_t lo = detail::get_u32(in, "data");
      const std::uint64_t hi = detail::get_u32(in, "data");
      v = std::bit_cast<double>(lo | (hi << 32));
    }
  }
  return Tensor<S>(std::move(shape), std::move(data));
}

template <typename S>
void save_tns(const std::string& path, const Tensor<S>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_tns(out, t);
}

template <typename S>
Tensor<S> load_tns(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  return read_tns<S>(in);
}

// Round-trips a tensor through an in-memory stream (test helper).
template <typename S>
Tensor<S> tns_roundtrip(const Tensor<S>& t) {
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_tns(ss, t);
  return read_tns<S>(ss);
}

}  // namespace cram
