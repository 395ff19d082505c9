#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vtgrasp/error.hpp"
#include "vtgrasp/rng.hpp"

namespace vtgrasp {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major single-precision array.
//
// A default-constructed Tensor is the null tensor (rank 0, no data) and is
// only used as a "not yet allocated" placeholder. Every constructed tensor has
// rank >= 1, all extents >= 1 and product(shape) == size().
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_product(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_product(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  // Row-major 2-D literal, mostly for tests: Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
  }

  static Tensor normal(Shape shape, Rng& rng, float stddev) {
    Tensor t(std::move(shape));
    for (float& v : t.data_) v = static_cast<float>(rng.normal() * stddev);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, float lo, float hi) {
    Tensor t(std::move(shape));
    for (float& v : t.data_) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
  }

  bool empty() const noexcept { return shape_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Contiguous view of row i of a 2-D tensor.
  std::span<float> row(std::size_t i) { return {data_.data() + i * shape_[1], shape_[1]}; }
  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * shape_[1], shape_[1]};
  }

  Tensor reshaped(Shape shape) const {
    if (shape_product(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(float s) {
    for (float& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw DimensionError(std::string(what) + ": shape " + shape_str(shape_) + " vs " +
                           shape_str(other.shape_));
    }
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) {
  a += b;
  return a;
}

// Same shape and same bit patterns (distinguishes -0.0 from 0.0, NaN payloads).
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return a.size() == 0 || std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(float)) == 0;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "max_abs_diff");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor transpose(const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(m.shape()));
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t.at(j, i) = m.at(i, j);
  return t;
}

// ---------------------------------------------------------------------------
// Binary format: "VTSF1\0", u32 LE rank, rank x u32 LE dims, f32 LE payload.

inline constexpr std::array<char, 6> kTensorMagic = {'V', 'T', 'S', 'F', '1', '\0'};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated tensor stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.empty()) throw IoError("cannot serialize a null tensor");
  out.write(kTensorMagic.data(), kTensorMagic.size());
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  std::vector<char> payload(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) payload[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("failed writing tensor");
}

inline Tensor read_tensor(std::istream& in) {
  std::array<char, 6> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kTensorMagic) {
    throw IoError("bad tensor magic (expected VTSF1)");
  }
  const std::uint32_t rank = detail::get_u32(in);
  if (rank == 0 || rank > 16) throw IoError("unsupported tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::get_u32(in);
    if (d == 0) throw IoError("zero extent in tensor header");
  }
  const std::size_t n = shape_product(shape);
  std::vector<unsigned char> payload(n * 4);
  if (!in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()))) {
    throw IoError("truncated tensor payload");
  }
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(payload[i * 4]) |
                               (static_cast<std::uint32_t>(payload[i * 4 + 1]) << 8) |
                               (static_cast<std::uint32_t>(payload[i * 4 + 2]) << 16) |
                               (static_cast<std::uint32_t>(payload[i * 4 + 3]) << 24);
    data[i] = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

// Named-tensor table used for checkpoints: u32 LE count, then per entry a
// u32 LE name length, the UTF-8 name, and one VTSF1 tensor record.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_named_tensors(std::ostream& out, const NamedTensors& table) {
  detail::put_u32(out, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, t);
  }
  if (!out) throw IoError("failed writing tensor table");
}

inline NamedTensors read_named_tensors(std::istream& in) {
  const std::uint32_t count = detail::get_u32(in);
  NamedTensors table;
  table.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::get_u32(in);
    if (len > 4096) throw IoError("tensor name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw IoError("truncated tensor name");
    table.emplace_back(std::move(name), read_tensor(in));
  }
  return table;
}

}  // namespace vtgrasp
