#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <istream>
#include <memory>
#include <ostream>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/rng.hpp"

namespace moelab {

static_assert(std::endian::native == std::endian::little,
              "tensor dumps assume a little-endian host");

// Dense row-major array of Real with an optional same-shape gradient
// accumulator. Handle type: copies share the underlying storage, so a tensor
// captured by a backward closure sees later in-place edits (this is what the
// finite-difference harness relies on).
template <class Real>
class Tensor {
 public:
  Tensor() : s_(std::make_shared<Storage>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    std::size_t n = shape_numel(shape);
    t.s_->shape = std::move(shape);
    t.s_->values.assign(n, Real(0));
    t.s_->requires_grad = requires_grad;
    if (requires_grad) t.s_->grad.assign(n, Real(0));
    return t;
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.s_->values.begin(), t.s_->values.end(), value);
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<Real> values,
                            bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw ShapeError("from_values: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    Tensor t;
    t.s_->shape = std::move(shape);
    t.s_->values = std::move(values);
    t.s_->requires_grad = requires_grad;
    if (requires_grad) t.s_->grad.assign(t.s_->values.size(), Real(0));
    return t;
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return from_values({}, {value}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (Real& v : t.s_->values) v = static_cast<Real>(rng.normal() * stddev);
    return t;
  }

  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return s_->values.size(); }
  bool requires_grad() const { return s_->requires_grad; }

  Real* data() { return s_->values.data(); }
  const Real* data() const { return s_->values.data(); }
  std::vector<Real>& values() { return s_->values; }
  const std::vector<Real>& values() const { return s_->values; }

  Real* grad() { return s_->requires_grad ? s_->grad.data() : nullptr; }
  const Real* grad() const {
    return s_->requires_grad ? s_->grad.data() : nullptr;
  }

  void zero_grad() {
    std::fill(s_->grad.begin(), s_->grad.end(), Real(0));
  }

  // Detached deep copy (fresh storage, grad reset to zero).
  Tensor clone() const {
    Tensor t = zeros(s_->shape, s_->requires_grad);
    t.s_->values = s_->values;
    return t;
  }

  Real item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor of shape " + shape_str(s_->shape) +
                       " is not a scalar");
    return s_->values[0];
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

// ---------------------------------------------------------------------------
// Binary dump format, little-endian throughout:
//   bytes  0..15   magic "MOELAB.TENSOR.1\0"
//   u32            rank
//   u64 * rank     extents
//   u32            dtype tag (1 = float32, 2 = float64)
//   raw            numel * sizeof(Real) values
// Gradients are not serialized.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 16> kTensorMagic = {
    'M', 'O', 'E', 'L', 'A', 'B', '.', 'T',
    'E', 'N', 'S', 'O', 'R', '.', '1', '\0'};

template <class Real>
constexpr std::uint32_t dtype_tag() {
  if constexpr (std::is_same_v<Real, float>) return 1;
  else return 2;
}

namespace detail {
template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("tensor read: truncated stream");
  return v;
}
}  // namespace detail

template <class Real>
void write_tensor(std::ostream& out, const Tensor<Real>& t) {
  out.write(kTensorMagic.data(), kTensorMagic.size());
  detail::write_pod(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape())
    detail::write_pod(out, static_cast<std::uint64_t>(d));
  detail::write_pod(out, dtype_tag<Real>());
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(Real)));
  if (!out) throw IoError("tensor write failed");
}

template <class Real>
Tensor<Real> read_tensor(std::istream& in) {
  std::array<char, 16> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kTensorMagic)
    throw IoError("tensor read: bad magic header");
  auto rank = detail::read_pod<std::uint32_t>(in);
  Shape shape(rank);
  for (auto& d : shape)
    d = static_cast<int>(detail::read_pod<std::uint64_t>(in));
  auto tag = detail::read_pod<std::uint32_t>(in);
  if (tag != dtype_tag<Real>())
    throw IoError("tensor read: dtype tag " + std::to_string(tag) +
                  " does not match requested element type");
  std::vector<Real> values(shape_numel(shape));
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(Real)));
  if (!in) throw IoError("tensor read: truncated values");
  return Tensor<Real>::from_values(std::move(shape), std::move(values));
}

}  // namespace moelab
