#pragma once

#include <cstring>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <memory>
#include <ostream>
#include <span>

#include "flowdet/common.hpp"

namespace flowdet {

enum class DType : uint8_t { f32 = 0, f64 = 1 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

namespace detail {

template <typename T>
struct Storage {
  std::vector<T> data;
  std::vector<T> grad;       // allocated lazily, same length as data
  uint64_t grad_epoch = 0;   // graph epoch the grad buffer was zeroed for
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major tensor. Copies are shallow: they alias the same storage,
// which is treated as immutable once written by its producing op. The grad
// buffer is the one mutable side channel, owned by the autodiff pass.
template <typename T>
class Tensor {
public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.init(std::move(shape));
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t;
    t.init(std::move(shape));
    std::fill(t.st_->data.begin(), t.st_->data.end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from(std::vector<T> values, Shape shape) {
    if (int64_t(values.size()) != numel_of(shape))
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                       " values cannot fill shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->data = std::move(values);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.st_->data) v = T(rng.normal() * scale);
    return t;
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.st_->data) v = T(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t rank() const { return int64_t(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[size_t(i)]; }
  int64_t numel() const { return int64_t(st_ ? st_->data.size() : 0); }
  static constexpr DType dtype() { return dtype_of<T>::value; }

  std::span<const T> data() const { return {st_->data.data(), st_->data.size()}; }
  std::span<T> mutable_data() { return {st_->data.data(), st_->data.size()}; }

  T item() const {
    if (numel() != 1)
      throw ValueError("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return st_->data[0];
  }

  const T& operator[](int64_t i) const { return st_->data[size_t(i)]; }
  T& operator[](int64_t i) { return st_->data[size_t(i)]; }

  // multi-index access, row-major
  T at(std::initializer_list<int64_t> idx) const {
    return st_->data[size_t(flat_index(idx))];
  }

  int64_t flat_index(std::initializer_list<int64_t> idx) const {
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t v : idx) {
      flat = flat * shape_[i] + v;
      ++i;
    }
    return flat;
  }

  // View with a different shape; shares storage (and therefore grad).
  Tensor reshape(Shape new_shape) const {
    if (numel_of(new_shape) != numel())
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " +
                       shape_str(new_shape));
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->data = st_->data;
    t.st_->requires_grad = st_->requires_grad;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(st_->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = U(st_->data[i]);
    return Tensor<U>::from(std::move(out), shape_);
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true) {
    st_->requires_grad = flag;
    return *this;
  }

  // Gradient as a tensor copy (empty-shaped zeros if never touched).
  Tensor grad() const {
    Tensor g = zeros(shape_);
    if (st_ && st_->grad.size() == st_->data.size())
      std::copy(st_->grad.begin(), st_->grad.end(), g.st_->data.begin());
    return g;
  }

  detail::Storage<T>* storage() const { return st_.get(); }
  const std::shared_ptr<detail::Storage<T>>& storage_ptr() const { return st_; }

  std::span<T> grad_span() const { return {st_->grad.data(), st_->grad.size()}; }

  bool all_finite() const {
    for (const T& v : st_->data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

private:
  void init(Shape shape) {
    shape_ = std::move(shape);
    for (int64_t d : shape_)
      if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape_));
    st_ = std::make_shared<detail::Storage<T>>();
    st_->data.assign(size_t(numel_of(shape_)), T(0));
  }

  Shape shape_;
  std::shared_ptr<detail::Storage<T>> st_;
};

// --- flat binary dump ------------------------------------------------------
// layout: 8-byte magic "FDTENSOR", u32 rank, u32 extents[rank], u8 dtype tag,
// raw little-endian elements.

inline constexpr char kTensorMagic[8] = {'F', 'D', 'T', 'E', 'N', 'S', 'O', 'R'};

template <typename T>
inline void save_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 8);
  uint32_t rank = uint32_t(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 4);
  for (int64_t d : t.shape()) {
    uint32_t e = uint32_t(d);
    os.write(reinterpret_cast<const char*>(&e), 4);
  }
  uint8_t tag = uint8_t(Tensor<T>::dtype());
  os.write(reinterpret_cast<const char*>(&tag), 1);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           std::streamsize(size_t(t.numel()) * sizeof(T)));
  if (!os) throw IoError("save_tensor: write failed");
}

template <typename T>
inline Tensor<T> load_tensor(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kTensorMagic, 8) != 0)
    throw IoError("load_tensor: bad magic");
  uint32_t rank = 0;
  is.read(reinterpret_cast<char*>(&rank), 4);
  if (!is || rank > 8) throw IoError("load_tensor: bad rank");
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t e = 0;
    is.read(reinterpret_cast<char*>(&e), 4);
    shape[i] = int64_t(e);
  }
  uint8_t tag = 0;
  is.read(reinterpret_cast<char*>(&tag), 1);
  if (!is) throw IoError("load_tensor: truncated header");
  if (tag != uint8_t(Tensor<T>::dtype()))
    throw IoError(std::string("load_tensor: dtype mismatch, file has ") +
                  dtype_name(DType(tag)) + ", expected " + dtype_name(Tensor<T>::dtype()));
  std::vector<T> data(static_cast<size_t>(numel_of(shape)));
  is.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(T)));
  if (!is) throw IoError("load_tensor: truncated payload");
  return Tensor<T>::from(std::move(data), std::move(shape));
}

template <typename T>
inline void save_tensor_file(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  save_tensor(os, t);
}

template <typename T>
inline Tensor<T> load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  return load_tensor<T>(is);
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return;
  if (a.rank() != b.rank())
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  for (int64_t i = 0; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError(std::string(op) + ": axis " + std::to_string(i) + " mismatch (" +
                       std::to_string(a.dim(i)) + " vs " + std::to_string(b.dim(i)) + ")");
}

}  // namespace flowdet
