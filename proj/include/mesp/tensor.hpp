#pragma once
// Dense row-major tensors. No views, no strides, no implicit broadcasting:
// every operation materializes a fresh buffer so the memory ledger can
// account for each allocation exactly. Tensors carry a process-unique id;
// the ledger tracks lifecycles by that id.

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mesp/rng.hpp"

namespace mesp {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw std::invalid_argument("tensor: negative extent in " + shape_str(s));
    n *= d;
  }
  return n;
}

inline int64_t next_tensor_id() {
  static std::atomic<int64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(static_cast<size_t>(shape_numel(shape_)), T(0)),
        id_(next_tensor_id()) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)), id_(next_tensor_id()) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw std::invalid_argument("tensor: data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.data_) x = v;
    return t;
  }

  static Tensor gaussian(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (T& x : t.data_) x = static_cast<T>(rng.gauss() * stddev);
    return t;
  }

  // Copies are fresh allocations and get fresh ids; moves keep identity.
  Tensor(const Tensor& other)
      : shape_(other.shape_), data_(other.data_), id_(other.empty() ? 0 : next_tensor_id()) {}
  Tensor& operator=(const Tensor& other) {
    if (this != &other) {
      shape_ = other.shape_;
      data_ = other.data_;
      id_ = other.empty() ? 0 : next_tensor_id();
    }
    return *this;
  }
  Tensor(Tensor&&) noexcept = default;
  Tensor& operator=(Tensor&&) noexcept = default;

  bool empty() const { return data_.empty() && shape_.empty(); }
  int64_t id() const { return id_; }
  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t bytes() const { return numel() * static_cast<int64_t>(sizeof(T)); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
  T& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  const T& at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  T& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  const T& at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  T& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  // Drop the payload but keep the id valid for ledger bookkeeping done
  // before the call. Used when a buffer is semantically dead.
  void clear() {
    data_.clear();
    data_.shrink_to_fit();
    shape_.clear();
  }

 private:
  Shape shape_;
  std::vector<T> data_;
  int64_t id_ = 0;
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace mesp
