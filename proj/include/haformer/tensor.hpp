#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace haformer {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) {
    require(e > 0, "tensor extent must be positive, got " + shape_str(s));
    n *= e;
  }
  return n;
}

// Dense row-major tensor. Storage is always contiguous; ops copy rather than view.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), S(0)) {}

  TensorT(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_),
            "data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

  static TensorT full(Shape shape, S v) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static TensorT scalar(S v) { return TensorT({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Multi-index access, rank checked. Row-major.
  template <typename... Ix>
  S& at(Ix... ix) {
    return data_[static_cast<size_t>(offset_of(ix...))];
  }
  template <typename... Ix>
  const S& at(Ix... ix) const {
    return data_[static_cast<size_t>(offset_of(ix...))];
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  template <typename T>
  TensorT<T> cast() const {
    std::vector<T> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return TensorT<T>(shape_, std::move(out));
  }

 private:
  template <typename... Ix>
  std::int64_t offset_of(Ix... ix) const {
    constexpr int n = sizeof...(Ix);
    require(n == rank(), "index rank " + std::to_string(n) + " does not match tensor rank " +
                             std::to_string(rank()));
    const std::int64_t idx[n] = {static_cast<std::int64_t>(ix)...};
    std::int64_t off = 0;
    for (int a = 0; a < n; ++a) off = off * shape_[static_cast<size_t>(a)] + idx[a];
    return off;
  }

  Shape shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

}  // namespace haformer
