#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <string>
#include <vector>

#include "spritz/errors.hpp"

namespace spritz::nn {

int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

/// Allocator pinning every buffer to a 64-byte boundary. Vectorized
/// reductions pick their loop peeling from the pointer phase; with a
/// run-dependent heap layout that would make summation order (and so
/// the low bits of results) differ between otherwise identical runs.
/// A fixed alignment makes the phase a function of shape alone.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
  template <class U>
  bool operator!=(const AlignedAlloc<U>&) const {
    return false;
  }
};

using dvec = std::vector<double, AlignedAlloc<double>>;

/// Dense row-major tensor of doubles. Where a batch is meaningful the
/// first dimension is the batch dimension, e.g. images are {N, C, H, W}
/// and feature vectors {N, F}. All arithmetic in the library is double
/// precision.
struct Tensor {
  std::vector<int> shape;
  dvec data;

  Tensor() = default;

  static Tensor zeros(const std::vector<int>& shape);
  static Tensor from(const std::vector<int>& shape, std::vector<double> values);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  void fill(double v);
  /// Resizes to `shape` and zero-fills. Keeps capacity across calls.
  void reset(const std::vector<int>& shape);
  /// Resizes without the zero-fill; only for buffers that are fully
  /// overwritten immediately afterwards.
  void resize_nofill(const std::vector<int>& shape);
};

/// Throws ShapeError unless `t` has exactly the given shape.
void require_shape(const Tensor& t, const std::vector<int>& shape,
                   const std::string& who);

bool all_finite(const Tensor& t);

}  // namespace spritz::nn
