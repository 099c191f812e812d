#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace casd {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated calling contract (non-scalar backward, missing positive class, ...).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Corrupt or missing on-disk data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

// Cache-line aligned storage. Vectorized reductions peel a head whose length
// depends on the buffer address, so a fixed alignment keeps float sums
// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};
std::string shape_str(const Shape& shape);

/// Dense row-major array. Value semantics; gradients live in the autodiff
/// graph, not here.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Multi-index access, row-major. Bounds are not checked.
  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset(idx...)];
  }

  T item() const;
  Tensor reshaped(Shape shape) const;
  void fill(T v);
  bool all_finite() const;

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * shape_[i] + ids[i];
    return off;
  }

  Shape shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

// TNSR file format: "TNSR1", u32 rank, rank x u32 dims, f32 data (all LE).
void write_tnsr(std::ostream& os, const Tensor<float>& t);
Tensor<float> read_tnsr(std::istream& is);
void save_tnsr(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> load_tnsr(const std::filesystem::path& path);

}  // namespace casd
