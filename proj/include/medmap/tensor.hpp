#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "medmap/common.hpp"

namespace medmap {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor (last axis fastest). Voxel grids use [D, H, W] with
// W fastest, matching the MVOL payload order.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), real(0)) {}
    Tensor(Shape shape, std::vector<real> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, real v);
    static Tensor of(std::initializer_list<real> v);  // 1-D

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    std::vector<real>& vec() { return data_; }
    const std::vector<real>& vec() const { return data_; }

    real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    Tensor reshaped(Shape s) const;

    void fill(real v);
    bool all_finite() const;
    real min() const;
    real max() const;
    real sum() const;
    real l2_norm() const;

  private:
    Shape shape_;
    std::vector<real> data_;
};

}  // namespace medmap
