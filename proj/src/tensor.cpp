#include "medmap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace medmap {

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw ValidationError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
        throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(Shape shape, real v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

Tensor Tensor::of(std::initializer_list<real> v) {
    return Tensor({static_cast<int>(v.size())}, std::vector<real>(v));
}

Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != size())
        throw ValidationError("reshape " + shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
}

void Tensor::fill(real v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    for (real v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

real Tensor::min() const {
    real m = std::numeric_limits<real>::infinity();
    for (real v : data_) m = std::min(m, v);
    return m;
}

real Tensor::max() const {
    real m = -std::numeric_limits<real>::infinity();
    for (real v : data_) m = std::max(m, v);
    return m;
}

real Tensor::sum() const {
    real s = 0;
    for (real v : data_) s += v;
    return s;
}

real Tensor::l2_norm() const {
    real s = 0;
    for (real v : data_) s += v * v;
    return std::sqrt(s);
}

}  // namespace medmap
