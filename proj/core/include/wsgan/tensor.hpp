#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "wsgan/common.hpp"

namespace wsgan {

using Scalar = double;
using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor of doubles. Copies are shallow (shared storage);
/// use clone() for a deep copy. Write-once discipline: ops allocate fresh
/// tensors, so sharing is safe in practice.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, Scalar fill);
    Tensor(Shape shape, std::vector<Scalar> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return size_; }

    Scalar* data() { return data_->data(); }
    const Scalar* data() const { return data_->data(); }
    Scalar& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    Scalar operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    /// Deep copy.
    Tensor clone() const;
    /// Same storage, new shape (numel must match).
    Tensor reshaped(Shape shape) const;

    void fill(Scalar v);
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    /// Strict elementwise equality (== on doubles).
    static bool equal(const Tensor& a, const Tensor& b);
    static double max_abs_diff(const Tensor& a, const Tensor& b);

private:
    Shape shape_;
    int64_t size_ = 0;
    std::shared_ptr<std::vector<Scalar>> data_;
};

}  // namespace wsgan
