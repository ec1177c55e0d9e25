#include "wsgan/tensor.hpp"

#include <cmath>
#include <sstream>

namespace wsgan {

namespace detail {
void fail_check(const char* expr, const std::string& msg) {
    throw ValidationError(msg + " (check failed: " + expr + ")");
}
}  // namespace detail

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        WSGAN_CHECK(d >= 0, "negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      size_(shape_numel(shape_)),
      data_(std::make_shared<std::vector<Scalar>>(static_cast<size_t>(size_), 0.0)) {}

Tensor::Tensor(Shape shape, Scalar fill)
    : shape_(std::move(shape)),
      size_(shape_numel(shape_)),
      data_(std::make_shared<std::vector<Scalar>>(static_cast<size_t>(size_), fill)) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> values)
    : shape_(std::move(shape)), size_(shape_numel(shape_)) {
    WSGAN_CHECK(static_cast<int64_t>(values.size()) == size_,
                "value count does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<Scalar>>(std::move(values));
}

Tensor Tensor::clone() const {
    if (!defined()) return Tensor();
    Tensor out;
    out.shape_ = shape_;
    out.size_ = size_;
    out.data_ = std::make_shared<std::vector<Scalar>>(*data_);
    return out;
}

Tensor Tensor::reshaped(Shape shape) const {
    WSGAN_CHECK(defined(), "reshape of undefined tensor");
    WSGAN_CHECK(shape_numel(shape) == size_,
                "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes numel");
    Tensor out;
    out.shape_ = std::move(shape);
    out.size_ = size_;
    out.data_ = data_;
    return out;
}

void Tensor::fill(Scalar v) {
    for (auto& x : *data_) x = v;
}

bool Tensor::all_finite() const {
    for (Scalar x : *data_)
        if (!std::isfinite(x)) return false;
    return true;
}

bool Tensor::equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

double Tensor::max_abs_diff(const Tensor& a, const Tensor& b) {
    WSGAN_CHECK(a.same_shape(b), "max_abs_diff shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace wsgan
