#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scalearn/common.hpp"

namespace scalearn {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. A Tensor is a cheap handle onto a shared node, so
// const-ness is shallow (as with shared_ptr): copies alias the same storage
// and grad slot. Treat a tensor as immutable once handed to another thread.
// The grad buffer is allocated lazily and always matches data in size.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(shape_numel(t.impl_->shape), T(0));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        for (T& v : t.impl_->data) v = value;
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        return t;
    }

    static Tensor scalar(T value) { return from({1}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    size_t numel() const { return impl_->data.size(); }
    size_t dim() const { return impl_->shape.size(); }
    size_t rows() const { return impl_->shape.at(0); }
    size_t cols() const { return impl_->shape.at(1); }

    T* ptr() const { return impl_->data.data(); }
    std::vector<T>& vec() const { return impl_->data; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    T& at(size_t i) const { return impl_->data[i]; }
    T& at(size_t r, size_t c) const { return impl_->data[r * cols() + c]; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    const Tensor& set_requires_grad(bool v) const {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::vector<T>& grad() const { return impl_->grad; }

    std::vector<T>& ensure_grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }

    void zero_grad() const {
        if (impl_) impl_->grad.clear();
    }

    // Deep copy of values; grad is not copied, requires_grad is preserved.
    Tensor clone() const {
        Tensor t = from(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    void copy_values_from(const Tensor& other) const {
        if (other.numel() != numel()) {
            throw ShapeError("copy_values_from: size mismatch " + shape_str(shape()) + " vs " +
                             shape_str(other.shape()));
        }
        impl_->data = other.impl_->data;
    }

    // Stable identity of the underlying node, for graph bookkeeping.
    const void* id() const { return impl_.get(); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(impl_->data.begin(), impl_->data.end());
        Tensor<U> t = Tensor<U>::from(impl_->shape, std::move(out));
        t.set_requires_grad(impl_->requires_grad);
        return t;
    }

    bool all_finite() const {
        for (T v : impl_->data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

private:
    struct Impl {
        Shape shape;
        mutable std::vector<T> data;
        mutable std::vector<T> grad;  // empty until first accumulation
        bool requires_grad = false;
    };

    std::shared_ptr<Impl> impl_;
};

template <typename T>
void check_finite(const Tensor<T>& t, const char* where) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite values produced by ") + where);
}

}  // namespace scalearn
