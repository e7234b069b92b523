#pragma once

// Minimal dense tensor: contiguous row-major storage plus a shape. Storage is
// shared (shared_ptr), so copies are cheap handles; use clone() for a deep
// copy. The autodiff tape treats node values as immutable once created, which
// is what makes the sharing safe.

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "camfit/common.hpp"

namespace camfit {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        CAMFIT_CHECK(d >= 0, ArgumentError, "negative dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(size_t(numel_of(shape_)), T(0))) {}

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
        CAMFIT_CHECK(int64_t(values.size()) == numel_of(shape_), ArgumentError,
                     "tensor init: value count does not match shape " + shape_str(shape_));
        data_ = std::make_shared<std::vector<T>>(std::move(values));
    }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : *t.data_) x = v;
        return t;
    }

    static Tensor scalar(T v) { return full({}, v); }  // 0-d, numel 1

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    size_t ndim() const { return shape_.size(); }
    int64_t dim(size_t i) const {
        CAMFIT_CHECK(i < shape_.size(), ArgumentError, "dim index out of range");
        return shape_[i];
    }
    int64_t numel() const { return data_ ? int64_t(data_->size()) : 0; }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    T& operator[](int64_t i) { return (*data_)[size_t(i)]; }
    const T& operator[](int64_t i) const { return (*data_)[size_t(i)]; }

    // NCHW / row-major convenience accessors.
    T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return (*data_)[size_t(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return (*data_)[size_t(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    T& at(int64_t r, int64_t c) { return (*data_)[size_t(r * shape_[1] + c)]; }
    const T& at(int64_t r, int64_t c) const { return (*data_)[size_t(r * shape_[1] + c)]; }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    // Same storage, new shape (numel must match). Used for [N,H,W] <-> [N,S].
    Tensor reshaped(Shape shape) const {
        CAMFIT_CHECK(numel_of(shape) == numel(), ArgumentError,
                     "reshape: numel mismatch " + shape_str(shape_) + " -> " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    bool shares_storage(const Tensor& o) const { return data_ == o.data_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(shape_);
        const T* src = data();
        U* dst = t.data();
        for (int64_t i = 0; i < numel(); ++i) dst[i] = U(src[i]);
        return t;
    }

    void fill(T v) {
        for (auto& x : *data_) x = v;
    }

  private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;

    template <typename U>
    friend class Tensor;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape();
}

}  // namespace camfit
