#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "phoenix/errors.hpp"

namespace phoenix {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

// Dense row-major tensor. The library stores everything in float; the double
// instantiation exists for high-precision gradient checking of the same kernels.
template <typename T>
class BasicTensor {
   public:
    using value_type = T;

    BasicTensor() : shape_{1}, data_(1, T{0}) {}

    explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(shape_size(shape_), fill);
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (data_.size() != shape_size(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, std::vector<T>{value}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        }
        return data_[0];
    }

    BasicTensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return BasicTensor(std::move(shape), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

   private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("tensor dimension of size 0 in " + shape_string(shape));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename T>
using BasicTensorMap = std::map<std::string, BasicTensor<T>>;
using TensorMap = BasicTensorMap<float>;

// Equal shapes and identical bit patterns.
template <typename T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

inline bool bitwise_equal(const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) return false;
    for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first || !bitwise_equal(ia->second, ib->second)) return false;
    }
    return true;
}

template <typename U, typename T>
BasicTensorMap<U> cast_map(const BasicTensorMap<T>& in) {
    BasicTensorMap<U> out;
    for (const auto& [name, t] : in) out.emplace(name, t.template cast<U>());
    return out;
}

}  // namespace phoenix
