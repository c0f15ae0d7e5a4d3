#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "triage/error.hpp"

namespace triage {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major array. The scalar type is a template parameter so the same
// network code runs in float (training) and double (gradient checking).
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_shape();
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        require(data_.size() == shape_size(shape_), ErrorCode::ShapeMismatch,
                "tensor of shape " + shape_string(shape_) + " given " + std::to_string(data_.size()) +
                    " values");
    }

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return BasicTensor<U>(shape_, std::move(out));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // (c, y, x) indexing for rank-3 feature maps.
    T& at(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
    const T& at(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_shape() const {
        for (auto d : shape_)
            require(d > 0, ErrorCode::ShapeMismatch, "tensor dimensions must be positive, got " + shape_string(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

// Up-down mirror of a (C, H, W) image.
template <typename T>
BasicTensor<T> vflip(const BasicTensor<T>& image) {
    require(image.rank() == 3, ErrorCode::ShapeMismatch, "vflip expects a (C,H,W) tensor, got " + shape_string(image.shape()));
    BasicTensor<T> out(image.shape());
    const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) out.at(c, height - 1 - y, x) = image.at(c, y, x);
    return out;
}

}  // namespace triage
