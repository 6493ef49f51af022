#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mtkd/core/error.hpp"

namespace mtkd {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ')';
    return os.str();
}

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor. Image batches use NCHW.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{})
        : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel_of(shape_)) {
            throw ShapeError("tensor data has " + std::to_string(data_.size()) +
                             " elements but shape " + to_string(shape_) + " needs " +
                             std::to_string(numel_of(shape_)));
        }
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= shape_.size()) {
            throw ShapeError("dimension " + std::to_string(i) + " out of range for shape " +
                             to_string(shape_));
        }
        return shape_[i];
    }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    Tensor reshaped(Shape shape) const {
        if (numel_of(shape) != numel()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    /// Sum of elements accumulated in double.
    double sum() const {
        double acc = 0.0;
        for (const T& v : data_) acc += static_cast<double>(v);
        return acc;
    }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) {
        throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " +
                         to_string(b));
    }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
    if (s.size() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         " but got shape " + to_string(s));
    }
}

/// FNV-1a over the raw bytes of a sequence of tensors.
template <typename T>
class Checksum {
public:
    void add(const Tensor<T>& t) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
        for (std::size_t i = 0; i < t.numel() * sizeof(T); ++i) {
            hash_ ^= bytes[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t value() const noexcept { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

} // namespace mtkd
