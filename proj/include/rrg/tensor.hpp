#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "rrg/errors.hpp"
#include "rrg/rng.hpp"

namespace rrg {

// Dense row-major 2-D tensor. Scalars are 1x1, row vectors 1xd. The scalar
// type is a template parameter: float for training/inference, double for
// gradient-check headroom.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Tensor(std::size_t rows, std::size_t cols, std::vector<T> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != rows_ * cols_) {
            throw NumericError("tensor data length " + std::to_string(data_.size()) +
                               " does not match shape " + shape_str());
        }
    }

    static Tensor scalar(T v) { return Tensor(1, 1, std::vector<T>{v}); }

    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = T(1);
        return t;
    }

    static Tensor filled_normal(std::size_t rows, std::size_t cols, Rng& rng,
                                double mean = 0.0, double stddev = 1.0) {
        Tensor t(rows, cols);
        for (auto& v : t.data_) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    static Tensor filled_uniform(std::size_t rows, std::size_t cols, Rng& rng,
                                 double lo, double hi) {
        Tensor t(rows, cols);
        for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    // Uniform Xavier over [-sqrt(6/(fan_in+fan_out)), +...].
    static Tensor xavier(std::size_t rows, std::size_t cols, Rng& rng) {
        const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
        return filled_uniform(rows, cols, rng, -limit, limit);
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool is_scalar() const { return rows_ == 1 && cols_ == 1; }

    T& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    void fill(T v) { data_.assign(data_.size(), v); }

    bool same_shape(const Tensor& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << rows_ << "x" << cols_;
        return os.str();
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i)
            out[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

} // namespace rrg
