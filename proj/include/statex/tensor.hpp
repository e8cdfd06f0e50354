#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace statex {

using Shape = std::vector<std::size_t>;

using MatrixMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatrixMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// 64-byte aligned so vectorized kernels never split a buffer differently
// depending on where the allocator placed it.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::size_t shape_numel(const Shape & shape);
std::string shape_str(const Shape & shape);

// Dense row-major array of doubles. Value type: copies are deep.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor from(std::initializer_list<double> values);

    const Shape & shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // 2-D view helpers; a 1-D tensor is treated as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    double * data() { return data_.data(); }
    const double * data() const { return data_.data(); }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }
    Buffer & values() { return data_; }
    const Buffer & values() const { return data_; }

    double & operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double & at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    MatrixMap mat();
    ConstMatrixMap mat() const;

    void reshape(Shape shape);
    void fill(double value);
    bool all_finite() const;

    friend bool operator==(const Tensor & a, const Tensor & b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    Buffer data_;
};

double max_abs_diff(const Tensor & a, const Tensor & b);

} // namespace statex
