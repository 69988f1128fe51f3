#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mergelab {

// Dense row-major double matrix.
struct matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    matrix() = default;
    matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {}

    double & operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

} // namespace mergelab
