// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace mala {

/// Dense row-major matrix of doubles. Vectors are 1xN or Nx1 as convenient.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) {
        assert(r < rows && c < cols);
        return data[r * cols + c];
    }
    double at(std::size_t r, std::size_t c) const {
        assert(r < rows && c < cols);
        return data[r * cols + c];
    }
    double* row(std::size_t r) { return data.data() + r * cols; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }
    std::size_t size() const { return data.size(); }
    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// out(TxN) = x(TxM) * w(NxM)^T  — w stored with output rows.
void matmul_wt(const Matrix& x, const Matrix& w, Matrix& out);
/// Accumulates dx += dout * w and dw += dout^T * x for the op above.
void matmul_wt_backward(const Matrix& x, const Matrix& w, const Matrix& dout,
                        Matrix& dx, Matrix& dw);

}  // namespace mala
