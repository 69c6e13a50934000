// SPDX-License-Identifier: Apache-2.0
#include "mala/tensor.hpp"

namespace mala {

void matmul_wt(const Matrix& x, const Matrix& w, Matrix& out) {
    assert(x.cols == w.cols);
    if (out.rows != x.rows || out.cols != w.rows) out = Matrix(x.rows, w.rows);
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* xr = x.row(t);
        double* or_ = out.row(t);
        for (std::size_t n = 0; n < w.rows; ++n) {
            const double* wr = w.row(n);
            double acc = 0.0;
            for (std::size_t m = 0; m < x.cols; ++m) acc += xr[m] * wr[m];
            or_[n] = acc;
        }
    }
}

void matmul_wt_backward(const Matrix& x, const Matrix& w, const Matrix& dout,
                        Matrix& dx, Matrix& dw) {
    assert(dout.rows == x.rows && dout.cols == w.rows);
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* dr = dout.row(t);
        const double* xr = x.row(t);
        double* dxr = dx.row(t);
        for (std::size_t n = 0; n < w.rows; ++n) {
            const double d = dr[n];
            if (d == 0.0) continue;
            const double* wr = w.row(n);
            double* dwr = dw.row(n);
            for (std::size_t m = 0; m < x.cols; ++m) {
                dxr[m] += d * wr[m];
                dwr[m] += d * xr[m];
            }
        }
    }
}

}  // namespace mala
