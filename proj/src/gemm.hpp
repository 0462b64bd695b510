#pragma once

#include <cstddef>

// Row-major dense kernels used by matmul and conv2d. Every output element is
// accumulated in ascending k order, so results do not depend on blocking or on
// how many rows are computed together.
namespace ffgan::detail {

/// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c)
{
    for (std::size_t i = 0; i < m; ++i) {
        double* c_row = c + i * n;
        const double* a_row = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double a_ip = a_row[p];
            const double* b_row = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c)
{
    for (std::size_t p = 0; p < k; ++p) {
        const double* a_row = a + p * m;
        const double* b_row = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double a_pi = a_row[i];
            double* c_row = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                c_row[j] += a_pi * b_row[j];
            }
        }
    }
}

/// out[cols, rows] = in[rows, cols]^T
inline void transpose(std::size_t rows, std::size_t cols, const double* in, double* out)
{
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[c * rows + r] = in[r * cols + c];
        }
    }
}

} // namespace ffgan::detail
