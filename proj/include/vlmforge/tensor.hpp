#pragma once

#include <cstddef>
#include <vector>

namespace vlmforge {

// Dense row-major matrix.
template <class T>
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, T(0)) {}

    T* row(std::size_t i) { return v.data() + i * cols; }
    const T* row(std::size_t i) const { return v.data() + i * cols; }
    T& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
};

namespace kernels {

// C[n x m] += A[n x k] * B[k x m]
template <class T>
void matmul_add(const T* a, std::size_t n, std::size_t k, const T* b, std::size_t m, T* c) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T s = ai[p];
            const T* bp = b + p * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += s * bp[j];
        }
    }
}

// C[k x m] += A[n x k]^T * B[n x m]
template <class T>
void matmul_tn_add(const T* a, std::size_t n, std::size_t k, const T* b, std::size_t m, T* c) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* ai = a + i * k;
        const T* bi = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T s = ai[p];
            T* cp = c + p * m;
            for (std::size_t j = 0; j < m; ++j) cp[j] += s * bi[j];
        }
    }
}

// C[n x k] += A[n x m] * B[k x m]^T
template <class T>
void matmul_nt_add(const T* a, std::size_t n, std::size_t m, const T* b, std::size_t k, T* c) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* ai = a + i * m;
        T* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T* bp = b + p * m;
            T s = 0;
            for (std::size_t j = 0; j < m; ++j) s += ai[j] * bp[j];
            ci[p] += s;
        }
    }
}

}  // namespace kernels

}  // namespace vlmforge
