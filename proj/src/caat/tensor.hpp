#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "caat/errors.hpp"

namespace caat {

using Shape = std::vector<int>;

inline size_t numel_of(const Shape& dims) {
    size_t n = 1;
    for (int d : dims) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& dims) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Scalar type is float for experiments and double
// for gradient verification.
template <typename T>
struct Tensor {
    Shape dims;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape d) : dims(std::move(d)) {
        for (int e : dims) {
            if (e <= 0) throw ShapeError("non-positive extent in " + shape_str(dims));
        }
        data.assign(numel_of(dims), T(0));
    }

    Tensor(Shape d, std::vector<T> v) : dims(std::move(d)), data(std::move(v)) {
        if (numel_of(dims) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match dims " + shape_str(dims));
        }
    }

    static Tensor zeros(Shape d) { return Tensor(std::move(d)); }

    static Tensor full(Shape d, T v) {
        Tensor t(std::move(d));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(T v) {
        Tensor t(Shape{1});
        t.data[0] = v;
        return t;
    }

    size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims[static_cast<size_t>(i)]; }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.dims = dims;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }
};

template <typename T>
inline bool bytes_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.dims == b.dims &&
           std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(T)) == 0;
}

// --- small gemm kernels, row-major ----------------------------------------
// These back matmul/conv in both the forward and backward paths; loop orders
// are chosen so the innermost loop vectorizes.

// C[m,n] = A[m,k] * B[k,n]  (accumulates when acc)
template <typename T>
void gemm_nn(int m, int k, int n, const T* a, const T* b, T* c, bool acc) {
    if (!acc) std::fill(c, c + static_cast<size_t>(m) * n, T(0));
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            const T* brow = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C[m,n] = A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(int m, int k, int n, const T* a, const T* b, T* c, bool acc) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<size_t>(j) * k;
            T s = 0;
            for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            crow[j] = acc ? crow[j] + s : s;
        }
    }
}

// C[m,n] = A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(int m, int k, int n, const T* a, const T* b, T* c, bool acc) {
    if (!acc) std::fill(c, c + static_cast<size_t>(m) * n, T(0));
    for (int kk = 0; kk < k; ++kk) {
        const T* arow = a + static_cast<size_t>(kk) * m;
        const T* brow = b + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const T aki = arow[i];
            T* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += aki * brow[j];
        }
    }
}

}  // namespace caat
