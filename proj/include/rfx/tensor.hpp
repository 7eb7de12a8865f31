// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfx {

// Dense row-major tensor of 64-bit floats. The one numeric carrier used by
// every module; dims may be zero (empty token lists are legal).
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<int64_t> dims) : shape(std::move(dims)) {
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
        }
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    static int64_t numel_of(const std::vector<int64_t>& dims) {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> dims) { return Tensor(std::move(dims)); }

    static Tensor full(std::vector<int64_t> dims, double value) {
        Tensor t(std::move(dims));
        std::fill(t.data.begin(), t.data.end(), value);
        return t;
    }

    static Tensor from(std::vector<int64_t> dims, std::initializer_list<double> values) {
        Tensor t(std::move(dims));
        if (static_cast<int64_t>(values.size()) != t.numel())
            throw std::invalid_argument("Tensor::from: value count does not match shape");
        std::copy(values.begin(), values.end(), t.data.begin());
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
    int64_t dim(int64_t i) const { return shape[static_cast<size_t>(i)]; }

    // Matrix view helpers: leading axes flattened into rows, last axis = cols.
    int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
    int64_t rows() const { return shape.empty() ? 1 : numel() / std::max<int64_t>(1, cols()); }

    double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols() + j)]; }
    double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols() + j)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += " x ";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a) +
                                    " vs " + shape_str(b));
}

// Numerics-module contract: results carry no NaN/Inf.
inline void ensure_finite(const Tensor& t, const char* op) {
    for (double v : t.data) {
        if (!std::isfinite(v))
            throw std::domain_error(std::string(op) + ": non-finite value in result");
    }
}

// ===== elementwise helpers =====

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= b.data[i];
    return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "hadamard");
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= b.data[i];
    return out;
}

inline Tensor scaled(const Tensor& a, double s) {
    Tensor out = a;
    for (double& v : out.data) v *= s;
    return out;
}

inline void accumulate(Tensor& dst, const Tensor& src) {
    check_same_shape(dst, src, "accumulate");
    for (int64_t i = 0; i < dst.numel(); ++i) dst.data[i] += src.data[i];
}

// ===== matmul =====

// Standard product with k-innermost accumulation; [m x k] * [k x n] -> [m x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expected rank-2 operands: " + shape_str(a) +
                                    " vs " + shape_str(b));
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a) +
                                    " vs " + shape_str(b));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* po = out.data.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += pa[i * k + kk] * pb[kk * n + j];
            po[i * n + j] = acc;
        }
    }
    ensure_finite(out, "matmul");
    return out;
}

// a^T * b; [k x m]^T * [k x n] -> [m x n]. Backward-pass helper.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw std::invalid_argument("matmul_tn: shape mismatch: " + shape_str(a) + " vs " +
                                    shape_str(b));
    const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    for (int64_t kk = 0; kk < k; ++kk)
        for (int64_t i = 0; i < m; ++i) {
            const double av = a.data[kk * m + i];
            if (av == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) out.data[i * n + j] += av * b.data[kk * n + j];
        }
    return out;
}

// a * b^T; [m x k] * [n x k]^T -> [m x n]. Backward-pass helper.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt: shape mismatch: " + shape_str(a) + " vs " +
                                    shape_str(b));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += a.data[i * k + kk] * b.data[j * k + kk];
            out.data[i * n + j] = acc;
        }
    return out;
}

// ===== softmax =====

// Row-wise softmax with max-subtraction; rows sum to 1.
inline Tensor softmax_rows(const Tensor& a) {
    Tensor out = a;
    const int64_t n = a.cols(), m = a.rows();
    for (int64_t i = 0; i < m; ++i) {
        double* row = out.data.data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int64_t j = 0; j < n; ++j) row[j] /= sum;
    }
    ensure_finite(out, "softmax_rows");
    return out;
}

// Given y = softmax(s) for one row layout, returns ds from dy.
inline Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy) {
    check_same_shape(y, dy, "softmax_rows_backward");
    Tensor ds = y;
    const int64_t n = y.cols(), m = y.rows();
    for (int64_t i = 0; i < m; ++i) {
        const double* yr = y.data.data() + i * n;
        const double* dr = dy.data.data() + i * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += yr[j] * dr[j];
        double* out = ds.data.data() + i * n;
        for (int64_t j = 0; j < n; ++j) out[j] = yr[j] * (dr[j] - dot);
    }
    return ds;
}

// ===== layer norm =====

struct LayerNormCache {
    Tensor xhat;                  // normalized rows
    std::vector<double> inv_std;  // per row
};

// Affine-free layer norm over the last axis, population variance.
inline Tensor layer_norm(const Tensor& x, double eps = 1e-6, LayerNormCache* cache = nullptr) {
    const int64_t d = x.cols();
    if (d < 2)
        throw std::invalid_argument("layer_norm: degenerate last axis of size " +
                                    std::to_string(d));
    const int64_t m = x.rows();
    Tensor out = x;
    if (cache) cache->inv_std.assign(static_cast<size_t>(m), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        double* row = out.data.data() + i * d;
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv;
        if (cache) cache->inv_std[static_cast<size_t>(i)] = inv;
    }
    if (cache) cache->xhat = out;
    ensure_finite(out, "layer_norm");
    return out;
}

inline Tensor layer_norm_backward(const LayerNormCache& cache, const Tensor& dy) {
    const Tensor& xhat = cache.xhat;
    check_same_shape(xhat, dy, "layer_norm_backward");
    const int64_t d = xhat.cols(), m = xhat.rows();
    Tensor dx = dy;
    for (int64_t i = 0; i < m; ++i) {
        const double* xr = xhat.data.data() + i * d;
        const double* dr = dy.data.data() + i * d;
        double mean_dy = 0.0, mean_dyx = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            mean_dy += dr[j];
            mean_dyx += dr[j] * xr[j];
        }
        mean_dy /= static_cast<double>(d);
        mean_dyx /= static_cast<double>(d);
        const double inv = cache.inv_std[static_cast<size_t>(i)];
        double* out = dx.data.data() + i * d;
        for (int64_t j = 0; j < d; ++j) out[j] = (dr[j] - mean_dy - xr[j] * mean_dyx) * inv;
    }
    return dx;
}

// ===== activations =====

namespace detail {
constexpr double kGeluCoeff = 0.044715;
inline double gelu_k() { return std::sqrt(2.0 / M_PI); }
}  // namespace detail

// tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
inline double gelu_scalar(double x) {
    const double u = detail::gelu_k() * (x + detail::kGeluCoeff * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_scalar(double x) {
    const double k = detail::gelu_k();
    const double u = k * (x + detail::kGeluCoeff * x * x * x);
    const double t = std::tanh(u);
    const double du = k * (1.0 + 3.0 * detail::kGeluCoeff * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline Tensor gelu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data) v = gelu_scalar(v);
    ensure_finite(out, "gelu");
    return out;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
    check_same_shape(x, dy, "gelu_backward");
    Tensor dx = dy;
    for (int64_t i = 0; i < x.numel(); ++i) dx.data[i] = dy.data[i] * gelu_grad_scalar(x.data[i]);
    return dx;
}

inline double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad_scalar(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

inline Tensor silu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data) v = silu_scalar(v);
    return out;
}

inline Tensor silu_backward(const Tensor& x, const Tensor& dy) {
    check_same_shape(x, dy, "silu_backward");
    Tensor dx = dy;
    for (int64_t i = 0; i < x.numel(); ++i) dx.data[i] = dy.data[i] * silu_grad_scalar(x.data[i]);
    return dx;
}

// ===== linear =====

// x: [... x d_in], w: [d_in x d_out], b: [d_out] -> [... x d_out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2 || x.cols() != w.dim(0))
        throw std::invalid_argument("linear: input width does not match weight: " +
                                    shape_str(x) + " vs " + shape_str(w));
    if (b.numel() != w.dim(1))
        throw std::invalid_argument("linear: bias size does not match weight: " + shape_str(b) +
                                    " vs " + shape_str(w));
    const int64_t m = x.rows(), k = x.cols(), n = w.dim(1);
    std::vector<int64_t> out_shape = x.shape;
    if (out_shape.empty()) out_shape = {1};
    out_shape.back() = n;
    Tensor out(out_shape);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = b.data[static_cast<size_t>(j)];
            for (int64_t kk = 0; kk < k; ++kk)
                acc += x.data[i * k + kk] * w.data[kk * n + j];
            out.data[i * n + j] = acc;
        }
    ensure_finite(out, "linear");
    return out;
}

// Accumulates dW/db, returns dx. x is the forward input.
inline Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw,
                              Tensor& db) {
    const int64_t m = x.rows(), k = x.cols(), n = w.dim(1);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
            const double xv = x.data[i * k + kk];
            if (xv == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) dw.data[kk * n + j] += xv * dy.data[i * n + j];
        }
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) db.data[static_cast<size_t>(j)] += dy.data[i * n + j];
    Tensor dx(x.shape);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            const double dv = dy.data[i * n + j];
            if (dv == 0.0) continue;
            for (int64_t kk = 0; kk < k; ++kk) dx.data[i * k + kk] += dv * w.data[kk * n + j];
        }
    return dx;
}

// ===== row slicing / concatenation (2-d) =====

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("concat_rows: incompatible shapes: " + shape_str(a) +
                                    " vs " + shape_str(b));
    Tensor out({a.dim(0) + b.dim(0), a.dim(1)});
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
    return out;
}

inline Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end) {
    if (a.rank() != 2 || begin < 0 || end < begin || end > a.dim(0))
        throw std::invalid_argument("slice_rows: bad range on " + shape_str(a));
    Tensor out({end - begin, a.dim(1)});
    std::copy(a.data.begin() + begin * a.dim(1), a.data.begin() + end * a.dim(1),
              out.data.begin());
    return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw std::invalid_argument("concat_cols: incompatible shapes: " + shape_str(a) +
                                    " vs " + shape_str(b));
    Tensor out({a.dim(0), a.dim(1) + b.dim(1)});
    for (int64_t i = 0; i < a.dim(0); ++i) {
        std::copy(a.data.begin() + i * a.dim(1), a.data.begin() + (i + 1) * a.dim(1),
                  out.data.begin() + i * out.dim(1));
        std::copy(b.data.begin() + i * b.dim(1), b.data.begin() + (i + 1) * b.dim(1),
                  out.data.begin() + i * out.dim(1) + a.dim(1));
    }
    return out;
}

}  // namespace rfx
