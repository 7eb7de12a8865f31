// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>

#include "rfx/tensor.hpp"

namespace rfx {

// Per-token (t, h, w) grid coordinates. Image tokens enumerate the 2-d token
// grid with t=0; text tokens sit at the origin (0,0,0).
struct TokenIds {
    std::vector<std::array<int64_t, 3>> rows;

    int64_t count() const { return static_cast<int64_t>(rows.size()); }
};

inline TokenIds build_img_ids(int64_t h_grid, int64_t w_grid) {
    if (h_grid < 1 || w_grid < 1)
        throw std::invalid_argument("build_img_ids: non-positive grid " +
                                    std::to_string(h_grid) + "x" + std::to_string(w_grid));
    TokenIds ids;
    ids.rows.reserve(static_cast<size_t>(h_grid * w_grid));
    for (int64_t h = 0; h < h_grid; ++h)
        for (int64_t w = 0; w < w_grid; ++w) ids.rows.push_back({0, h, w});
    return ids;
}

inline TokenIds build_text_ids(int64_t n_text) {
    if (n_text < 0) throw std::invalid_argument("build_text_ids: negative count");
    TokenIds ids;
    ids.rows.assign(static_cast<size_t>(n_text), {0, 0, 0});
    return ids;
}

inline TokenIds concat_ids(const TokenIds& a, const TokenIds& b) {
    TokenIds out = a;
    out.rows.insert(out.rows.end(), b.rows.begin(), b.rows.end());
    return out;
}

// Half-cos/half-sin projection of a scalar:
//   out[j]        = cos(value * w_j)
//   out[dim/2+j]  = sin(value * w_j),   w_j = max_period^(-2j/dim)
inline Tensor sinusoidal_embed(double value, int64_t dim, double max_period = 10000.0) {
    if (dim % 2 != 0)
        throw std::invalid_argument("sinusoidal_embed: dim must be even, got " +
                                    std::to_string(dim));
    Tensor out({dim});
    const int64_t half = dim / 2;
    for (int64_t j = 0; j < half; ++j) {
        const double freq = std::pow(max_period, -2.0 * static_cast<double>(j) / dim);
        out.data[static_cast<size_t>(j)] = std::cos(value * freq);
        out.data[static_cast<size_t>(half + j)] = std::sin(value * freq);
    }
    return out;
}

// Three-axis rotary split; dims must be even and sum to the head dimension.
struct RopeConfig {
    std::array<int64_t, 3> axis_dims{4, 6, 6};
    double theta = 10000.0;

    int64_t head_dim() const { return axis_dims[0] + axis_dims[1] + axis_dims[2]; }

    void validate() const {
        for (int64_t d : axis_dims)
            if (d <= 0 || d % 2 != 0)
                throw std::invalid_argument("RopeConfig: axis dims must be positive and even");
    }
};

// Per-token cos/sin rotation tables, [n_tokens x d_head] each. A pure function
// of (ids, config): no timestep or hidden-state input, so one table serves the
// whole sampling run.
struct RopeTables {
    Tensor cos;
    Tensor sin;

    int64_t tokens() const { return cos.rank() == 2 ? cos.dim(0) : 0; }
    int64_t head_dim() const { return cos.rank() == 2 ? cos.dim(1) : 0; }
};

// Per axis a: frequencies w_k = theta^(-2k/axis_dim), angle = id_a * w_k; each
// angle fills an adjacent (cos,cos)/(sin,sin) pair, axis blocks concatenated
// in (t, h, w) order.
inline RopeTables build_rope_tables(const TokenIds& ids, const RopeConfig& cfg) {
    cfg.validate();
    const int64_t d_head = cfg.head_dim();
    const int64_t n = ids.count();
    RopeTables tables;
    tables.cos = Tensor({n, d_head});
    tables.sin = Tensor({n, d_head});
    for (int64_t i = 0; i < n; ++i) {
        int64_t col = 0;
        for (int axis = 0; axis < 3; ++axis) {
            const int64_t axis_dim = cfg.axis_dims[static_cast<size_t>(axis)];
            const auto pos = static_cast<double>(ids.rows[static_cast<size_t>(i)][static_cast<size_t>(axis)]);
            for (int64_t k = 0; k < axis_dim / 2; ++k) {
                const double freq = std::pow(cfg.theta, -2.0 * static_cast<double>(k) / axis_dim);
                const double angle = pos * freq;
                const double c = std::cos(angle);
                const double s = std::sin(angle);
                tables.cos.at(i, col) = c;
                tables.sin.at(i, col) = s;
                tables.cos.at(i, col + 1) = c;
                tables.sin.at(i, col + 1) = s;
                col += 2;
            }
        }
    }
    return tables;
}

// Rotates each adjacent pair (x0, x1) by the token's table angle:
//   (x0*c - x1*s, x0*s + x1*c)
inline Tensor apply_rope(const Tensor& x, const RopeTables& tables) {
    if (x.rank() != 2 || x.dim(0) != tables.tokens() || x.dim(1) != tables.head_dim())
        throw std::invalid_argument("apply_rope: input " + shape_str(x) +
                                    " does not match tables " + shape_str(tables.cos));
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = x;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; j += 2) {
            const double c = tables.cos.at(i, j);
            const double s = tables.sin.at(i, j);
            const double a = x.at(i, j);
            const double b = x.at(i, j + 1);
            out.at(i, j) = a * c - b * s;
            out.at(i, j + 1) = a * s + b * c;
        }
    return out;
}

// Inverse rotation (negated angles); also the backward map, rotations being
// orthogonal.
inline Tensor apply_rope_transpose(const Tensor& x, const RopeTables& tables) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = x;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; j += 2) {
            const double c = tables.cos.at(i, j);
            const double s = tables.sin.at(i, j);
            const double a = x.at(i, j);
            const double b = x.at(i, j + 1);
            out.at(i, j) = a * c + b * s;
            out.at(i, j + 1) = -a * s + b * c;
        }
    return out;
}

}  // namespace rfx
