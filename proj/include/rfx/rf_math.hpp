// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rfx/tensor.hpp"

namespace rfx {

// ===== rectified-flow objective =====

// x_t = (1-t)*x0 + t*x1 along the straight path from noise to data.
inline Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
    check_same_shape(x0, x1, "interpolate");
    if (!(t >= 0.0 && t <= 1.0))
        throw std::invalid_argument("interpolate: t outside [0,1]: " + std::to_string(t));
    Tensor out = x0;
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data[i] = (1.0 - t) * x0.data[i] + t * x1.data[i];
    return out;
}

// Training target x1 - x0; constant in t along the straight path.
inline Tensor velocity_target(const Tensor& x0, const Tensor& x1) {
    check_same_shape(x0, x1, "velocity_target");
    return sub(x1, x0);
}

// Mean squared error over all elements, so magnitudes compare across shapes.
inline double mse(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "mse");
    if (pred.numel() == 0) return 0.0;
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const double r = pred.data[i] - target.data[i];
        acc += r * r;
    }
    return acc / static_cast<double>(pred.numel());
}

inline double rf_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& x1) {
    return mse(v_pred, velocity_target(x0, x1));
}

// d(rf_loss)/d(v_pred) = 2*(v_pred - (x1-x0))/numel
inline Tensor rf_loss_grad(const Tensor& v_pred, const Tensor& x0, const Tensor& x1) {
    Tensor target = velocity_target(x0, x1);
    check_same_shape(v_pred, target, "rf_loss_grad");
    Tensor g = v_pred;
    const double scale = 2.0 / static_cast<double>(std::max<int64_t>(1, v_pred.numel()));
    for (int64_t i = 0; i < g.numel(); ++i) g.data[i] = scale * (v_pred.data[i] - target.data[i]);
    return g;
}

// ===== diffusion baseline =====

// Cumulative signal levels alpha_bar_t for t in [0,T]; comparison baseline only.
struct NoiseSchedule {
    std::vector<double> alphas;  // alpha_bar_t, monotone non-increasing, alphas[0] = 1
    int T = 1000;

    static NoiseSchedule cosine(int T = 1000) {
        NoiseSchedule s;
        s.T = T;
        s.alphas.resize(static_cast<size_t>(T) + 1);
        for (int t = 0; t <= T; ++t) {
            const double c = std::cos(0.5 * M_PI * static_cast<double>(t) / T);
            s.alphas[static_cast<size_t>(t)] = c * c;
        }
        return s;
    }
};

// x_t = sqrt(alpha_bar_t)*x + sqrt(1-alpha_bar_t)*eps
inline Tensor dm_forward_noise(const Tensor& x, const Tensor& eps, const NoiseSchedule& schedule,
                               int t) {
    check_same_shape(x, eps, "dm_forward_noise");
    if (t < 0 || t > schedule.T)
        throw std::invalid_argument("dm_forward_noise: t out of range: " + std::to_string(t));
    const double a = schedule.alphas[static_cast<size_t>(t)];
    const double sa = std::sqrt(a);
    const double sb = std::sqrt(1.0 - a);
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = sa * x.data[i] + sb * eps.data[i];
    return out;
}

inline double dm_epsilon_loss(const Tensor& eps_pred, const Tensor& eps) {
    return mse(eps_pred, eps);
}

// ===== Euler sampler =====

// One explicit Euler update z + dt*v.
inline Tensor euler_step(const Tensor& z, const Tensor& v, double dt) {
    check_same_shape(z, v, "euler_step");
    if (!(dt > 0.0)) throw std::invalid_argument("euler_step: dt must be positive");
    Tensor out = z;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += dt * v.data[i];
    return out;
}

// Ascending sample times in [0,1); includes 0, excludes 1. The step out of the
// last point runs to 1, so the deltas always telescope to exactly 1. Internal
// convention: s=0 is noise, s=1 is data; callers wanting the opposite display
// convention report the noise level 1-s.
struct TimeGrid {
    std::vector<double> times;

    int64_t steps() const { return static_cast<int64_t>(times.size()); }

    double dt(int64_t i) const {
        const auto n = static_cast<int64_t>(times.size());
        const double next = (i + 1 < n) ? times[static_cast<size_t>(i + 1)] : 1.0;
        return next - times[static_cast<size_t>(i)];
    }
};

inline TimeGrid make_time_grid(int num_steps) {
    if (num_steps < 1)
        throw std::invalid_argument("make_time_grid: num_steps must be >= 1, got " +
                                    std::to_string(num_steps));
    TimeGrid grid;
    grid.times.resize(static_cast<size_t>(num_steps));
    for (int i = 0; i < num_steps; ++i)
        grid.times[static_cast<size_t>(i)] = static_cast<double>(i) / num_steps;
    return grid;
}

}  // namespace rfx
