// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <fstream>
#include <functional>

#include "rfx/embeddings.hpp"
#include "rfx/rf_math.hpp"
#include "rfx/rng.hpp"
#include "rfx/blocks.hpp"

namespace rfx {

// ===== 2-d datasets =====

struct ToyDataset {
    enum class Kind { gaussian, two_moons, mixture };
    Kind kind = Kind::gaussian;
    double mu_x = 0.0, mu_y = 0.0, sigma = 1.0;  // gaussian
    int mixture_k = 4;                           // mixture of gaussians on a circle

    static ToyDataset gaussian(double mu_x, double mu_y, double sigma) {
        ToyDataset d;
        d.kind = Kind::gaussian;
        d.mu_x = mu_x;
        d.mu_y = mu_y;
        d.sigma = sigma;
        return d;
    }

    static ToyDataset two_moons() {
        ToyDataset d;
        d.kind = Kind::two_moons;
        return d;
    }

    static ToyDataset mixture(int k) {
        ToyDataset d;
        d.kind = Kind::mixture;
        d.mixture_k = std::max(1, k);
        return d;
    }

    void sample(Rng& rng, double out[2]) const {
        switch (kind) {
            case Kind::gaussian:
                out[0] = mu_x + sigma * rng.next_normal();
                out[1] = mu_y + sigma * rng.next_normal();
                return;
            case Kind::two_moons: {
                const double t = M_PI * rng.next_uniform();
                const bool upper = rng.next_uniform() < 0.5;
                const double noise = 0.1;
                if (upper) {
                    out[0] = std::cos(t) + noise * rng.next_normal();
                    out[1] = std::sin(t) + noise * rng.next_normal();
                } else {
                    out[0] = 1.0 - std::cos(t) + noise * rng.next_normal();
                    out[1] = 0.5 - std::sin(t) + noise * rng.next_normal();
                }
                return;
            }
            case Kind::mixture: {
                const auto j = static_cast<int>(rng.next_uniform() * mixture_k) % mixture_k;
                const double angle = 2.0 * M_PI * j / mixture_k;
                out[0] = 2.0 * std::cos(angle) + 0.3 * rng.next_normal();
                out[1] = 2.0 * std::sin(angle) + 0.3 * rng.next_normal();
                return;
            }
        }
    }

    Tensor sample_batch(Rng& rng, int64_t n) const {
        Tensor out({n, 2});
        for (int64_t i = 0; i < n; ++i) sample(rng, out.data.data() + 2 * i);
        return out;
    }
};

// ===== analytic marginal velocity for the Gaussian task =====

// E[x1 - x0 | x_t = x] for x0 ~ N(0,I), x1 ~ N(mu, sigma^2 I), independent
// coupling along x_t = (1-t)x0 + t*x1. Joint-Gaussian conditioning gives
//   v(x,t) = mu + (t*sigma^2 - (1-t)) / ((1-t)^2 + t^2 sigma^2) * (x - t*mu).
inline void gaussian_oracle_velocity(const double x[2], double t, const double mu[2],
                                     double sigma, double out[2]) {
    if (!(t >= 0.0 && t <= 1.0) || !(sigma > 0.0))
        throw std::domain_error("gaussian_oracle_velocity: need t in [0,1], sigma > 0");
    const double s2 = sigma * sigma;
    const double denom = (1.0 - t) * (1.0 - t) + t * t * s2;
    if (denom <= 0.0)
        throw std::domain_error("gaussian_oracle_velocity: singular marginal at t=" +
                                std::to_string(t));
    const double coeff = (t * s2 - (1.0 - t)) / denom;
    out[0] = mu[0] + coeff * (x[0] - t * mu[0]);
    out[1] = mu[1] + coeff * (x[1] - t * mu[1]);
}

// ===== toy velocity network =====

// MLP (x, sinusoidal t-embed) -> gelu -> gelu -> R^2. The last layer starts
// at zero so an untrained net predicts the zero field.
struct ToyVelocityNet {
    int64_t t_embed_dim = 16;
    Linear l1, l2, l3;

    static ToyVelocityNet init(Rng& rng, int64_t hidden = 64, int64_t t_embed_dim = 16) {
        ToyVelocityNet n;
        n.t_embed_dim = t_embed_dim;
        n.l1 = Linear::init(rng, 2 + t_embed_dim, hidden);
        n.l2 = Linear::init(rng, hidden, hidden);
        n.l3 = Linear::zeros(hidden, 2);
        return n;
    }

    static ToyVelocityNet zeros_like(const ToyVelocityNet& o) {
        ToyVelocityNet n;
        n.t_embed_dim = o.t_embed_dim;
        n.l1 = Linear::zeros(o.l1.in_dim(), o.l1.out_dim());
        n.l2 = Linear::zeros(o.l2.in_dim(), o.l2.out_dim());
        n.l3 = Linear::zeros(o.l3.in_dim(), o.l3.out_dim());
        return n;
    }

    template <class F>
    void visit(F&& fn) {
        fn("l1.weight", l1.w);
        fn("l1.bias", l1.b);
        fn("l2.weight", l2.w);
        fn("l2.bias", l2.b);
        fn("l3.weight", l3.w);
        fn("l3.bias", l3.b);
    }

    Tensor features(const Tensor& x, const std::vector<double>& t) const {
        const int64_t n = x.rows();
        Tensor f({n, 2 + t_embed_dim});
        for (int64_t i = 0; i < n; ++i) {
            f.at(i, 0) = x.at(i, 0);
            f.at(i, 1) = x.at(i, 1);
            Tensor emb = sinusoidal_embed(t[static_cast<size_t>(i)] * 1000.0, t_embed_dim);
            for (int64_t j = 0; j < t_embed_dim; ++j) f.at(i, 2 + j) = emb.at(j);
        }
        return f;
    }
};

struct ToyNetCache {
    Tensor feat, pre1, act1, pre2, act2;
};

inline Tensor toy_net_forward(const ToyVelocityNet& net, const Tensor& x,
                              const std::vector<double>& t, ToyNetCache* cache = nullptr) {
    Tensor feat = net.features(x, t);
    Tensor pre1 = net.l1.apply(feat);
    Tensor act1 = gelu(pre1);
    Tensor pre2 = net.l2.apply(act1);
    Tensor act2 = gelu(pre2);
    if (cache) {
        cache->feat = feat;
        cache->pre1 = pre1;
        cache->act1 = act1;
        cache->pre2 = pre2;
        cache->act2 = act2;
    }
    return net.l3.apply(act2);
}

inline void toy_net_backward(const ToyVelocityNet& net, const ToyNetCache& cache,
                             const Tensor& dv, ToyVelocityNet& grads) {
    Tensor dact2 = linear_backward(cache.act2, net.l3.w, dv, grads.l3.w, grads.l3.b);
    Tensor dpre2 = gelu_backward(cache.pre2, dact2);
    Tensor dact1 = linear_backward(cache.act1, net.l2.w, dpre2, grads.l2.w, grads.l2.b);
    Tensor dpre1 = gelu_backward(cache.pre1, dact1);
    Tensor dfeat = linear_backward(cache.feat, net.l1.w, dpre1, grads.l1.w, grads.l1.b);
    (void)dfeat;  // x_t and t are data, not parameters
}

// ===== Adam =====

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<Tensor> m, v;

    void step(std::vector<Tensor*>& params, std::vector<Tensor*>& grads, double lr) {
        if (m.empty()) {
            for (Tensor* p : params) {
                m.emplace_back(p->shape);
                v.emplace_back(p->shape);
            }
        }
        t += 1;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const Tensor& g = *grads[i];
            for (int64_t j = 0; j < p.numel(); ++j) {
                m[i].data[j] = beta1 * m[i].data[j] + (1.0 - beta1) * g.data[j];
                v[i].data[j] = beta2 * v[i].data[j] + (1.0 - beta2) * g.data[j] * g.data[j];
                const double mh = m[i].data[j] / bc1;
                const double vh = v[i].data[j] / bc2;
                p.data[j] -= lr * mh / (std::sqrt(vh) + eps);
            }
        }
    }
};

// ===== training =====

class divergence_error : public std::runtime_error {
public:
    divergence_error(int64_t step, double loss)
        : std::runtime_error("training diverged at step " + std::to_string(step) +
                             ": loss = " + std::to_string(loss)),
          step(step),
          loss(loss) {}
    int64_t step;
    double loss;
};

struct TrainConfig {
    int64_t steps = 5000;
    double lr = 2e-3;
    int64_t batch = 256;
    uint64_t seed = 1;
    int64_t warmup_steps = 1000;  // linear ramp from 0 so the opening loss window
                                  // reflects the untrained net
    double divergence_threshold = 1e6;
};

struct TrainReport {
    std::vector<double> loss;  // one entry per step, recorded before the update lands
    double endpoint_mean[2] = {0.0, 0.0};
    double endpoint_cov[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
    double straightness = 0.0;
    bool has_eval = false;

    double window_mean(int64_t begin, int64_t end) const {
        double acc = 0.0;
        for (int64_t i = begin; i < end; ++i) acc += loss[static_cast<size_t>(i)];
        return acc / static_cast<double>(end - begin);
    }
};

// Velocity-matching training loop: per step draw (x0, x1, t), regress the net
// at x_t onto x1-x0, Adam-update. All randomness flows from cfg.seed.
inline TrainReport train(const ToyDataset& dataset, ToyVelocityNet& net, const TrainConfig& cfg) {
    if (cfg.steps < 1 || cfg.batch < 1 || cfg.lr < 0.0)
        throw std::invalid_argument("train: steps and batch must be positive, lr non-negative");
    Rng rng(cfg.seed);
    AdamState adam;
    std::vector<Tensor*> params;
    net.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });

    TrainReport report;
    report.loss.reserve(static_cast<size_t>(cfg.steps));
    for (int64_t step = 0; step < cfg.steps; ++step) {
        Tensor x0 = randn(rng, {cfg.batch, 2});
        Tensor x1 = dataset.sample_batch(rng, cfg.batch);
        std::vector<double> t(static_cast<size_t>(cfg.batch));
        for (double& v : t) v = rng.next_uniform();

        Tensor xt({cfg.batch, 2});
        for (int64_t i = 0; i < cfg.batch; ++i) {
            const double ti = t[static_cast<size_t>(i)];
            xt.at(i, 0) = (1.0 - ti) * x0.at(i, 0) + ti * x1.at(i, 0);
            xt.at(i, 1) = (1.0 - ti) * x0.at(i, 1) + ti * x1.at(i, 1);
        }

        ToyNetCache cache;
        Tensor v_pred = toy_net_forward(net, xt, t, &cache);
        const double loss = rf_loss(v_pred, x0, x1);
        report.loss.push_back(loss);
        if (!std::isfinite(loss) || loss > cfg.divergence_threshold)
            throw divergence_error(step, loss);

        ToyVelocityNet grads = ToyVelocityNet::zeros_like(net);
        toy_net_backward(net, cache, rf_loss_grad(v_pred, x0, x1), grads);

        std::vector<Tensor*> gptrs;
        grads.visit([&](const std::string&, Tensor& t_) { gptrs.push_back(&t_); });
        const double lr_now =
            cfg.warmup_steps > 0 && step < cfg.warmup_steps
                ? cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps)
                : cfg.lr;
        adam.step(params, gptrs, lr_now);
    }
    return report;
}

// ===== generation & scoring =====

using VelocityField = std::function<void(const double x[2], double t, double out[2])>;

struct EvalResult {
    double mean[2] = {0.0, 0.0};
    double cov[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
    double straightness = 0.0;          // mean over paths of path/chord - 1
    std::vector<double> endpoints;      // xy pairs, 2*n_samples
};

// Integrates n_samples Euler paths of `field` from N(0,I) over a uniform
// grid; reports endpoint statistics and path straightness.
inline EvalResult integrate_and_score(const VelocityField& field, int64_t n_samples, int steps,
                                      uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("integrate_and_score: need samples");
    TimeGrid grid = make_time_grid(steps);
    Rng rng(seed);
    EvalResult res;
    res.endpoints.resize(static_cast<size_t>(2 * n_samples));
    double straight_acc = 0.0;
    for (int64_t i = 0; i < n_samples; ++i) {
        double pos[2] = {rng.next_normal(), rng.next_normal()};
        const double start[2] = {pos[0], pos[1]};
        double path_len = 0.0;
        for (int64_t k = 0; k < grid.steps(); ++k) {
            double v[2];
            field(pos, grid.times[static_cast<size_t>(k)], v);
            const double dt = grid.dt(k);
            const double step_x = dt * v[0], step_y = dt * v[1];
            path_len += std::sqrt(step_x * step_x + step_y * step_y);
            pos[0] += step_x;
            pos[1] += step_y;
        }
        const double chord = std::hypot(pos[0] - start[0], pos[1] - start[1]);
        const double ratio = chord > 0.0 ? path_len / chord : 1.0;
        straight_acc += std::max(0.0, ratio - 1.0);
        res.endpoints[static_cast<size_t>(2 * i)] = pos[0];
        res.endpoints[static_cast<size_t>(2 * i + 1)] = pos[1];
        res.mean[0] += pos[0];
        res.mean[1] += pos[1];
    }
    res.mean[0] /= static_cast<double>(n_samples);
    res.mean[1] /= static_cast<double>(n_samples);
    for (int64_t i = 0; i < n_samples; ++i) {
        const double dx = res.endpoints[static_cast<size_t>(2 * i)] - res.mean[0];
        const double dy = res.endpoints[static_cast<size_t>(2 * i + 1)] - res.mean[1];
        res.cov[0][0] += dx * dx;
        res.cov[0][1] += dx * dy;
        res.cov[1][0] += dy * dx;
        res.cov[1][1] += dy * dy;
    }
    for (auto& row : res.cov)
        for (double& v : row) v /= static_cast<double>(n_samples);
    res.straightness = straight_acc / static_cast<double>(n_samples);
    return res;
}

inline EvalResult generate_and_score(const ToyVelocityNet& net, int64_t n_samples, int steps,
                                     uint64_t seed) {
    VelocityField field = [&net](const double x[2], double t, double out[2]) {
        Tensor xin({1, 2});
        xin.at(0, 0) = x[0];
        xin.at(0, 1) = x[1];
        Tensor v = toy_net_forward(net, xin, {t});
        out[0] = v.at(0, 0);
        out[1] = v.at(0, 1);
    };
    return integrate_and_score(field, n_samples, steps, seed);
}

inline void merge_eval(TrainReport& report, const EvalResult& eval) {
    report.endpoint_mean[0] = eval.mean[0];
    report.endpoint_mean[1] = eval.mean[1];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) report.endpoint_cov[i][j] = eval.cov[i][j];
    report.straightness = eval.straightness;
    report.has_eval = true;
}

// CSV: `step,loss` rows, then `# key = value` footer comments.
inline void write_train_report_csv(const TrainReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_train_report_csv: cannot open " + path);
    os << "step,loss\n";
    char buf[64];
    for (size_t i = 0; i < report.loss.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", report.loss[i]);
        os << i << "," << buf << "\n";
    }
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        os << "# " << key << " = " << buf << "\n";
    };
    const auto n = static_cast<int64_t>(report.loss.size());
    const int64_t window = std::min<int64_t>(100, n);
    put("initial_window_mean_loss", report.window_mean(0, window));
    put("final_window_mean_loss", report.window_mean(n - window, n));
    if (report.has_eval) {
        put("endpoint_mean_x", report.endpoint_mean[0]);
        put("endpoint_mean_y", report.endpoint_mean[1]);
        put("endpoint_cov_xx", report.endpoint_cov[0][0]);
        put("endpoint_cov_xy", report.endpoint_cov[0][1]);
        put("endpoint_cov_yy", report.endpoint_cov[1][1]);
        put("straightness", report.straightness);
    }
    if (!os) throw std::runtime_error("write_train_report_csv: write failed on " + path);
}

}  // namespace rfx
