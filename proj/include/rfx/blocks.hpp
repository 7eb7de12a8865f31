// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rfx/embeddings.hpp"
#include "rfx/rng.hpp"
#include "rfx/tensor.hpp"

namespace rfx {

// ===== parameter bundles =====

struct Linear {
    Tensor w;  // [d_in x d_out]
    Tensor b;  // [d_out]

    static Linear zeros(int64_t d_in, int64_t d_out) {
        Linear l;
        l.w = Tensor({d_in, d_out});
        l.b = Tensor({d_out});
        return l;
    }

    static Linear identity(int64_t d) {
        Linear l = zeros(d, d);
        for (int64_t i = 0; i < d; ++i) l.w.at(i, i) = 1.0;
        return l;
    }

    // Scaled-uniform init, +-1/sqrt(fan_in), zero bias.
    static Linear init(Rng& rng, int64_t d_in, int64_t d_out) {
        Linear l;
        l.w = rng.uniform_symmetric({d_in, d_out}, 1.0 / std::sqrt(static_cast<double>(d_in)));
        l.b = Tensor({d_out});
        return l;
    }

    Tensor apply(const Tensor& x) const { return linear(x, w, b); }
    int64_t in_dim() const { return w.dim(0); }
    int64_t out_dim() const { return w.dim(1); }
};

// Which modality leads the joint token sequence. Rope tables must be built in
// the same order.
enum class ConcatOrder { text_first, image_first };

struct BlockSettings {
    int n_heads = 1;
    bool qk_norm = true;
    double ln_eps = 1e-6;
    double qk_norm_eps = 1e-12;
    ConcatOrder order = ConcatOrder::text_first;
};

// ===== modulation (AdaLN) =====

struct AdaLnParams {
    Tensor shift_msa, scale_msa, gate_msa;  // [d]
    bool has_mlp = false;
    Tensor shift_mlp, scale_mlp, gate_mlp;

    static AdaLnParams zeros(int64_t d, bool with_mlp) {
        AdaLnParams p;
        p.shift_msa = Tensor({d});
        p.scale_msa = Tensor({d});
        p.gate_msa = Tensor({d});
        p.has_mlp = with_mlp;
        if (with_mlp) {
            p.shift_mlp = Tensor({d});
            p.scale_mlp = Tensor({d});
            p.gate_mlp = Tensor({d});
        }
        return p;
    }
};

// Projects the conditioning vector to (shift, scale, gate) groups; 6 groups in
// double-stream mode, 3 in single-stream mode. Zero-initialized so a fresh
// stack of blocks is the identity map.
struct AdaLnLayer {
    Linear proj;  // d -> groups*d
    int groups = 6;
    bool use_activation = true;  // silu on the conditioning vector before proj
    double eps = 1e-6;

    static AdaLnLayer make(int64_t d, bool with_mlp, bool use_activation = true,
                           double eps = 1e-6) {
        AdaLnLayer l;
        l.groups = with_mlp ? 6 : 3;
        l.proj = Linear::zeros(d, l.groups * d);
        l.use_activation = use_activation;
        l.eps = eps;
        return l;
    }

    bool with_mlp() const { return groups == 6; }
};

struct AdaLnCache {
    Tensor temb;        // conditioning input
    Tensor act;         // projection input (silu(temb) or temb)
    LayerNormCache ln;  // xhat doubles as the LN output
    AdaLnParams params;
};

struct AdaLnResult {
    Tensor normalized;  // LN(x)*(1+scale_msa)+shift_msa
    AdaLnParams params;
};

namespace detail {

inline Tensor group_slice(const Tensor& flat, int64_t g, int64_t d) {
    Tensor out({d});
    std::copy(flat.data.begin() + g * d, flat.data.begin() + (g + 1) * d, out.data.begin());
    return out;
}

}  // namespace detail

// Returns (params, normalized): params split in the order
// (shift_msa, scale_msa, gate_msa[, shift_mlp, scale_mlp, gate_mlp]).
inline AdaLnResult adaln(const Tensor& x, const Tensor& temb, const AdaLnLayer& layer,
                         AdaLnCache* cache = nullptr) {
    if (temb.numel() != layer.proj.in_dim())
        throw std::invalid_argument("adaln: conditioning width " + shape_str(temb) +
                                    " does not match projection " + shape_str(layer.proj.w));
    const int64_t d = layer.proj.in_dim();
    Tensor act = layer.use_activation ? silu(temb) : temb;
    Tensor flat = layer.proj.apply(act);  // [groups*d]

    AdaLnResult res;
    res.params.shift_msa = detail::group_slice(flat, 0, d);
    res.params.scale_msa = detail::group_slice(flat, 1, d);
    res.params.gate_msa = detail::group_slice(flat, 2, d);
    res.params.has_mlp = layer.with_mlp();
    if (res.params.has_mlp) {
        res.params.shift_mlp = detail::group_slice(flat, 3, d);
        res.params.scale_mlp = detail::group_slice(flat, 4, d);
        res.params.gate_mlp = detail::group_slice(flat, 5, d);
    }

    LayerNormCache local;
    LayerNormCache* ln_cache = cache ? &cache->ln : &local;
    Tensor normed = layer_norm(x, layer.eps, ln_cache);
    res.normalized = normed;
    const int64_t n = normed.rows();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
            res.normalized.at(i, j) =
                normed.at(i, j) * (1.0 + res.params.scale_msa.at(j)) + res.params.shift_msa.at(j);

    if (cache) {
        cache->temb = temb;
        cache->act = act;
        cache->params = res.params;
    }
    return res;
}

// ===== broadcast helpers =====

// x*(1+scale)+shift, scale/shift broadcast over rows.
inline Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
    const int64_t n = x.rows(), d = x.cols();
    Tensor out = x;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
            out.at(i, j) = x.at(i, j) * (1.0 + scale.at(j)) + shift.at(j);
    return out;
}

// x + gate (.) branch, gate broadcast over rows.
inline Tensor add_gated(const Tensor& x, const Tensor& gate, const Tensor& branch) {
    check_same_shape(x, branch, "add_gated");
    const int64_t n = x.rows(), d = x.cols();
    Tensor out = x;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) out.at(i, j) += gate.at(j) * branch.at(i, j);
    return out;
}

// ===== qk normalization =====

struct QkNormScales {
    Tensor q_scale;  // [d_head], init 1
    Tensor k_scale;

    static QkNormScales ones(int64_t d_head) {
        QkNormScales s;
        s.q_scale = Tensor::full({d_head}, 1.0);
        s.k_scale = Tensor::full({d_head}, 1.0);
        return s;
    }
};

// RMS-normalizes each head slice of x and applies the per-channel scale:
// y = scale (.) x / sqrt(mean(x^2)+eps). Not in the reference block diagrams,
// but present in known checkpoints; toggleable via BlockSettings.
inline Tensor qk_rms_norm(const Tensor& x, const Tensor& scale, int n_heads,
                          double eps = 1e-12) {
    const int64_t n = x.rows(), d = x.cols();
    const int64_t dh = d / n_heads;
    if (dh * n_heads != d || scale.numel() != dh)
        throw std::invalid_argument("qk_rms_norm: head layout mismatch on " + shape_str(x));
    Tensor out = x;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t base = h * dh;
            double ms = 0.0;
            for (int64_t j = 0; j < dh; ++j) {
                const double v = x.at(i, base + j);
                ms += v * v;
            }
            ms /= static_cast<double>(dh);
            const double inv = 1.0 / std::sqrt(ms + eps);
            for (int64_t j = 0; j < dh; ++j)
                out.at(i, base + j) = scale.at(j) * x.at(i, base + j) * inv;
        }
    return out;
}

// Backward of qk_rms_norm; x is the forward input. Accumulates dscale.
inline Tensor qk_rms_norm_backward(const Tensor& x, const Tensor& scale, int n_heads, double eps,
                                   const Tensor& dy, Tensor& dscale) {
    const int64_t n = x.rows(), d = x.cols();
    const int64_t dh = d / n_heads;
    Tensor dx = x;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t base = h * dh;
            double ms = 0.0;
            for (int64_t j = 0; j < dh; ++j) {
                const double v = x.at(i, base + j);
                ms += v * v;
            }
            ms /= static_cast<double>(dh);
            const double r = std::sqrt(ms + eps);
            double dot = 0.0;  // sum dy_j * g_j * x_j
            for (int64_t j = 0; j < dh; ++j)
                dot += dy.at(i, base + j) * scale.at(j) * x.at(i, base + j);
            for (int64_t j = 0; j < dh; ++j) {
                const double xv = x.at(i, base + j);
                dscale.at(j) += dy.at(i, base + j) * xv / r;
                dx.at(i, base + j) = scale.at(j) * dy.at(i, base + j) / r -
                                     xv * dot / (static_cast<double>(dh) * r * r * r);
            }
        }
    return dx;
}

// ===== joint attention core =====

struct AttentionCoreCache {
    std::vector<Tensor> probs;  // per head [n x n]
    Tensor q_rot, k_rot;        // post-rope [n x d]
    Tensor v_in;                // [n x d]
};

namespace detail {

inline Tensor head_slice(const Tensor& x, int64_t head, int64_t dh) {
    Tensor out({x.dim(0), dh});
    for (int64_t i = 0; i < x.dim(0); ++i)
        for (int64_t j = 0; j < dh; ++j) out.at(i, j) = x.at(i, head * dh + j);
    return out;
}

inline void head_store(Tensor& x, int64_t head, int64_t dh, const Tensor& slice) {
    for (int64_t i = 0; i < x.dim(0); ++i)
        for (int64_t j = 0; j < dh; ++j) x.at(i, head * dh + j) = slice.at(i, j);
}

inline void head_add(Tensor& x, int64_t head, int64_t dh, const Tensor& slice) {
    for (int64_t i = 0; i < x.dim(0); ++i)
        for (int64_t j = 0; j < dh; ++j) x.at(i, head * dh + j) += slice.at(i, j);
}

}  // namespace detail

// Multi-head attention over one (already concatenated) token sequence:
// per head, rope-rotate Q and K, softmax(Q K^T / sqrt(d_head)), mix V.
// No projections in here; callers own those.
inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                             const RopeTables& tables, int n_heads,
                             AttentionCoreCache* cache = nullptr) {
    check_same_shape(q, k, "attention_core(q,k)");
    check_same_shape(q, v, "attention_core(q,v)");
    const int64_t n = q.dim(0), d = q.dim(1);
    if (n_heads < 1 || d % n_heads != 0)
        throw std::invalid_argument("attention_core: width " + std::to_string(d) +
                                    " not divisible into " + std::to_string(n_heads) + " heads");
    if (tables.tokens() != n)
        throw std::invalid_argument("attention_core: rope tables cover " +
                                    std::to_string(tables.tokens()) + " tokens, sequence has " +
                                    std::to_string(n));
    const int64_t dh = d / n_heads;
    if (tables.head_dim() != dh)
        throw std::invalid_argument("attention_core: rope head dim mismatch");

    Tensor out({n, d});
    if (cache) {
        cache->probs.assign(static_cast<size_t>(n_heads), Tensor());
        cache->q_rot = Tensor({n, d});
        cache->k_rot = Tensor({n, d});
        cache->v_in = v;
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int64_t h = 0; h < n_heads; ++h) {
        Tensor qh = apply_rope(detail::head_slice(q, h, dh), tables);
        Tensor kh = apply_rope(detail::head_slice(k, h, dh), tables);
        Tensor vh = detail::head_slice(v, h, dh);
        Tensor scores = scaled(matmul_nt(qh, kh), inv_sqrt);
        Tensor probs = softmax_rows(scores);
        Tensor mixed = matmul(probs, vh);
        detail::head_store(out, h, dh, mixed);
        if (cache) {
            cache->probs[static_cast<size_t>(h)] = probs;
            detail::head_store(cache->q_rot, h, dh, qh);
            detail::head_store(cache->k_rot, h, dh, kh);
        }
    }
    return out;
}

// Backward of attention_core; fills dq/dk/dv (same shapes as forward inputs).
inline void attention_core_backward(const AttentionCoreCache& cache, const RopeTables& tables,
                                    int n_heads, const Tensor& dout, Tensor& dq, Tensor& dk,
                                    Tensor& dv) {
    const int64_t n = dout.dim(0), d = dout.dim(1);
    const int64_t dh = d / n_heads;
    dq = Tensor({n, d});
    dk = Tensor({n, d});
    dv = Tensor({n, d});
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int64_t h = 0; h < n_heads; ++h) {
        const Tensor& probs = cache.probs[static_cast<size_t>(h)];
        Tensor doh = detail::head_slice(dout, h, dh);
        Tensor vh = detail::head_slice(cache.v_in, h, dh);
        Tensor qh = detail::head_slice(cache.q_rot, h, dh);
        Tensor kh = detail::head_slice(cache.k_rot, h, dh);

        Tensor dprobs = matmul_nt(doh, vh);                    // [n x n]
        Tensor dvh = matmul_tn(probs, doh);                    // [n x dh]
        Tensor dscores = softmax_rows_backward(probs, dprobs);
        Tensor dqh = scaled(matmul(dscores, kh), inv_sqrt);
        Tensor dkh = scaled(matmul_tn(dscores, qh), inv_sqrt);
        detail::head_store(dq, h, dh, apply_rope_transpose(dqh, tables));
        detail::head_store(dk, h, dh, apply_rope_transpose(dkh, tables));
        detail::head_store(dv, h, dh, dvh);
    }
}

// ===== joint attention over two streams =====

struct JointStreams {
    Tensor img;
    Tensor txt;
};

struct JointAttentionWeights {
    const Linear* img_out = nullptr;  // per-stream output projections
    const Linear* txt_out = nullptr;
    const QkNormScales* img_norm = nullptr;  // optional per-stream qk norm
    const QkNormScales* txt_norm = nullptr;
    double qk_norm_eps = 1e-12;
};

namespace detail {

inline Tensor concat_streams(const Tensor& txt, const Tensor& img, ConcatOrder order) {
    return order == ConcatOrder::text_first ? concat_rows(txt, img) : concat_rows(img, txt);
}

inline JointStreams split_streams(const Tensor& joint, int64_t n_txt, ConcatOrder order) {
    JointStreams s;
    const int64_t n = joint.dim(0);
    if (order == ConcatOrder::text_first) {
        s.txt = slice_rows(joint, 0, n_txt);
        s.img = slice_rows(joint, n_txt, n);
    } else {
        s.img = slice_rows(joint, 0, n - n_txt);
        s.txt = slice_rows(joint, n - n_txt, n);
    }
    return s;
}

}  // namespace detail

// Double-stream joint attention: per-stream Q/K/V are concatenated, rotated,
// mixed in one attention, split back, and sent through per-stream output
// projections. Rope tables must cover the joint sequence in `order`.
inline JointStreams joint_attention(const Tensor& img_q, const Tensor& img_k,
                                    const Tensor& img_v, const Tensor& txt_q,
                                    const Tensor& txt_k, const Tensor& txt_v,
                                    const RopeTables& tables, int n_heads,
                                    const JointAttentionWeights& w,
                                    ConcatOrder order = ConcatOrder::text_first) {
    const int64_t n_img = img_q.dim(0), n_txt = txt_q.dim(0);
    if (tables.tokens() != n_img + n_txt)
        throw std::invalid_argument("joint_attention: rope tables cover " +
                                    std::to_string(tables.tokens()) + " tokens, streams have " +
                                    std::to_string(n_img + n_txt));
    Tensor iq = img_q, ik = img_k, tq = txt_q, tk = txt_k;
    if (w.img_norm) {
        iq = qk_rms_norm(iq, w.img_norm->q_scale, n_heads, w.qk_norm_eps);
        ik = qk_rms_norm(ik, w.img_norm->k_scale, n_heads, w.qk_norm_eps);
    }
    if (w.txt_norm) {
        tq = qk_rms_norm(tq, w.txt_norm->q_scale, n_heads, w.qk_norm_eps);
        tk = qk_rms_norm(tk, w.txt_norm->k_scale, n_heads, w.qk_norm_eps);
    }
    Tensor q = detail::concat_streams(tq, iq, order);
    Tensor k = detail::concat_streams(tk, ik, order);
    Tensor v = detail::concat_streams(txt_v, img_v, order);
    Tensor mixed = attention_core(q, k, v, tables, n_heads);
    JointStreams split = detail::split_streams(mixed, n_txt, order);
    JointStreams out;
    out.img = w.img_out ? w.img_out->apply(split.img) : split.img;
    out.txt = w.txt_out ? w.txt_out->apply(split.txt) : split.txt;
    return out;
}

// ===== feed-forward =====

struct FeedForward {
    Linear in;   // d -> hidden
    Linear out;  // hidden -> d

    static FeedForward make(Rng& rng, int64_t d, double hidden_ratio) {
        const auto hidden = static_cast<int64_t>(std::lround(d * hidden_ratio));
        if (hidden < 1) throw std::invalid_argument("FeedForward: hidden width < 1");
        FeedForward f;
        f.in = Linear::init(rng, d, hidden);
        f.out = Linear::init(rng, hidden, d);
        return f;
    }

    Tensor apply(const Tensor& x) const { return out.apply(gelu(in.apply(x))); }
};

// ===== stream state =====

// hidden = image tokens [n_img x d]; encoder_hidden = text tokens [n_txt x d].
struct StreamState {
    Tensor hidden;
    Tensor encoder_hidden;
};

// ===== double-stream block =====

struct StreamAttention {
    Linear q, k, v, out;  // each d -> d
    QkNormScales norm;

    static StreamAttention init(Rng& rng, int64_t d, int64_t d_head) {
        StreamAttention a;
        a.q = Linear::init(rng, d, d);
        a.k = Linear::init(rng, d, d);
        a.v = Linear::init(rng, d, d);
        a.out = Linear::init(rng, d, d);
        a.norm = QkNormScales::ones(d_head);
        return a;
    }

    static StreamAttention zeros(int64_t d, int64_t d_head) {
        StreamAttention a;
        a.q = Linear::zeros(d, d);
        a.k = Linear::zeros(d, d);
        a.v = Linear::zeros(d, d);
        a.out = Linear::zeros(d, d);
        a.norm.q_scale = Tensor({d_head});
        a.norm.k_scale = Tensor({d_head});
        return a;
    }
};

struct DoubleBlockWeights {
    AdaLnLayer img_mod, txt_mod;  // 6-group modulation
    StreamAttention img_attn, txt_attn;
    FeedForward img_mlp, txt_mlp;

    static DoubleBlockWeights init(Rng& rng, int64_t d, int64_t d_head, double hidden_ratio,
                                   bool temb_activation, double ln_eps) {
        DoubleBlockWeights w;
        w.img_mod = AdaLnLayer::make(d, true, temb_activation, ln_eps);
        w.txt_mod = AdaLnLayer::make(d, true, temb_activation, ln_eps);
        w.img_attn = StreamAttention::init(rng, d, d_head);
        w.txt_attn = StreamAttention::init(rng, d, d_head);
        w.img_mlp = FeedForward::make(rng, d, hidden_ratio);
        w.txt_mlp = FeedForward::make(rng, d, hidden_ratio);
        return w;
    }
};

struct StreamAttnCache {
    Tensor norm_in;          // modulated LN output, the QKV input
    Tensor q_proj, k_proj;   // post-projection, pre-qk-norm
};

struct DoubleBlockCache {
    AdaLnCache img_mod, txt_mod;
    StreamAttnCache img_s, txt_s;
    AttentionCoreCache core;
    Tensor img_core_out, txt_core_out;  // pre-output-projection
    Tensor img_attn_out, txt_attn_out;  // post-output-projection
    LayerNormCache img_ln2, txt_ln2;
    Tensor img_mlp_h, txt_mlp_h;    // modulated LN2 output, the feed-forward input
    Tensor img_ff_pre, txt_ff_pre;  // pre-gelu
    Tensor img_ff_act, txt_ff_act;  // post-gelu
    Tensor img_ff_out, txt_ff_out;
};

// One double-stream block: per-stream AdaLN + QKV, joint attention over the
// concatenated sequence, gated residuals, then per-stream modulated MLP.
inline StreamState double_stream_block(const StreamState& state, const Tensor& temb,
                                       const RopeTables& tables, const DoubleBlockWeights& w,
                                       const BlockSettings& s,
                                       DoubleBlockCache* cache = nullptr) {
    AdaLnResult img_mod = adaln(state.hidden, temb, w.img_mod, cache ? &cache->img_mod : nullptr);
    AdaLnResult txt_mod =
        adaln(state.encoder_hidden, temb, w.txt_mod, cache ? &cache->txt_mod : nullptr);

    Tensor img_q = w.img_attn.q.apply(img_mod.normalized);
    Tensor img_k = w.img_attn.k.apply(img_mod.normalized);
    Tensor img_v = w.img_attn.v.apply(img_mod.normalized);
    Tensor txt_q = w.txt_attn.q.apply(txt_mod.normalized);
    Tensor txt_k = w.txt_attn.k.apply(txt_mod.normalized);
    Tensor txt_v = w.txt_attn.v.apply(txt_mod.normalized);
    if (cache) {
        cache->img_s = {img_mod.normalized, img_q, img_k};
        cache->txt_s = {txt_mod.normalized, txt_q, txt_k};
    }

    if (s.qk_norm) {
        img_q = qk_rms_norm(img_q, w.img_attn.norm.q_scale, s.n_heads, s.qk_norm_eps);
        img_k = qk_rms_norm(img_k, w.img_attn.norm.k_scale, s.n_heads, s.qk_norm_eps);
        txt_q = qk_rms_norm(txt_q, w.txt_attn.norm.q_scale, s.n_heads, s.qk_norm_eps);
        txt_k = qk_rms_norm(txt_k, w.txt_attn.norm.k_scale, s.n_heads, s.qk_norm_eps);
    }

    const int64_t n_txt = state.encoder_hidden.dim(0);
    Tensor q = detail::concat_streams(txt_q, img_q, s.order);
    Tensor k = detail::concat_streams(txt_k, img_k, s.order);
    Tensor v = detail::concat_streams(txt_v, img_v, s.order);
    Tensor mixed = attention_core(q, k, v, tables, s.n_heads, cache ? &cache->core : nullptr);
    JointStreams split = detail::split_streams(mixed, n_txt, s.order);

    Tensor img_attn_out = w.img_attn.out.apply(split.img);
    Tensor txt_attn_out = w.txt_attn.out.apply(split.txt);
    if (cache) {
        cache->img_core_out = split.img;
        cache->txt_core_out = split.txt;
        cache->img_attn_out = img_attn_out;
        cache->txt_attn_out = txt_attn_out;
    }

    Tensor img1 = add_gated(state.hidden, img_mod.params.gate_msa, img_attn_out);
    Tensor txt1 = add_gated(state.encoder_hidden, txt_mod.params.gate_msa, txt_attn_out);

    Tensor img_ln2 = layer_norm(img1, s.ln_eps, cache ? &cache->img_ln2 : nullptr);
    Tensor txt_ln2 = layer_norm(txt1, s.ln_eps, cache ? &cache->txt_ln2 : nullptr);
    Tensor img_h = modulate(img_ln2, img_mod.params.shift_mlp, img_mod.params.scale_mlp);
    Tensor txt_h = modulate(txt_ln2, txt_mod.params.shift_mlp, txt_mod.params.scale_mlp);

    Tensor img_pre = w.img_mlp.in.apply(img_h);
    Tensor txt_pre = w.txt_mlp.in.apply(txt_h);
    Tensor img_act = gelu(img_pre);
    Tensor txt_act = gelu(txt_pre);
    Tensor img_ff = w.img_mlp.out.apply(img_act);
    Tensor txt_ff = w.txt_mlp.out.apply(txt_act);
    if (cache) {
        cache->img_mlp_h = img_h;
        cache->txt_mlp_h = txt_h;
        cache->img_ff_pre = img_pre;
        cache->txt_ff_pre = txt_pre;
        cache->img_ff_act = img_act;
        cache->txt_ff_act = txt_act;
        cache->img_ff_out = img_ff;
        cache->txt_ff_out = txt_ff;
    }

    StreamState out;
    out.hidden = add_gated(img1, img_mod.params.gate_mlp, img_ff);
    out.encoder_hidden = add_gated(txt1, txt_mod.params.gate_mlp, txt_ff);
    return out;
}

// ===== single-stream block =====

struct SingleBlockWeights {
    AdaLnLayer mod;  // 3-group modulation
    Linear q, k, v;  // shared across modalities
    QkNormScales norm;
    Linear mlp_in;     // d -> hidden (parallel branch)
    Linear fused_out;  // (d + hidden) -> d

    static SingleBlockWeights init(Rng& rng, int64_t d, int64_t d_head, double hidden_ratio,
                                   bool temb_activation, double ln_eps) {
        const auto hidden = static_cast<int64_t>(std::lround(d * hidden_ratio));
        SingleBlockWeights w;
        w.mod = AdaLnLayer::make(d, false, temb_activation, ln_eps);
        w.q = Linear::init(rng, d, d);
        w.k = Linear::init(rng, d, d);
        w.v = Linear::init(rng, d, d);
        w.norm = QkNormScales::ones(d_head);
        w.mlp_in = Linear::init(rng, d, hidden);
        w.fused_out = Linear::init(rng, d + hidden, d);
        return w;
    }
};

struct SingleBlockCache {
    AdaLnCache mod;
    Tensor h;               // normalized modulated input, shared by both branches
    Tensor q_proj, k_proj;  // pre-qk-norm
    AttentionCoreCache core;
    Tensor mlp_pre;     // pre-gelu
    Tensor mlp_act;     // post-gelu
    Tensor cat;         // [attn | mlp]
    Tensor branch_out;  // fused projection output
};

// One single-stream block over the pre-concatenated [text; image] sequence:
// attention and MLP branches run in parallel from the same normalized input
// and merge through one fused projection.
inline Tensor single_stream_block(const Tensor& x, const Tensor& temb, const RopeTables& tables,
                                  const SingleBlockWeights& w, const BlockSettings& s,
                                  SingleBlockCache* cache = nullptr) {
    AdaLnResult mod = adaln(x, temb, w.mod, cache ? &cache->mod : nullptr);
    const Tensor& h = mod.normalized;

    Tensor q = w.q.apply(h);
    Tensor k = w.k.apply(h);
    Tensor v = w.v.apply(h);
    if (cache) {
        cache->h = h;
        cache->q_proj = q;
        cache->k_proj = k;
    }
    if (s.qk_norm) {
        q = qk_rms_norm(q, w.norm.q_scale, s.n_heads, s.qk_norm_eps);
        k = qk_rms_norm(k, w.norm.k_scale, s.n_heads, s.qk_norm_eps);
    }
    Tensor attn = attention_core(q, k, v, tables, s.n_heads, cache ? &cache->core : nullptr);

    Tensor mlp_pre = w.mlp_in.apply(h);
    Tensor mlp_act = gelu(mlp_pre);
    Tensor cat = concat_cols(attn, mlp_act);
    Tensor branch = w.fused_out.apply(cat);
    if (cache) {
        cache->mlp_pre = mlp_pre;
        cache->mlp_act = mlp_act;
        cache->cat = cat;
        cache->branch_out = branch;
    }
    return add_gated(x, mod.params.gate_msa, branch);
}

// ===== backward passes =====

// Grad accumulation mirrors the weight structs; zero-initialized twins.
inline Linear zeros_like(const Linear& l) { return Linear::zeros(l.in_dim(), l.out_dim()); }

inline AdaLnLayer zeros_like(const AdaLnLayer& l) {
    AdaLnLayer g = l;
    g.proj = zeros_like(l.proj);
    return g;
}

inline QkNormScales zeros_like(const QkNormScales& s) {
    QkNormScales g;
    g.q_scale = Tensor(s.q_scale.shape);
    g.k_scale = Tensor(s.k_scale.shape);
    return g;
}

inline StreamAttention zeros_like(const StreamAttention& a) {
    StreamAttention g;
    g.q = zeros_like(a.q);
    g.k = zeros_like(a.k);
    g.v = zeros_like(a.v);
    g.out = zeros_like(a.out);
    g.norm = zeros_like(a.norm);
    return g;
}

inline FeedForward zeros_like(const FeedForward& f) {
    FeedForward g;
    g.in = zeros_like(f.in);
    g.out = zeros_like(f.out);
    return g;
}

inline DoubleBlockWeights zeros_like(const DoubleBlockWeights& w) {
    DoubleBlockWeights g;
    g.img_mod = zeros_like(w.img_mod);
    g.txt_mod = zeros_like(w.txt_mod);
    g.img_attn = zeros_like(w.img_attn);
    g.txt_attn = zeros_like(w.txt_attn);
    g.img_mlp = zeros_like(w.img_mlp);
    g.txt_mlp = zeros_like(w.txt_mlp);
    return g;
}

inline SingleBlockWeights zeros_like(const SingleBlockWeights& w) {
    SingleBlockWeights g;
    g.mod = zeros_like(w.mod);
    g.q = zeros_like(w.q);
    g.k = zeros_like(w.k);
    g.v = zeros_like(w.v);
    g.norm = zeros_like(w.norm);
    g.mlp_in = zeros_like(w.mlp_in);
    g.fused_out = zeros_like(w.fused_out);
    return g;
}

namespace detail {

// Backward of modulate(): returns dx, accumulates dshift/dscale.
inline Tensor modulate_backward(const Tensor& x, const Tensor& scale, const Tensor& dy,
                                Tensor& dshift, Tensor& dscale) {
    const int64_t n = x.rows(), d = x.cols();
    Tensor dx = dy;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
            dshift.at(j) += dy.at(i, j);
            dscale.at(j) += dy.at(i, j) * x.at(i, j);
            dx.at(i, j) = dy.at(i, j) * (1.0 + scale.at(j));
        }
    return dx;
}

// Backward of add_gated(): returns dbranch, accumulates dgate; dx is dy itself.
inline Tensor add_gated_backward(const Tensor& gate, const Tensor& branch, const Tensor& dy,
                                 Tensor& dgate) {
    const int64_t n = dy.rows(), d = dy.cols();
    Tensor dbranch = dy;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
            dgate.at(j) += dy.at(i, j) * branch.at(i, j);
            dbranch.at(i, j) = dy.at(i, j) * gate.at(j);
        }
    return dbranch;
}

}  // namespace detail

// Backward of adaln(). dnormalized is the grad at the modulated-LN output;
// dparams carries grads already accumulated against each parameter group.
// Returns dx; accumulates projection grads and dtemb.
inline Tensor adaln_backward(const AdaLnLayer& layer, const AdaLnCache& cache,
                             const Tensor& dnormalized, const AdaLnParams& dparams,
                             AdaLnLayer& grads, Tensor& dtemb) {
    const int64_t d = layer.proj.in_dim();
    const int64_t n = cache.ln.xhat.rows();

    // normalized = xhat*(1+scale_msa)+shift_msa
    Tensor dflat({layer.groups * d});
    Tensor dln(cache.ln.xhat.shape);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
            const double g = dnormalized.at(i, j);
            dflat.at(0 * d + j) += g;                          // shift_msa
            dflat.at(1 * d + j) += g * cache.ln.xhat.at(i, j); // scale_msa
            dln.at(i, j) = g * (1.0 + cache.params.scale_msa.at(j));
        }
    for (int64_t j = 0; j < d; ++j) {
        dflat.at(0 * d + j) += dparams.shift_msa.at(j);
        dflat.at(1 * d + j) += dparams.scale_msa.at(j);
        dflat.at(2 * d + j) += dparams.gate_msa.at(j);
        if (layer.with_mlp()) {
            dflat.at(3 * d + j) += dparams.shift_mlp.at(j);
            dflat.at(4 * d + j) += dparams.scale_mlp.at(j);
            dflat.at(5 * d + j) += dparams.gate_mlp.at(j);
        }
    }

    Tensor dact = linear_backward(cache.act, layer.proj.w, dflat, grads.proj.w, grads.proj.b);
    accumulate(dtemb, layer.use_activation ? silu_backward(cache.temb, dact) : dact);
    return layer_norm_backward(cache.ln, dln);
}

// Backward of double_stream_block; returns d(state in), accumulates weight
// grads and dtemb.
inline StreamState double_stream_block_backward(const DoubleBlockWeights& w,
                                                const BlockSettings& s, const RopeTables& tables,
                                                const DoubleBlockCache& cache,
                                                const StreamState& dout,
                                                DoubleBlockWeights& g, Tensor& dtemb) {
    const int64_t d = w.img_mod.proj.in_dim();
    AdaLnParams img_dp = AdaLnParams::zeros(d, true);
    AdaLnParams txt_dp = AdaLnParams::zeros(d, true);

    // MLP residual: out = x1 + gate_mlp (.) ff
    Tensor img_dff =
        detail::add_gated_backward(cache.img_mod.params.gate_mlp, cache.img_ff_out, dout.hidden,
                                   img_dp.gate_mlp);
    Tensor txt_dff = detail::add_gated_backward(cache.txt_mod.params.gate_mlp, cache.txt_ff_out,
                                                dout.encoder_hidden, txt_dp.gate_mlp);
    Tensor img_dx1 = dout.hidden;
    Tensor txt_dx1 = dout.encoder_hidden;

    // feed-forward
    Tensor img_dact =
        linear_backward(cache.img_ff_act, w.img_mlp.out.w, img_dff, g.img_mlp.out.w, g.img_mlp.out.b);
    Tensor txt_dact =
        linear_backward(cache.txt_ff_act, w.txt_mlp.out.w, txt_dff, g.txt_mlp.out.w, g.txt_mlp.out.b);
    Tensor img_dpre = gelu_backward(cache.img_ff_pre, img_dact);
    Tensor txt_dpre = gelu_backward(cache.txt_ff_pre, txt_dact);
    Tensor img_dh =
        linear_backward(cache.img_mlp_h, w.img_mlp.in.w, img_dpre, g.img_mlp.in.w, g.img_mlp.in.b);
    Tensor txt_dh =
        linear_backward(cache.txt_mlp_h, w.txt_mlp.in.w, txt_dpre, g.txt_mlp.in.w, g.txt_mlp.in.b);

    // mlp modulation over LN2
    Tensor img_dln2 = detail::modulate_backward(cache.img_ln2.xhat, cache.img_mod.params.scale_mlp,
                                                img_dh, img_dp.shift_mlp, img_dp.scale_mlp);
    Tensor txt_dln2 = detail::modulate_backward(cache.txt_ln2.xhat, cache.txt_mod.params.scale_mlp,
                                                txt_dh, txt_dp.shift_mlp, txt_dp.scale_mlp);
    accumulate(img_dx1, layer_norm_backward(cache.img_ln2, img_dln2));
    accumulate(txt_dx1, layer_norm_backward(cache.txt_ln2, txt_dln2));

    // MSA residual: x1 = x + gate_msa (.) attn_out
    Tensor img_dattn = detail::add_gated_backward(cache.img_mod.params.gate_msa,
                                                  cache.img_attn_out, img_dx1, img_dp.gate_msa);
    Tensor txt_dattn = detail::add_gated_backward(cache.txt_mod.params.gate_msa,
                                                  cache.txt_attn_out, txt_dx1, txt_dp.gate_msa);

    // output projections
    Tensor img_dcore = linear_backward(cache.img_core_out, w.img_attn.out.w, img_dattn,
                                       g.img_attn.out.w, g.img_attn.out.b);
    Tensor txt_dcore = linear_backward(cache.txt_core_out, w.txt_attn.out.w, txt_dattn,
                                       g.txt_attn.out.w, g.txt_attn.out.b);

    // attention core
    const int64_t n_txt = txt_dcore.dim(0);
    Tensor dmixed = detail::concat_streams(txt_dcore, img_dcore, s.order);
    Tensor dq, dk, dv;
    attention_core_backward(cache.core, tables, s.n_heads, dmixed, dq, dk, dv);
    JointStreams dqs = detail::split_streams(dq, n_txt, s.order);
    JointStreams dks = detail::split_streams(dk, n_txt, s.order);
    JointStreams dvs = detail::split_streams(dv, n_txt, s.order);

    if (s.qk_norm) {
        dqs.img = qk_rms_norm_backward(cache.img_s.q_proj, w.img_attn.norm.q_scale, s.n_heads,
                                       s.qk_norm_eps, dqs.img, g.img_attn.norm.q_scale);
        dks.img = qk_rms_norm_backward(cache.img_s.k_proj, w.img_attn.norm.k_scale, s.n_heads,
                                       s.qk_norm_eps, dks.img, g.img_attn.norm.k_scale);
        dqs.txt = qk_rms_norm_backward(cache.txt_s.q_proj, w.txt_attn.norm.q_scale, s.n_heads,
                                       s.qk_norm_eps, dqs.txt, g.txt_attn.norm.q_scale);
        dks.txt = qk_rms_norm_backward(cache.txt_s.k_proj, w.txt_attn.norm.k_scale, s.n_heads,
                                       s.qk_norm_eps, dks.txt, g.txt_attn.norm.k_scale);
    }

    // QKV projections; their input is the adaln-normalized tensor
    Tensor img_dnorm(cache.img_s.norm_in.shape);
    Tensor txt_dnorm(cache.txt_s.norm_in.shape);
    accumulate(img_dnorm,
               linear_backward(cache.img_s.norm_in, w.img_attn.q.w, dqs.img, g.img_attn.q.w,
                               g.img_attn.q.b));
    accumulate(img_dnorm,
               linear_backward(cache.img_s.norm_in, w.img_attn.k.w, dks.img, g.img_attn.k.w,
                               g.img_attn.k.b));
    accumulate(img_dnorm,
               linear_backward(cache.img_s.norm_in, w.img_attn.v.w, dvs.img, g.img_attn.v.w,
                               g.img_attn.v.b));
    accumulate(txt_dnorm,
               linear_backward(cache.txt_s.norm_in, w.txt_attn.q.w, dqs.txt, g.txt_attn.q.w,
                               g.txt_attn.q.b));
    accumulate(txt_dnorm,
               linear_backward(cache.txt_s.norm_in, w.txt_attn.k.w, dks.txt, g.txt_attn.k.w,
                               g.txt_attn.k.b));
    accumulate(txt_dnorm,
               linear_backward(cache.txt_s.norm_in, w.txt_attn.v.w, dvs.txt, g.txt_attn.v.w,
                               g.txt_attn.v.b));

    StreamState dx;
    dx.hidden = img_dx1;
    dx.encoder_hidden = txt_dx1;
    accumulate(dx.hidden,
               adaln_backward(w.img_mod, cache.img_mod, img_dnorm, img_dp, g.img_mod, dtemb));
    accumulate(dx.encoder_hidden,
               adaln_backward(w.txt_mod, cache.txt_mod, txt_dnorm, txt_dp, g.txt_mod, dtemb));
    return dx;
}

// Backward of single_stream_block; returns dx, accumulates grads and dtemb.
inline Tensor single_stream_block_backward(const SingleBlockWeights& w, const BlockSettings& s,
                                           const RopeTables& tables, const SingleBlockCache& cache,
                                           const Tensor& dout, SingleBlockWeights& g,
                                           Tensor& dtemb) {
    const int64_t d = w.mod.proj.in_dim();
    AdaLnParams dp = AdaLnParams::zeros(d, false);

    Tensor dbranch =
        detail::add_gated_backward(cache.mod.params.gate_msa, cache.branch_out, dout, dp.gate_msa);
    Tensor dx = dout;

    Tensor dcat = linear_backward(cache.cat, w.fused_out.w, dbranch, g.fused_out.w, g.fused_out.b);
    const int64_t n = dcat.dim(0);
    Tensor dattn = Tensor({n, d});
    Tensor dmlp_act = Tensor({n, dcat.dim(1) - d});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < d; ++j) dattn.at(i, j) = dcat.at(i, j);
        for (int64_t j = 0; j < dcat.dim(1) - d; ++j) dmlp_act.at(i, j) = dcat.at(i, d + j);
    }

    Tensor dh(cache.h.shape);
    Tensor dmlp_pre = gelu_backward(cache.mlp_pre, dmlp_act);
    accumulate(dh, linear_backward(cache.h, w.mlp_in.w, dmlp_pre, g.mlp_in.w, g.mlp_in.b));

    Tensor dq, dk, dv;
    attention_core_backward(cache.core, tables, s.n_heads, dattn, dq, dk, dv);
    if (s.qk_norm) {
        dq = qk_rms_norm_backward(cache.q_proj, w.norm.q_scale, s.n_heads, s.qk_norm_eps, dq,
                                  g.norm.q_scale);
        dk = qk_rms_norm_backward(cache.k_proj, w.norm.k_scale, s.n_heads, s.qk_norm_eps, dk,
                                  g.norm.k_scale);
    }
    accumulate(dh, linear_backward(cache.h, w.q.w, dq, g.q.w, g.q.b));
    accumulate(dh, linear_backward(cache.h, w.k.w, dk, g.k.w, g.k.b));
    accumulate(dh, linear_backward(cache.h, w.v.w, dv, g.v.w, g.v.b));

    accumulate(dx, adaln_backward(w.mod, cache.mod, dh, dp, g.mod, dtemb));
    return dx;
}

}  // namespace rfx
