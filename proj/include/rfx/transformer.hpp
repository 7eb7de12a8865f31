// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rfx/blocks.hpp"
#include "rfx/embeddings.hpp"
#include "rfx/rng.hpp"
#include "rfx/tensor.hpp"

namespace rfx {

// ===== configuration =====

struct ModelConfig {
    int64_t d_model = 64;
    int n_heads = 4;
    int64_t n_double = 2;
    int64_t n_single = 2;
    int64_t latent_channels = 16;
    int64_t patch = 2;
    int64_t text_token_dim = 32;
    int64_t pooled_dim = 32;
    int64_t n_text_tokens = 8;
    int64_t sinusoidal_dim = 256;
    RopeConfig rope{{4, 6, 6}, 10000.0};
    double hidden_ratio = 4.0;
    bool qk_norm = true;
    bool temb_activation = true;  // silu before every modulation projection
    double ln_eps = 1e-6;
    ConcatOrder order = ConcatOrder::text_first;

    int64_t d_head() const { return d_model / n_heads; }
    int64_t in_channels() const { return latent_channels * patch * patch; }
    int64_t hidden_width() const {
        return static_cast<int64_t>(std::lround(static_cast<double>(d_model) * hidden_ratio));
    }

    void validate() const {
        if (n_heads < 1 || d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model must equal n_heads * d_head");
        rope.validate();
        if (rope.head_dim() != d_head())
            throw std::invalid_argument("ModelConfig: rope axis dims must sum to d_head");
        if (sinusoidal_dim % 2 != 0)
            throw std::invalid_argument("ModelConfig: sinusoidal_dim must be even");
        if (n_double < 0 || n_single < 0 || hidden_width() < 1)
            throw std::invalid_argument("ModelConfig: bad depth or hidden width");
    }

    BlockSettings block_settings() const {
        BlockSettings s;
        s.n_heads = n_heads;
        s.qk_norm = qk_norm;
        s.ln_eps = ln_eps;
        s.order = order;
        return s;
    }

    // Desk-scale preset used by the sampler, trainer fixtures, and tests.
    static ModelConfig toy() { return ModelConfig{}; }

    // Full-size architecture shape; for inspection/arithmetic only (weights
    // would need ~95 GB at 64-bit).
    static ModelConfig flux_shape() {
        ModelConfig c;
        c.d_model = 3072;
        c.n_heads = 24;
        c.n_double = 19;
        c.n_single = 38;
        c.latent_channels = 16;
        c.patch = 2;
        c.text_token_dim = 4096;
        c.pooled_dim = 768;
        c.n_text_tokens = 512;
        c.rope = RopeConfig{{16, 56, 56}, 10000.0};
        return c;
    }
};

// Per-call conditioning: sample time in [0,1], conditioning-strength scalar,
// and the whole-prompt pooled embedding.
struct GuidanceInputs {
    double timestep = 0.0;
    double guidance = 0.0;
    Tensor pooled;
};

// ===== scalar/pooled embedders =====

// Two-layer projection (linear, silu, linear) used for timestep, guidance and
// pooled-prompt branches.
struct MlpEmbedder {
    Linear in;
    Linear out;

    static MlpEmbedder init(Rng& rng, int64_t d_in, int64_t d_out) {
        MlpEmbedder e;
        e.in = Linear::init(rng, d_in, d_out);
        e.out = Linear::init(rng, d_out, d_out);
        return e;
    }

    static MlpEmbedder zeros(int64_t d_in, int64_t d_out) {
        MlpEmbedder e;
        e.in = Linear::zeros(d_in, d_out);
        e.out = Linear::zeros(d_out, d_out);
        return e;
    }

    Tensor apply(const Tensor& x) const { return out.apply(silu(in.apply(x))); }
};

struct MlpEmbedderCache {
    Tensor x;    // embedder input
    Tensor pre;  // first linear output, pre-silu
    Tensor act;  // post-silu
};

inline Tensor mlp_embedder_forward(const MlpEmbedder& e, const Tensor& x,
                                   MlpEmbedderCache* cache) {
    Tensor pre = e.in.apply(x);
    Tensor act = silu(pre);
    if (cache) {
        cache->x = x;
        cache->pre = pre;
        cache->act = act;
    }
    return e.out.apply(act);
}

inline void mlp_embedder_backward(const MlpEmbedder& e, const MlpEmbedderCache& cache,
                                  const Tensor& dy, MlpEmbedder& g) {
    Tensor dact = linear_backward(cache.act, e.out.w, dy, g.out.w, g.out.b);
    Tensor dpre = silu_backward(cache.pre, dact);
    Tensor dw_in_unused = linear_backward(cache.x, e.in.w, dpre, g.in.w, g.in.b);
    (void)dw_in_unused;  // embedder inputs carry no parameters upstream
}

// ===== final projection =====

// Modulated norm + linear head back to packed-latent features. Both
// projections start at zero so a fresh model emits exactly zero velocity.
struct FinalLayerWeights {
    Linear mod;   // d -> 2d, split (shift, scale)
    Linear head;  // d -> in_channels

    static FinalLayerWeights zeros(int64_t d, int64_t in_channels) {
        FinalLayerWeights f;
        f.mod = Linear::zeros(d, 2 * d);
        f.head = Linear::zeros(d, in_channels);
        return f;
    }
};

// ===== model =====

struct ModelCache {
    Tensor packed_in, text_in;
    Tensor t_sin, g_sin, pooled;
    MlpEmbedderCache time_c, guidance_c, pooled_c;
    Tensor temb;
    std::vector<DoubleBlockCache> dbl;
    std::vector<SingleBlockCache> sgl;
    LayerNormCache final_ln;
    Tensor final_act;    // input to the final modulation projection
    Tensor final_shift;  // [d]
    Tensor final_scale;  // [d]
    Tensor final_h;      // modulated tokens, the head input
    int64_t n_txt = 0;
    int64_t n_img = 0;
};

struct Model {
    ModelConfig cfg;
    Linear img_in;   // in_channels -> d
    Linear txt_in;   // text_token_dim -> d
    MlpEmbedder time_embed, guidance_embed, pooled_embed;
    std::vector<DoubleBlockWeights> double_blocks;
    std::vector<SingleBlockWeights> single_blocks;
    FinalLayerWeights final_layer;

    // Scaled-uniform weights everywhere except the modulation projections and
    // the head, which start at zero (identity-at-init).
    static Model init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(seed);
        m.img_in = Linear::init(rng, cfg.in_channels(), cfg.d_model);
        m.txt_in = Linear::init(rng, cfg.text_token_dim, cfg.d_model);
        m.time_embed = MlpEmbedder::init(rng, cfg.sinusoidal_dim, cfg.d_model);
        m.guidance_embed = MlpEmbedder::init(rng, cfg.sinusoidal_dim, cfg.d_model);
        m.pooled_embed = MlpEmbedder::init(rng, cfg.pooled_dim, cfg.d_model);
        m.double_blocks.reserve(static_cast<size_t>(cfg.n_double));
        for (int64_t i = 0; i < cfg.n_double; ++i)
            m.double_blocks.push_back(DoubleBlockWeights::init(
                rng, cfg.d_model, cfg.d_head(), cfg.hidden_ratio, cfg.temb_activation, cfg.ln_eps));
        m.single_blocks.reserve(static_cast<size_t>(cfg.n_single));
        for (int64_t i = 0; i < cfg.n_single; ++i)
            m.single_blocks.push_back(SingleBlockWeights::init(
                rng, cfg.d_model, cfg.d_head(), cfg.hidden_ratio, cfg.temb_activation, cfg.ln_eps));
        m.final_layer = FinalLayerWeights::zeros(cfg.d_model, cfg.in_channels());
        return m;
    }

    static Model zeros(const ModelConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        m.img_in = Linear::zeros(cfg.in_channels(), cfg.d_model);
        m.txt_in = Linear::zeros(cfg.text_token_dim, cfg.d_model);
        m.time_embed = MlpEmbedder::zeros(cfg.sinusoidal_dim, cfg.d_model);
        m.guidance_embed = MlpEmbedder::zeros(cfg.sinusoidal_dim, cfg.d_model);
        m.pooled_embed = MlpEmbedder::zeros(cfg.pooled_dim, cfg.d_model);
        for (int64_t i = 0; i < cfg.n_double; ++i) {
            DoubleBlockWeights w;
            w.img_mod = AdaLnLayer::make(cfg.d_model, true, cfg.temb_activation, cfg.ln_eps);
            w.txt_mod = AdaLnLayer::make(cfg.d_model, true, cfg.temb_activation, cfg.ln_eps);
            w.img_attn = StreamAttention::zeros(cfg.d_model, cfg.d_head());
            w.txt_attn = StreamAttention::zeros(cfg.d_model, cfg.d_head());
            w.img_mlp.in = Linear::zeros(cfg.d_model, cfg.hidden_width());
            w.img_mlp.out = Linear::zeros(cfg.hidden_width(), cfg.d_model);
            w.txt_mlp.in = Linear::zeros(cfg.d_model, cfg.hidden_width());
            w.txt_mlp.out = Linear::zeros(cfg.hidden_width(), cfg.d_model);
            m.double_blocks.push_back(std::move(w));
        }
        for (int64_t i = 0; i < cfg.n_single; ++i) {
            SingleBlockWeights w;
            w.mod = AdaLnLayer::make(cfg.d_model, false, cfg.temb_activation, cfg.ln_eps);
            w.q = Linear::zeros(cfg.d_model, cfg.d_model);
            w.k = Linear::zeros(cfg.d_model, cfg.d_model);
            w.v = Linear::zeros(cfg.d_model, cfg.d_model);
            w.norm.q_scale = Tensor({cfg.d_head()});
            w.norm.k_scale = Tensor({cfg.d_head()});
            w.mlp_in = Linear::zeros(cfg.d_model, cfg.hidden_width());
            w.fused_out = Linear::zeros(cfg.d_model + cfg.hidden_width(), cfg.d_model);
            m.single_blocks.push_back(std::move(w));
        }
        m.final_layer = FinalLayerWeights::zeros(cfg.d_model, cfg.in_channels());
        return m;
    }

    // Enumerates every weight tensor as (name, tensor); order is the save/load
    // and flattening order.
    template <class Self, class F>
    static void visit_impl(Self& m, F&& fn) {
        fn("img_in.weight", m.img_in.w);
        fn("img_in.bias", m.img_in.b);
        fn("txt_in.weight", m.txt_in.w);
        fn("txt_in.bias", m.txt_in.b);
        auto embedder = [&](const std::string& p, auto& e) {
            fn(p + ".in.weight", e.in.w);
            fn(p + ".in.bias", e.in.b);
            fn(p + ".out.weight", e.out.w);
            fn(p + ".out.bias", e.out.b);
        };
        embedder("time_embed", m.time_embed);
        embedder("guidance_embed", m.guidance_embed);
        embedder("pooled_embed", m.pooled_embed);
        auto lin = [&](const std::string& p, auto& l) {
            fn(p + ".weight", l.w);
            fn(p + ".bias", l.b);
        };
        auto attn = [&](const std::string& p, auto& a) {
            lin(p + ".q", a.q);
            lin(p + ".k", a.k);
            lin(p + ".v", a.v);
            lin(p + ".out", a.out);
            fn(p + ".norm.q_scale", a.norm.q_scale);
            fn(p + ".norm.k_scale", a.norm.k_scale);
        };
        for (size_t i = 0; i < m.double_blocks.size(); ++i) {
            const std::string p = "double." + std::to_string(i);
            auto& b = m.double_blocks[i];
            lin(p + ".img_mod", b.img_mod.proj);
            lin(p + ".txt_mod", b.txt_mod.proj);
            attn(p + ".img_attn", b.img_attn);
            attn(p + ".txt_attn", b.txt_attn);
            lin(p + ".img_mlp.in", b.img_mlp.in);
            lin(p + ".img_mlp.out", b.img_mlp.out);
            lin(p + ".txt_mlp.in", b.txt_mlp.in);
            lin(p + ".txt_mlp.out", b.txt_mlp.out);
        }
        for (size_t i = 0; i < m.single_blocks.size(); ++i) {
            const std::string p = "single." + std::to_string(i);
            auto& b = m.single_blocks[i];
            lin(p + ".mod", b.mod.proj);
            lin(p + ".q", b.q);
            lin(p + ".k", b.k);
            lin(p + ".v", b.v);
            fn(p + ".norm.q_scale", b.norm.q_scale);
            fn(p + ".norm.k_scale", b.norm.k_scale);
            lin(p + ".mlp_in", b.mlp_in);
            lin(p + ".fused_out", b.fused_out);
        }
        lin("final.mod", m.final_layer.mod);
        lin("final.head", m.final_layer.head);
    }

    template <class F>
    void visit(F&& fn) {
        visit_impl(*this, std::forward<F>(fn));
    }
    template <class F>
    void visit(F&& fn) const {
        visit_impl(*this, std::forward<F>(fn));
    }

    // Per-domain input projections into the shared width.
    StreamState embed_inputs(const Tensor& packed_latents, const Tensor& text_embeds) const {
        if (packed_latents.cols() != cfg.in_channels())
            throw std::invalid_argument("embed_inputs: packed latent width " +
                                        shape_str(packed_latents) + " != in_channels " +
                                        std::to_string(cfg.in_channels()));
        if (text_embeds.cols() != cfg.text_token_dim)
            throw std::invalid_argument("embed_inputs: text width " + shape_str(text_embeds) +
                                        " != text_token_dim " +
                                        std::to_string(cfg.text_token_dim));
        StreamState s;
        s.hidden = img_in.apply(packed_latents);
        s.encoder_hidden = txt_in.apply(text_embeds);
        return s;
    }

    // Fused conditioning vector: sinusoidal(timestep*1000) and
    // sinusoidal(guidance*1000) each through their own two-layer projection,
    // the pooled prompt through a third, all summed. Depends only on the
    // guidance inputs, never on hidden state.
    Tensor build_temb(const GuidanceInputs& g, ModelCache* cache = nullptr) const {
        if (g.pooled.numel() != cfg.pooled_dim)
            throw std::invalid_argument("build_temb: pooled width " + shape_str(g.pooled) +
                                        " != pooled_dim " + std::to_string(cfg.pooled_dim));
        Tensor t_sin = sinusoidal_embed(g.timestep * 1000.0, cfg.sinusoidal_dim);
        Tensor g_sin = sinusoidal_embed(g.guidance * 1000.0, cfg.sinusoidal_dim);
        Tensor temb = mlp_embedder_forward(time_embed, t_sin, cache ? &cache->time_c : nullptr);
        accumulate(temb, mlp_embedder_forward(guidance_embed, g_sin,
                                              cache ? &cache->guidance_c : nullptr));
        accumulate(temb,
                   mlp_embedder_forward(pooled_embed, g.pooled, cache ? &cache->pooled_c : nullptr));
        if (cache) {
            cache->t_sin = t_sin;
            cache->g_sin = g_sin;
            cache->pooled = g.pooled;
            cache->temb = temb;
        }
        return temb;
    }

    // Velocity prediction in packed-latent space. ids must cover the joint
    // sequence in the configured concat order (text first by default).
    Tensor forward(const Tensor& packed_latents, const Tensor& text_embeds, const TokenIds& ids,
                   const GuidanceInputs& g, ModelCache* cache = nullptr) const {
        RopeTables tables = build_rope_tables(ids, cfg.rope);
        return forward_with_tables(packed_latents, text_embeds, tables, g, cache);
    }

    Tensor forward_with_tables(const Tensor& packed_latents, const Tensor& text_embeds,
                               const RopeTables& tables, const GuidanceInputs& g,
                               ModelCache* cache = nullptr) const {
        if (!(g.timestep >= 0.0 && g.timestep <= 1.0))
            throw std::invalid_argument("forward: timestep outside [0,1]");
        const int64_t n_img = packed_latents.rows();
        const int64_t n_txt = text_embeds.rows();
        if (tables.tokens() != n_img + n_txt)
            throw std::invalid_argument(
                "forward: ids cover " + std::to_string(tables.tokens()) + " tokens, inputs have " +
                std::to_string(n_txt) + "+" + std::to_string(n_img));

        StreamState state = embed_inputs(packed_latents, text_embeds);
        Tensor temb = build_temb(g, cache);
        if (cache) {
            cache->packed_in = packed_latents;
            cache->text_in = text_embeds;
            cache->n_txt = n_txt;
            cache->n_img = n_img;
            cache->dbl.assign(static_cast<size_t>(cfg.n_double), DoubleBlockCache{});
            cache->sgl.assign(static_cast<size_t>(cfg.n_single), SingleBlockCache{});
        }

        const BlockSettings bs = cfg.block_settings();
        for (size_t i = 0; i < double_blocks.size(); ++i)
            state = double_stream_block(state, temb, tables, double_blocks[i], bs,
                                        cache ? &cache->dbl[i] : nullptr);

        Tensor x = detail::concat_streams(state.encoder_hidden, state.hidden, cfg.order);
        for (size_t i = 0; i < single_blocks.size(); ++i)
            x = single_stream_block(x, temb, tables, single_blocks[i], bs,
                                    cache ? &cache->sgl[i] : nullptr);

        Tensor img_tokens = detail::split_streams(x, n_txt, cfg.order).img;

        // Final modulated norm + head; only image tokens feed the head.
        LayerNormCache local_ln;
        LayerNormCache* lnc = cache ? &cache->final_ln : &local_ln;
        Tensor ln = layer_norm(img_tokens, cfg.ln_eps, lnc);
        Tensor act = cfg.temb_activation ? silu(temb) : temb;
        Tensor flat = final_layer.mod.apply(act);  // [2d], split (shift, scale)
        Tensor shift = detail::group_slice(flat, 0, cfg.d_model);
        Tensor scale = detail::group_slice(flat, 1, cfg.d_model);
        Tensor h = modulate(ln, shift, scale);
        if (cache) {
            cache->final_act = act;
            cache->final_shift = shift;
            cache->final_scale = scale;
            cache->final_h = h;
        }
        return final_layer.head.apply(h);
    }

    // Hand-written backward; fills `grads` (a zeros(cfg) twin) from the cache
    // of one forward call and the loss gradient at the output.
    void backward(const ModelCache& cache, const RopeTables& tables, const Tensor& d_out,
                  Model& grads) const {
        const BlockSettings bs = cfg.block_settings();
        const int64_t d = cfg.d_model;

        Tensor dh = linear_backward(cache.final_h, final_layer.head.w, d_out,
                                    grads.final_layer.head.w, grads.final_layer.head.b);
        Tensor dshift({d}), dscale({d});
        Tensor dln = detail::modulate_backward(cache.final_ln.xhat, cache.final_scale, dh, dshift,
                                               dscale);
        Tensor dflat({2 * d});
        for (int64_t j = 0; j < d; ++j) {
            dflat.at(j) = dshift.at(j);
            dflat.at(d + j) = dscale.at(j);
        }
        Tensor dact = linear_backward(cache.final_act, final_layer.mod.w, dflat,
                                      grads.final_layer.mod.w, grads.final_layer.mod.b);
        Tensor dtemb = cfg.temb_activation ? silu_backward(cache.temb, dact) : dact;

        Tensor dimg_tokens = layer_norm_backward(cache.final_ln, dln);
        Tensor dx({cache.n_txt + cache.n_img, d});
        const int64_t img_base = cfg.order == ConcatOrder::text_first ? cache.n_txt : 0;
        for (int64_t i = 0; i < cache.n_img; ++i)
            for (int64_t j = 0; j < d; ++j) dx.at(img_base + i, j) = dimg_tokens.at(i, j);

        for (size_t i = single_blocks.size(); i-- > 0;)
            dx = single_stream_block_backward(single_blocks[i], bs, tables, cache.sgl[i], dx,
                                              grads.single_blocks[i], dtemb);

        JointStreams split = detail::split_streams(dx, cache.n_txt, cfg.order);
        StreamState dstate;
        dstate.hidden = split.img;
        dstate.encoder_hidden = split.txt;
        for (size_t i = double_blocks.size(); i-- > 0;)
            dstate = double_stream_block_backward(double_blocks[i], bs, tables, cache.dbl[i],
                                                  dstate, grads.double_blocks[i], dtemb);

        linear_backward(cache.packed_in, img_in.w, dstate.hidden, grads.img_in.w, grads.img_in.b);
        linear_backward(cache.text_in, txt_in.w, dstate.encoder_hidden, grads.txt_in.w,
                        grads.txt_in.b);

        mlp_embedder_backward(time_embed, cache.time_c, dtemb, grads.time_embed);
        mlp_embedder_backward(guidance_embed, cache.guidance_c, dtemb, grads.guidance_embed);
        mlp_embedder_backward(pooled_embed, cache.pooled_c, dtemb, grads.pooled_embed);
    }
};

// ===== parameter accounting =====

inline int64_t linear_param_count(int64_t d_in, int64_t d_out) { return d_in * d_out + d_out; }

// Closed-form total from config arithmetic alone; no weights are allocated,
// so full-size shapes stay inspectable.
inline int64_t count_params(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model;
    const int64_t dh = cfg.d_head();
    const int64_t hidden = cfg.hidden_width();

    const int64_t embedders = linear_param_count(cfg.sinusoidal_dim, d) + linear_param_count(d, d) +
                              linear_param_count(cfg.sinusoidal_dim, d) + linear_param_count(d, d) +
                              linear_param_count(cfg.pooled_dim, d) + linear_param_count(d, d);
    const int64_t inputs =
        linear_param_count(cfg.in_channels(), d) + linear_param_count(cfg.text_token_dim, d);

    const int64_t attn = 4 * linear_param_count(d, d) + 2 * dh;  // qkv+out, qk-norm scales
    const int64_t mlp = linear_param_count(d, hidden) + linear_param_count(hidden, d);
    const int64_t per_double = 2 * linear_param_count(d, 6 * d) + 2 * attn + 2 * mlp;
    const int64_t per_single = linear_param_count(d, 3 * d) + 3 * linear_param_count(d, d) +
                               2 * dh + linear_param_count(d, hidden) +
                               linear_param_count(d + hidden, d);
    const int64_t final_layer =
        linear_param_count(d, 2 * d) + linear_param_count(d, cfg.in_channels());

    return inputs + embedders + cfg.n_double * per_double + cfg.n_single * per_single +
           final_layer;
}

inline int64_t count_params(const Model& m) { return count_params(m.cfg); }

}  // namespace rfx
