// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <optional>

#include "rfx/rf_math.hpp"
#include "rfx/transformer.hpp"
#include "rfx/weights_io.hpp"

namespace rfx {

// ===== request & geometry =====

struct PipelineRequest {
    std::string prompt;
    double guidance_scale = 3.5;
    int num_inference_steps = 4;
    int64_t width = 64;
    int64_t height = 64;
    uint64_t seed = 0;
};

// Resolution arithmetic: pixels -> latent -> 2x2-patch token grid. Width and
// height must be multiples of vae_scale*patch (= 16) so every stage divides
// evenly; offending requests are rejected, never resized.
struct LatentGeometry {
    int64_t H = 0, W = 0;          // pixels
    int64_t h = 0, w = 0;          // latent
    int64_t h_grid = 0, w_grid = 0;  // token grid
    int64_t vae_scale = 8;
    int64_t patch = 2;
    int64_t latent_channels = 16;

    int64_t n_img_tokens() const { return h_grid * w_grid; }
    int64_t packed_features() const { return latent_channels * patch * patch; }

    static LatentGeometry from_pixels(int64_t height, int64_t width, int64_t latent_channels = 16) {
        LatentGeometry g;
        g.latent_channels = latent_channels;
        const int64_t multiple = g.vae_scale * g.patch;
        if (height < multiple || width < multiple || height % multiple != 0 ||
            width % multiple != 0)
            throw std::invalid_argument("geometry: width and height must be positive multiples of " +
                                        std::to_string(multiple) + ", got " +
                                        std::to_string(width) + "x" + std::to_string(height));
        g.H = height;
        g.W = width;
        g.h = height / g.vae_scale;
        g.w = width / g.vae_scale;
        g.h_grid = g.h / g.patch;
        g.w_grid = g.w / g.patch;
        return g;
    }
};

// ===== deterministic text-encoder stand-ins =====

// dense: per-token rows (T5 role); pooled: one whole-prompt vector (CLIP
// role). Both are pure functions of (prompt, dims) with unit-RMS rows.
struct StubTextEncodings {
    Tensor dense;   // [n_txt x text_token_dim]
    Tensor pooled;  // [pooled_dim]
};

namespace detail {

inline void rms_normalize_row(double* row, int64_t n) {
    double ms = 0.0;
    for (int64_t j = 0; j < n; ++j) ms += row[j] * row[j];
    ms /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(ms);
    for (int64_t j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace detail

inline StubTextEncodings stub_encode_text(const std::string& prompt, int64_t n_txt,
                                          int64_t text_token_dim, int64_t pooled_dim) {
    if (n_txt < 1) throw std::invalid_argument("stub_encode_text: need at least one token");
    const uint64_t prompt_hash = detail::fnv1a64(prompt);

    StubTextEncodings enc;
    enc.dense = Tensor({n_txt, text_token_dim});
    for (int64_t i = 0; i < n_txt; ++i) {
        Rng row_rng(detail::mix64(prompt_hash ^
                                  (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(i + 1))));
        for (int64_t j = 0; j < text_token_dim; ++j) enc.dense.at(i, j) = row_rng.next_normal();
        detail::rms_normalize_row(enc.dense.data.data() + i * text_token_dim, text_token_dim);
    }

    // Mean of dense rows, projected by a fixed seeded matrix, RMS-normalized.
    Tensor mean({text_token_dim});
    for (int64_t i = 0; i < n_txt; ++i)
        for (int64_t j = 0; j < text_token_dim; ++j) mean.at(j) += enc.dense.at(i, j);
    for (int64_t j = 0; j < text_token_dim; ++j) mean.at(j) /= static_cast<double>(n_txt);

    Rng proj_rng = Rng(0).fork("stub-text-pooled-projection");
    enc.pooled = Tensor({pooled_dim});
    for (int64_t p = 0; p < pooled_dim; ++p) {
        double acc = 0.0;
        for (int64_t j = 0; j < text_token_dim; ++j) acc += proj_rng.next_normal() * mean.at(j);
        enc.pooled.at(p) = acc / std::sqrt(static_cast<double>(text_token_dim));
    }
    detail::rms_normalize_row(enc.pooled.data.data(), pooled_dim);
    return enc;
}

// ===== latent packing =====

// [C x h x w] -> [h/2*w/2 x C*4]: token (th, tw) carries its 2x2 patch over
// all channels, feature index = c*4 + dy*2 + dx.
inline Tensor pack_latents(const Tensor& z) {
    if (z.rank() != 3) throw std::invalid_argument("pack_latents: expected [C x h x w]");
    const int64_t C = z.dim(0), h = z.dim(1), w = z.dim(2);
    if (h % 2 != 0 || w % 2 != 0)
        throw std::invalid_argument("pack_latents: odd latent dims " + shape_str(z));
    const int64_t hg = h / 2, wg = w / 2;
    Tensor out({hg * wg, C * 4});
    for (int64_t th = 0; th < hg; ++th)
        for (int64_t tw = 0; tw < wg; ++tw) {
            const int64_t token = th * wg + tw;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t dy = 0; dy < 2; ++dy)
                    for (int64_t dx = 0; dx < 2; ++dx)
                        out.at(token, c * 4 + dy * 2 + dx) =
                            z.data[(c * h + th * 2 + dy) * w + tw * 2 + dx];
        }
    return out;
}

inline Tensor unpack_latents(const Tensor& packed, int64_t C, int64_t h, int64_t w) {
    const int64_t hg = h / 2, wg = w / 2;
    if (packed.rank() != 2 || packed.dim(0) != hg * wg || packed.dim(1) != C * 4)
        throw std::invalid_argument("unpack_latents: shape " + shape_str(packed) +
                                    " does not match geometry");
    Tensor z({C, h, w});
    for (int64_t th = 0; th < hg; ++th)
        for (int64_t tw = 0; tw < wg; ++tw) {
            const int64_t token = th * wg + tw;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t dy = 0; dy < 2; ++dy)
                    for (int64_t dx = 0; dx < 2; ++dx)
                        z.data[(c * h + th * 2 + dy) * w + tw * 2 + dx] =
                            packed.at(token, c * 4 + dy * 2 + dx);
        }
    return z;
}

// ===== sampling =====

struct SampleTrace {
    std::vector<NamedTensor> step_latents;  // "step_{i}" = latent after update i
};

// Full run: seeded noise, fixed per-run conditioning, Euler refinement from
// s=0 (noise) to s=1 (data). Returns the final latent [C x h x w].
inline Tensor sample(const PipelineRequest& req, const Model& model,
                     SampleTrace* trace = nullptr) {
    const ModelConfig& cfg = model.cfg;
    LatentGeometry geo = LatentGeometry::from_pixels(req.height, req.width, cfg.latent_channels);
    if (geo.packed_features() != cfg.in_channels())
        throw std::invalid_argument("sample: geometry features " +
                                    std::to_string(geo.packed_features()) +
                                    " do not match model in_channels " +
                                    std::to_string(cfg.in_channels()));

    Rng rng(req.seed);
    Tensor z = randn(rng, {geo.latent_channels, geo.h, geo.w});

    // Constant per-run inputs: encodings, ids, rope tables, pooled/guidance.
    StubTextEncodings enc =
        stub_encode_text(req.prompt, cfg.n_text_tokens, cfg.text_token_dim, cfg.pooled_dim);
    TokenIds img_ids = build_img_ids(geo.h_grid, geo.w_grid);
    TokenIds txt_ids = build_text_ids(cfg.n_text_tokens);
    TokenIds ids = cfg.order == ConcatOrder::text_first ? concat_ids(txt_ids, img_ids)
                                                        : concat_ids(img_ids, txt_ids);
    RopeTables tables = build_rope_tables(ids, cfg.rope);

    TimeGrid grid = make_time_grid(req.num_inference_steps);
    Tensor packed = pack_latents(z);
    for (int64_t i = 0; i < grid.steps(); ++i) {
        GuidanceInputs g;
        g.timestep = grid.times[static_cast<size_t>(i)];
        g.guidance = req.guidance_scale;
        g.pooled = enc.pooled;
        Tensor v = model.forward_with_tables(packed, enc.dense, tables, g);
        packed = euler_step(packed, v, grid.dt(i));
        if (trace)
            trace->step_latents.push_back(
                {"step_" + std::to_string(i),
                 unpack_latents(packed, geo.latent_channels, geo.h, geo.w)});
    }
    return unpack_latents(packed, geo.latent_channels, geo.h, geo.w);
}

// ===== decoding & image output =====

struct ImageU8 {
    int64_t width = 0, height = 0;
    std::vector<uint8_t> rgb;  // row-major, top-left origin
};

// Decoder stand-in: fixed seeded 16->3 map per latent pixel, nearest-neighbor
// x8 upsample, then pixel = clamp(round(128 + 32*value), 0, 255). A zero
// latent decodes to uniform mid-gray 128.
inline ImageU8 stub_decode(const Tensor& z) {
    if (z.rank() != 3) throw std::invalid_argument("stub_decode: expected [C x h x w]");
    const int64_t C = z.dim(0), h = z.dim(1), w = z.dim(2);
    const LatentGeometry geo_defaults;
    const int64_t scale = geo_defaults.vae_scale;

    Rng proj_rng = Rng(0).fork("stub-decoder-projection");
    Tensor proj({3, C});
    for (double& v : proj.data) v = proj_rng.next_normal() / std::sqrt(static_cast<double>(C));

    ImageU8 img;
    img.width = w * scale;
    img.height = h * scale;
    img.rgb.assign(static_cast<size_t>(img.width * img.height * 3), 0);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            uint8_t px[3];
            for (int64_t ch = 0; ch < 3; ++ch) {
                double acc = 0.0;
                for (int64_t c = 0; c < C; ++c) acc += proj.at(ch, c) * z.data[(c * h + y) * w + x];
                const double mapped = std::round(128.0 + 32.0 * acc);
                px[ch] = static_cast<uint8_t>(std::clamp(mapped, 0.0, 255.0));
            }
            for (int64_t sy = 0; sy < scale; ++sy)
                for (int64_t sx = 0; sx < scale; ++sx) {
                    const int64_t base = ((y * scale + sy) * img.width + x * scale + sx) * 3;
                    img.rgb[static_cast<size_t>(base)] = px[0];
                    img.rgb[static_cast<size_t>(base + 1)] = px[1];
                    img.rgb[static_cast<size_t>(base + 2)] = px[2];
                }
        }
    return img;
}

// Binary PPM: "P6\n{W} {H}\n255\n" + raw RGB bytes.
inline void write_ppm(const ImageU8& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()),
             static_cast<std::streamsize>(img.rgb.size()));
    if (!os) throw std::runtime_error("write_ppm: write failed on " + path);
}

// Plain-text key=value run manifest written beside every output.
inline void write_manifest(const PipelineRequest& req, const std::string& build_id,
                           const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_manifest: cannot open " + path);
    os << "prompt = " << req.prompt << "\n";
    os << "seed = " << req.seed << "\n";
    os << "steps = " << req.num_inference_steps << "\n";
    os << "guidance = " << req.guidance_scale << "\n";
    os << "width = " << req.width << "\n";
    os << "height = " << req.height << "\n";
    os << "build = " << build_id << "\n";
    if (!os) throw std::runtime_error("write_manifest: write failed on " + path);
}

}  // namespace rfx
