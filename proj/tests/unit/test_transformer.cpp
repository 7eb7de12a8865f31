// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "golden.hpp"
#include "oracles.hpp"
#include "rfx/grad_check.hpp"
#include "rfx/rf_math.hpp"
#include "rfx/transformer.hpp"

using rfx::Tensor;

namespace {

// Smallest config that still exercises every stage; used by gradient checks.
rfx::ModelConfig tiny_cfg(int64_t n_double, int64_t n_single) {
    rfx::ModelConfig c;
    c.d_model = 16;
    c.n_heads = 1;
    c.n_double = n_double;
    c.n_single = n_single;
    c.latent_channels = 1;
    c.patch = 2;  // in_channels = 4
    c.text_token_dim = 4;
    c.pooled_dim = 4;
    c.n_text_tokens = 2;
    c.sinusoidal_dim = 8;
    c.rope = rfx::RopeConfig{{4, 6, 6}, 10000.0};
    c.hidden_ratio = 2.0;
    return c;
}

void randomize_params(rfx::Model& model, uint64_t seed, double scale = 0.25) {
    rfx::Rng rng(seed);
    model.visit([&](const std::string&, Tensor& t) {
        for (double& v : t.data) v = scale * rng.next_normal();
    });
}

struct FlatParams {
    std::vector<Tensor*> tensors;
    int64_t total = 0;

    explicit FlatParams(rfx::Model& m) {
        m.visit([&](const std::string&, Tensor& t) {
            tensors.push_back(&t);
            total += t.numel();
        });
    }

    Tensor gather() const {
        Tensor theta({total});
        int64_t k = 0;
        for (const Tensor* t : tensors)
            for (double v : t->data) theta.data[static_cast<size_t>(k++)] = v;
        return theta;
    }

    void scatter(const Tensor& theta) {
        int64_t k = 0;
        for (Tensor* t : tensors)
            for (double& v : t->data) v = theta.data[static_cast<size_t>(k++)];
    }
};

// Full central-difference check of the hand-written backward at one random
// parameter point; returns the worst relative error over every coordinate.
double model_grad_check(const rfx::ModelConfig& cfg, uint64_t seed, double h = 1e-4) {
    rfx::Model model = rfx::Model::init(cfg, seed);
    randomize_params(model, seed ^ 0x5EEDULL);

    rfx::Rng rng(seed + 17);
    Tensor packed = rng.normal({4, cfg.in_channels()});
    Tensor text = rng.normal({2, cfg.text_token_dim});
    Tensor x0 = rng.normal({4, cfg.in_channels()});
    Tensor x1 = rng.normal({4, cfg.in_channels()});
    rfx::GuidanceInputs g{0.3, 2.0, rng.normal({cfg.pooled_dim})};
    rfx::TokenIds ids = rfx::concat_ids(rfx::build_text_ids(2), rfx::build_img_ids(2, 2));
    rfx::RopeTables tables = rfx::build_rope_tables(ids, cfg.rope);

    FlatParams flat(model);
    Tensor theta0 = flat.gather();

    auto f = [&](const Tensor& theta) {
        flat.scatter(theta);
        return rfx::rf_loss(model.forward_with_tables(packed, text, tables, g), x0, x1);
    };

    flat.scatter(theta0);
    rfx::ModelCache cache;
    Tensor out = model.forward_with_tables(packed, text, tables, g, &cache);
    rfx::Model grads = rfx::Model::zeros(cfg);
    model.backward(cache, tables, rfx::rf_loss_grad(out, x0, x1), grads);
    FlatParams gflat(grads);
    Tensor analytic = gflat.gather();

    const double err = rfx::grad_check(f, theta0, analytic, h);
    flat.scatter(theta0);
    return err;
}

}  // namespace

TEST_CASE("fresh model emits exactly zero velocity") {
    rfx::ModelConfig cfg = rfx::ModelConfig::toy();
    rfx::Model model = rfx::Model::init(cfg, 7);
    rfx::Rng rng(40);
    Tensor packed = rng.normal({16, cfg.in_channels()});
    Tensor text = rng.normal({8, cfg.text_token_dim});
    rfx::TokenIds ids = rfx::concat_ids(rfx::build_text_ids(8), rfx::build_img_ids(4, 4));
    rfx::GuidanceInputs g{0.5, 3.5, rng.normal({cfg.pooled_dim})};

    Tensor out = model.forward(packed, text, ids, g);
    REQUIRE(out.shape == std::vector<int64_t>{16, 64});
    for (double v : out.data) REQUIRE(v == 0.0);
}

TEST_CASE("embed_inputs") {
    rfx::ModelConfig cfg = rfx::ModelConfig::toy();
    rfx::Model model = rfx::Model::zeros(cfg);
    rfx::Rng rng(41);
    Tensor packed = rng.normal({16, 64});
    Tensor text = rng.normal({8, 32});

    rfx::StreamState zeroed = model.embed_inputs(packed, text);
    for (double v : zeroed.hidden.data) REQUIRE(v == 0.0);
    for (double v : zeroed.encoder_hidden.data) REQUIRE(v == 0.0);

    // square image projection set to identity passes latents through
    model.img_in = rfx::Linear::identity(64);
    REQUIRE(model.embed_inputs(packed, text).hidden.data == packed.data);

    rfx::ModelConfig wide = rfx::ModelConfig::toy();
    wide.d_model = 48;
    wide.rope = rfx::RopeConfig{{4, 4, 4}, 10000.0};
    rfx::Model m48 = rfx::Model::init(wide, 1);
    rfx::StreamState s = m48.embed_inputs(packed, text);
    REQUIRE(s.hidden.shape == std::vector<int64_t>{16, 48});
    REQUIRE(s.encoder_hidden.shape == std::vector<int64_t>{8, 48});

    REQUIRE_THROWS_AS(model.embed_inputs(Tensor({16, 63}), text), std::invalid_argument);
}

TEST_CASE("build_temb") {
    rfx::ModelConfig cfg = rfx::ModelConfig::toy();
    rfx::Rng rng(42);

    rfx::Model zeros = rfx::Model::zeros(cfg);
    rfx::GuidanceInputs g{0.25, 3.0, rng.normal({cfg.pooled_dim})};
    for (double v : zeros.build_temb(g).data) REQUIRE(v == 0.0);

    rfx::Model model = rfx::Model::init(cfg, 3);
    // pairwise distinct over a 16-step grid
    rfx::TimeGrid grid = rfx::make_time_grid(16);
    std::vector<Tensor> tembs;
    for (double t : grid.times) {
        rfx::GuidanceInputs gi{t, 3.0, g.pooled};
        tembs.push_back(model.build_temb(gi));
    }
    for (size_t a = 0; a < tembs.size(); ++a)
        for (size_t b = a + 1; b < tembs.size(); ++b) REQUIRE(tembs[a].data != tembs[b].data);

    // temb depends only on guidance inputs, never the latents
    Tensor packed1 = rng.normal({16, cfg.in_channels()});
    Tensor packed2 = rng.normal({16, cfg.in_channels()});
    Tensor text = rng.normal({8, cfg.text_token_dim});
    rfx::TokenIds ids = rfx::concat_ids(rfx::build_text_ids(8), rfx::build_img_ids(4, 4));
    rfx::RopeTables tables = rfx::build_rope_tables(ids, cfg.rope);
    rfx::ModelCache c1, c2;
    model.forward_with_tables(packed1, text, tables, g, &c1);
    model.forward_with_tables(packed2, text, tables, g, &c2);
    REQUIRE(c1.temb.data == c2.temb.data);
}

TEST_CASE("forward is pure and keeps the output shape contract") {
    rfx::ModelConfig cfg = rfx::ModelConfig::toy();
    rfx::Model model = rfx::Model::init(cfg, 7);
    randomize_params(model, 1234);

    rfx::Rng rng(43);
    Tensor packed = rng.normal({16, cfg.in_channels()});
    rfx::GuidanceInputs g{0.5, 3.5, rng.normal({cfg.pooled_dim})};
    for (int64_t n_txt : {1, 3, 8}) {
        Tensor text = rng.normal({n_txt, cfg.text_token_dim});
        rfx::TokenIds ids =
            rfx::concat_ids(rfx::build_text_ids(n_txt), rfx::build_img_ids(4, 4));
        Tensor a = model.forward(packed, text, ids, g);
        Tensor b = model.forward(packed, text, ids, g);
        REQUIRE(a.shape == std::vector<int64_t>{16, 64});
        REQUIRE(a.data == b.data);
    }
}

TEST_CASE("forward regression against the frozen golden hash") {
    rfx::ModelConfig cfg = rfx::ModelConfig::toy();
    rfx::Model model = rfx::Model::init(cfg, 7);
    randomize_params(model, 2025, 0.2);

    rfx::Rng rng(44);
    Tensor packed = rng.normal({16, cfg.in_channels()});
    Tensor text = rng.normal({8, cfg.text_token_dim});
    rfx::TokenIds ids = rfx::concat_ids(rfx::build_text_ids(8), rfx::build_img_ids(4, 4));
    rfx::GuidanceInputs g{0.375, 2.5, rng.normal({cfg.pooled_dim})};

    Tensor out = model.forward(packed, text, ids, g);
    for (double v : out.data) REQUIRE(std::isfinite(v));

    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx\n",
                  static_cast<unsigned long long>(oracle::tensor_hash(out)));
    REQUIRE(std::string(buf) == golden::expect("toy_forward_hash.txt", buf));
}

TEST_CASE("guidance branch sensitivity") {
    rfx::ModelConfig cfg = rfx::ModelConfig::toy();
    rfx::Model model = rfx::Model::init(cfg, 7);
    randomize_params(model, 99);

    rfx::Rng rng(45);
    Tensor packed = rng.normal({16, cfg.in_channels()});
    Tensor text = rng.normal({8, cfg.text_token_dim});
    rfx::TokenIds ids = rfx::concat_ids(rfx::build_text_ids(8), rfx::build_img_ids(4, 4));
    Tensor pooled = rng.normal({cfg.pooled_dim});

    Tensor low = model.forward(packed, text, ids, rfx::GuidanceInputs{0.5, 1.0, pooled});
    Tensor high = model.forward(packed, text, ids, rfx::GuidanceInputs{0.5, 2.0, pooled});
    REQUIRE(low.data != high.data);

    model.guidance_embed = rfx::MlpEmbedder::zeros(cfg.sinusoidal_dim, cfg.d_model);
    Tensor low0 = model.forward(packed, text, ids, rfx::GuidanceInputs{0.5, 1.0, pooled});
    Tensor high0 = model.forward(packed, text, ids, rfx::GuidanceInputs{0.5, 2.0, pooled});
    REQUIRE(low0.data == high0.data);
}

TEST_CASE("rope tables are identical across sampling timesteps") {
    rfx::ModelConfig cfg = rfx::ModelConfig::toy();
    rfx::TokenIds ids = rfx::concat_ids(rfx::build_text_ids(8), rfx::build_img_ids(4, 4));
    rfx::RopeTables first = rfx::build_rope_tables(ids, cfg.rope);
    const uint64_t cos_hash = oracle::tensor_hash(first.cos);
    const uint64_t sin_hash = oracle::tensor_hash(first.sin);
    for (double t : rfx::make_time_grid(8).times) {
        (void)t;  // tables take no timestep input; rebuilds must be bitwise equal
        rfx::RopeTables again = rfx::build_rope_tables(ids, cfg.rope);
        REQUIRE(oracle::tensor_hash(again.cos) == cos_hash);
        REQUIRE(oracle::tensor_hash(again.sin) == sin_hash);
    }
}

TEST_CASE("count_params closed form") {
    REQUIRE(rfx::linear_param_count(2, 3) == 9);

    rfx::ModelConfig toy = rfx::ModelConfig::toy();
    rfx::Model model = rfx::Model::init(toy, 1);
    int64_t enumerated = 0;
    model.visit([&](const std::string&, const Tensor& t) { enumerated += t.numel(); });
    REQUIRE(enumerated == rfx::count_params(toy));

    const int64_t flux = rfx::count_params(rfx::ModelConfig::flux_shape());
    REQUIRE(flux > 11'000'000'000LL);
    REQUIRE(flux < 13'000'000'000LL);
}

TEST_CASE("hand-written backward matches central differences, stage by stage") {
    REQUIRE(model_grad_check(tiny_cfg(0, 0), 51) < 1e-4);
    REQUIRE(model_grad_check(tiny_cfg(1, 0), 52) < 1e-4);
    REQUIRE(model_grad_check(tiny_cfg(0, 1), 53) < 1e-4);
    REQUIRE(model_grad_check(tiny_cfg(1, 1), 54) < 1e-4);
}
