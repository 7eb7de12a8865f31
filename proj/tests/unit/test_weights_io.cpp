// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <unistd.h>

#include <catch2/catch_amalgamated.hpp>

#include "golden.hpp"
#include "rfx/weights_io.hpp"

using rfx::Tensor;

namespace {

std::string temp_path(const std::string& stem) {
    return (std::filesystem::temp_directory_path() / (stem + std::to_string(::getpid()) + ".rfxw"))
        .string();
}

std::string slurp(const std::string& path) { return golden::read_file(path); }

}  // namespace

TEST_CASE("weight container round-trips byte-exactly") {
    rfx::ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 1;
    cfg.n_double = 1;
    cfg.n_single = 1;
    cfg.latent_channels = 1;
    cfg.text_token_dim = 4;
    cfg.pooled_dim = 4;
    cfg.sinusoidal_dim = 8;
    cfg.rope = rfx::RopeConfig{{4, 6, 6}, 10000.0};
    cfg.hidden_ratio = 2.0;

    rfx::Model model = rfx::Model::init(cfg, 9);
    const std::string path_a = temp_path("model_a_");
    const std::string path_b = temp_path("model_b_");
    rfx::save_model(path_a, model);

    rfx::Model loaded = rfx::Model::zeros(cfg);
    rfx::load_model(path_a, loaded);
    std::vector<const Tensor*> got, want;
    loaded.visit([&](const std::string&, const Tensor& t) { got.push_back(&t); });
    model.visit([&](const std::string&, const Tensor& t) { want.push_back(&t); });
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) {
        REQUIRE(got[i]->shape == want[i]->shape);
        REQUIRE(got[i]->data == want[i]->data);
    }

    rfx::save_model(path_b, loaded);
    REQUIRE(slurp(path_a) == slurp(path_b));
    std::filesystem::remove(path_a);
    std::filesystem::remove(path_b);
}

TEST_CASE("container header is the documented byte layout") {
    const std::string path = temp_path("header_");
    rfx::save_tensors(path, {{"t", Tensor::from({2}, {1.0, 2.0})}});
    std::string bytes = slurp(path);
    REQUIRE(bytes.substr(0, 4) == "RFXW");
    // version 1, then one tensor, little-endian u32s
    REQUIRE(static_cast<unsigned char>(bytes[4]) == 1);
    REQUIRE(static_cast<unsigned char>(bytes[5]) == 0);
    REQUIRE(static_cast<unsigned char>(bytes[8]) == 1);
    // name length 1, name "t", rank 1, dim 2
    REQUIRE(static_cast<unsigned char>(bytes[12]) == 1);
    REQUIRE(bytes[16] == 't');
    REQUIRE(static_cast<unsigned char>(bytes[17]) == 1);
    REQUIRE(static_cast<unsigned char>(bytes[21]) == 2);
    std::filesystem::remove(path);
}

TEST_CASE("named tensors load back with names and shapes") {
    const std::string path = temp_path("named_");
    rfx::Rng rng(5);
    std::vector<rfx::NamedTensor> tensors;
    tensors.push_back({"step_0", rng.normal({2, 3})});
    tensors.push_back({"step_1", rng.normal({4})});
    rfx::save_tensors(path, tensors);

    std::vector<rfx::NamedTensor> loaded = rfx::load_tensors(path);
    REQUIRE(loaded.size() == 2);
    REQUIRE(loaded[0].name == "step_0");
    REQUIRE(loaded[0].tensor.shape == std::vector<int64_t>{2, 3});
    REQUIRE(loaded[0].tensor.data == tensors[0].tensor.data);
    REQUIRE(loaded[1].name == "step_1");
    std::filesystem::remove(path);
}

TEST_CASE("container rejects corrupt input") {
    const std::string path = temp_path("corrupt_");
    golden::write_file(path, "NOPE not a container");
    REQUIRE_THROWS_AS(rfx::load_tensors(path), std::runtime_error);
    REQUIRE_THROWS_AS(rfx::load_tensors(path + ".missing"), std::runtime_error);
    std::filesystem::remove(path);
}
