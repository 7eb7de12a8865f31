// SPDX-License-Identifier: Apache-2.0
//
// rfx - single binary over the sampling pipeline and the 2-d toy trainer.
// Subcommands: sample, train-toy, inspect. Non-interactive; emits files.
//
// Exit codes: 0 ok, 2 usage/geometry, 3 I/O, 4 numeric divergence.

#include <cinttypes>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "rfx/pipeline.hpp"
#include "rfx/toy_train.hpp"
#include "rfx/transformer.hpp"
#include "rfx/weights_io.hpp"

#ifndef RFX_BUILD_ID
#define RFX_BUILD_ID "unknown"
#endif

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitDiverged = 4;

rfx::ModelConfig preset_config(const std::string& preset) {
    if (preset == "toy") return rfx::ModelConfig::toy();
    if (preset == "flux-shape") return rfx::ModelConfig::flux_shape();
    throw CLI::ValidationError("--preset", "unknown preset '" + preset + "'");
}

void print_kv(const std::string& key, const std::string& value) {
    std::cout << key << " = " << value << "\n";
}

// ===== sample =====

struct SampleArgs {
    std::string prompt = "a photo";
    int64_t width = 64;
    int64_t height = 64;
    int steps = 4;
    double guidance = 3.5;
    uint64_t seed = 1;
    uint64_t model_seed = 7;
    std::string out = "out.ppm";
    std::string preset = "toy";
    bool dump_latents = false;
};

int run_sample(const SampleArgs& a) {
    print_kv("command", "sample");
    print_kv("prompt", a.prompt);
    print_kv("width", std::to_string(a.width));
    print_kv("height", std::to_string(a.height));
    print_kv("steps", std::to_string(a.steps));
    print_kv("guidance", std::to_string(a.guidance));
    print_kv("seed", std::to_string(a.seed));
    print_kv("model-seed", std::to_string(a.model_seed));
    print_kv("preset", a.preset);
    print_kv("out", a.out);
    print_kv("dump-latents", a.dump_latents ? "true" : "false");

    if (a.preset == "flux-shape") {
        std::cerr << "sample: preset 'flux-shape' is inspect-only (weights would need ~95 GB); "
                     "use --preset toy\n";
        return kExitUsage;
    }

    rfx::PipelineRequest req;
    req.prompt = a.prompt;
    req.width = a.width;
    req.height = a.height;
    req.num_inference_steps = a.steps;
    req.guidance_scale = a.guidance;
    req.seed = a.seed;

    rfx::Model model = rfx::Model::init(preset_config(a.preset), a.model_seed);
    rfx::SampleTrace trace;
    rfx::Tensor latent = rfx::sample(req, model, a.dump_latents ? &trace : nullptr);

    rfx::ImageU8 img = rfx::stub_decode(latent);
    rfx::write_ppm(img, a.out);
    rfx::write_manifest(req, RFX_BUILD_ID, a.out + ".manifest");
    if (a.dump_latents) rfx::save_tensors(a.out + ".latents.rfxw", trace.step_latents);

    const rfx::TimeGrid grid = rfx::make_time_grid(a.steps);
    std::printf("sampled %" PRId64 "x%" PRId64 " in %d steps (noise-level %.3f -> 0)\n", a.width,
                a.height, a.steps, 1.0 - grid.times.front());
    std::printf("wrote %s and %s.manifest\n", a.out.c_str(), a.out.c_str());
    return kExitOk;
}

// ===== train-toy =====

struct TrainArgs {
    std::string dataset = "gaussian";
    int64_t steps = 5000;
    double lr = 2e-3;
    int64_t batch = 256;
    int64_t warmup = 1000;
    uint64_t seed = 1;
    double mu_x = 3.0;
    double mu_y = 0.0;
    double sigma = 1.0;
    int mixture_k = 4;
    int64_t eval_samples = 2048;
    int eval_steps = 32;
    std::string out = "train_report.csv";
};

int run_train_toy(const TrainArgs& a) {
    print_kv("command", "train-toy");
    print_kv("dataset", a.dataset);
    print_kv("steps", std::to_string(a.steps));
    print_kv("lr", std::to_string(a.lr));
    print_kv("batch", std::to_string(a.batch));
    print_kv("warmup", std::to_string(a.warmup));
    print_kv("seed", std::to_string(a.seed));
    print_kv("out", a.out);

    rfx::ToyDataset dataset = rfx::ToyDataset::gaussian(a.mu_x, a.mu_y, a.sigma);
    if (a.dataset == "two-moons") dataset = rfx::ToyDataset::two_moons();
    else if (a.dataset == "mixture") dataset = rfx::ToyDataset::mixture(a.mixture_k);

    rfx::Rng init_rng = rfx::Rng(a.seed).fork("toy-net-init");
    rfx::ToyVelocityNet net = rfx::ToyVelocityNet::init(init_rng);

    rfx::TrainConfig cfg;
    cfg.steps = a.steps;
    cfg.lr = a.lr;
    cfg.batch = a.batch;
    cfg.warmup_steps = a.warmup;
    cfg.seed = a.seed;

    rfx::TrainReport report = rfx::train(dataset, net, cfg);
    rfx::EvalResult eval = rfx::generate_and_score(net, a.eval_samples, a.eval_steps,
                                                   rfx::Rng(a.seed).fork("toy-eval").seed());
    rfx::merge_eval(report, eval);
    rfx::write_train_report_csv(report, a.out);

    const auto n = static_cast<int64_t>(report.loss.size());
    const int64_t window = std::min<int64_t>(100, n);
    std::printf("loss %.4f -> %.4f over %" PRId64 " steps\n", report.window_mean(0, window),
                report.window_mean(n - window, n), a.steps);
    std::printf("endpoint mean (%.4f, %.4f), straightness %.5f\n", report.endpoint_mean[0],
                report.endpoint_mean[1], report.straightness);
    std::printf("wrote %s\n", a.out.c_str());
    return kExitOk;
}

// ===== inspect =====

int run_inspect(const std::string& preset) {
    print_kv("command", "inspect");
    print_kv("preset", preset);

    const rfx::ModelConfig cfg = preset_config(preset);
    const int64_t d = cfg.d_model;
    const int64_t hidden = cfg.hidden_width();
    const int64_t dh = cfg.d_head();

    std::printf("\narchitecture (%s)\n", preset.c_str());
    std::printf("  d_model=%" PRId64 "  n_heads=%d  d_head=%" PRId64 "\n", d, cfg.n_heads, dh);
    std::printf("  double blocks=%" PRId64 "  single blocks=%" PRId64 "\n", cfg.n_double,
                cfg.n_single);
    std::printf("  rope axes=(%" PRId64 ",%" PRId64 ",%" PRId64 ") theta=%.0f\n",
                cfg.rope.axis_dims[0], cfg.rope.axis_dims[1], cfg.rope.axis_dims[2],
                cfg.rope.theta);
    std::printf("  text tokens=%" PRId64 " x %" PRId64 "-d  pooled dim=%" PRId64
                "  packed latent features=%" PRId64 "\n",
                cfg.n_text_tokens, cfg.text_token_dim, cfg.pooled_dim, cfg.in_channels());

    const int64_t per_double = 2 * rfx::linear_param_count(d, 6 * d) +
                               2 * (4 * rfx::linear_param_count(d, d) + 2 * dh) +
                               2 * (rfx::linear_param_count(d, hidden) +
                                    rfx::linear_param_count(hidden, d));
    const int64_t per_single = rfx::linear_param_count(d, 3 * d) +
                               3 * rfx::linear_param_count(d, d) + 2 * dh +
                               rfx::linear_param_count(d, hidden) +
                               rfx::linear_param_count(d + hidden, d);
    const int64_t inputs = rfx::linear_param_count(cfg.in_channels(), d) +
                           rfx::linear_param_count(cfg.text_token_dim, d);
    const int64_t embedders = 2 * (rfx::linear_param_count(cfg.sinusoidal_dim, d) +
                                   rfx::linear_param_count(d, d)) +
                              rfx::linear_param_count(cfg.pooled_dim, d) +
                              rfx::linear_param_count(d, d);
    const int64_t final_layer =
        rfx::linear_param_count(d, 2 * d) + rfx::linear_param_count(d, cfg.in_channels());

    std::printf("\n%-22s %8s %16s  %s\n", "stage", "count", "params", "notes");
    std::printf("%-22s %8d %16" PRId64 "  %s\n", "input projections", 2, inputs,
                "per-domain linears into shared width");
    std::printf("%-22s %8d %16" PRId64 "  %s\n", "guidance embedders", 3, embedders,
                "timestep + guidance (sinusoidal) + pooled prompt, summed");
    std::printf("%-22s %8" PRId64 " %16" PRId64 "  %s\n", "double-stream blocks", cfg.n_double,
                cfg.n_double * per_double,
                "separate text/image weights, sequential attn then mlp");
    std::printf("%-22s %8" PRId64 " %16" PRId64 "  %s\n", "single-stream blocks", cfg.n_single,
                cfg.n_single * per_single,
                "shared weights, parallel attn+mlp, fused output");
    std::printf("%-22s %8d %16" PRId64 "  %s\n", "final layer", 1, final_layer,
                "modulated norm + linear head to packed features");

    const int64_t total = rfx::count_params(cfg);
    std::printf("\ntotal params: %" PRId64 " (%.2fB)\n", total,
                static_cast<double>(total) / 1e9);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rfx: configurable-scale rectified-flow transformer sampler and toy trainer"};
    app.require_subcommand(1);

    SampleArgs sa;
    CLI::App* sample_cmd = app.add_subcommand("sample", "run the sampling pipeline, write a PPM");
    sample_cmd->set_config("--config", "", "key=value config file; command-line flags win");
    sample_cmd->add_option("--prompt", sa.prompt, "text prompt for the stub encoders");
    sample_cmd->add_option("--width", sa.width, "output width in pixels (multiple of 16)");
    sample_cmd->add_option("--height", sa.height, "output height in pixels (multiple of 16)");
    sample_cmd->add_option("--steps", sa.steps, "Euler steps");
    sample_cmd->add_option("--guidance", sa.guidance, "conditioning-strength scalar");
    sample_cmd->add_option("--seed", sa.seed, "noise seed");
    sample_cmd->add_option("--model-seed", sa.model_seed, "weight-init seed");
    sample_cmd->add_option("--out", sa.out, "output PPM path");
    sample_cmd->add_option("--preset", sa.preset, "model preset")
        ->check(CLI::IsMember({"toy", "flux-shape"}));
    sample_cmd->add_flag("--dump-latents", sa.dump_latents,
                         "also write per-step latents beside the output");

    TrainArgs ta;
    CLI::App* train_cmd = app.add_subcommand("train-toy", "train the 2-d toy velocity net");
    train_cmd->set_config("--config", "", "key=value config file; command-line flags win");
    train_cmd->add_option("--dataset", ta.dataset, "target distribution")
        ->check(CLI::IsMember({"gaussian", "two-moons", "mixture"}));
    train_cmd->add_option("--steps", ta.steps, "optimizer steps");
    train_cmd->add_option("--lr", ta.lr, "Adam learning rate");
    train_cmd->add_option("--batch", ta.batch, "batch size");
    train_cmd->add_option("--warmup", ta.warmup, "linear lr warmup steps");
    train_cmd->add_option("--seed", ta.seed, "run seed");
    train_cmd->add_option("--mu-x", ta.mu_x, "gaussian mean x");
    train_cmd->add_option("--mu-y", ta.mu_y, "gaussian mean y");
    train_cmd->add_option("--sigma", ta.sigma, "gaussian std");
    train_cmd->add_option("--mixture-k", ta.mixture_k, "mixture component count");
    train_cmd->add_option("--eval-samples", ta.eval_samples, "endpoint samples after training");
    train_cmd->add_option("--eval-steps", ta.eval_steps, "Euler steps for evaluation");
    train_cmd->add_option("--out", ta.out, "CSV report path");

    std::string inspect_preset = "toy";
    CLI::App* inspect_cmd = app.add_subcommand("inspect", "print architecture and param count");
    inspect_cmd->set_config("--config", "", "key=value config file; command-line flags win");
    inspect_cmd->add_option("--preset", inspect_preset, "model preset")
        ->check(CLI::IsMember({"toy", "flux-shape"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*sample_cmd) return run_sample(sa);
        if (*train_cmd) return run_train_toy(ta);
        if (*inspect_cmd) return run_inspect(inspect_preset);
    } catch (const rfx::divergence_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitUsage;
}
