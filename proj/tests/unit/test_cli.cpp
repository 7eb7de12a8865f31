// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <filesystem>
#include <unistd.h>

#include <catch2/catch_amalgamated.hpp>

#include "golden.hpp"
#include "rfx/transformer.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

fs::path work_dir() {
    fs::path p = fs::temp_directory_path() / ("rfx_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
}

RunResult run_cli(const std::string& args) {
    const fs::path dir = work_dir();
    const std::string out_path = (dir / "stdout.txt").string();
    const std::string err_path = (dir / "stderr.txt").string();
    const std::string cmd =
        std::string(RFX_CLI_PATH) + " " + args + " > " + out_path + " 2> " + err_path;
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = golden::read_file(out_path);
    r.err = golden::read_file(err_path);
    return r;
}

}  // namespace

TEST_CASE("sample subcommand writes a PPM and a manifest") {
    const fs::path dir = work_dir();
    const std::string out = (dir / "a.ppm").string();
    RunResult r = run_cli("sample --prompt \"x\" --width 64 --height 64 --steps 4 --seed 1 --out " +
                          out);
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(out));
    REQUIRE(fs::exists(out + ".manifest"));

    const std::string bytes = golden::read_file(out);
    REQUIRE(bytes.substr(0, 13) == "P6\n64 64\n255\n");
    REQUIRE(bytes.size() == 13 + 64 * 64 * 3);

    // the resolved configuration is echoed
    REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("prompt = x"));
    REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("steps = 4"));
}

TEST_CASE("sample runs are byte-identical for fixed flags") {
    const fs::path dir = work_dir();
    const std::string out1 = (dir / "r1.ppm").string();
    const std::string out2 = (dir / "r2.ppm").string();
    const std::string flags = "sample --prompt \"same\" --width 64 --height 64 --steps 3 --seed 9";
    REQUIRE(run_cli(flags + " --out " + out1).exit_code == 0);
    REQUIRE(run_cli(flags + " --out " + out2).exit_code == 0);
    REQUIRE(golden::read_file(out1) == golden::read_file(out2));

    std::string m1 = golden::read_file(out1 + ".manifest");
    std::string m2 = golden::read_file(out2 + ".manifest");
    REQUIRE(m1 == m2);
}

TEST_CASE("sample rejects bad geometry with exit 2") {
    const fs::path dir = work_dir();
    RunResult r = run_cli("sample --width 60 --height 64 --out " + (dir / "bad.ppm").string());
    REQUIRE(r.exit_code == 2);
    REQUIRE_THAT(r.err, Catch::Matchers::ContainsSubstring("multiples of 16"));
    REQUIRE_FALSE(fs::exists(dir / "bad.ppm"));
}

TEST_CASE("sample refuses the inspect-only preset") {
    const fs::path dir = work_dir();
    RunResult r =
        run_cli("sample --preset flux-shape --out " + (dir / "huge.ppm").string());
    REQUIRE(r.exit_code == 2);
    REQUIRE_THAT(r.err, Catch::Matchers::ContainsSubstring("inspect-only"));
}

TEST_CASE("sample IO failures exit 3") {
    RunResult r = run_cli("sample --out /nonexistent-dir/x.ppm");
    REQUIRE(r.exit_code == 3);
}

TEST_CASE("dump-latents writes one tensor per step") {
    const fs::path dir = work_dir();
    const std::string out = (dir / "dump.ppm").string();
    RunResult r = run_cli("sample --steps 3 --dump-latents --out " + out);
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(out + ".latents.rfxw"));
}

TEST_CASE("train-toy writes a CSV with one row per step") {
    const fs::path dir = work_dir();
    const std::string out = (dir / "t.csv").string();
    RunResult r = run_cli(
        "train-toy --dataset gaussian --steps 50 --batch 8 --eval-samples 64 --eval-steps 4 "
        "--out " +
        out);
    REQUIRE(r.exit_code == 0);
    std::istringstream is(golden::read_file(out));
    std::string line;
    std::getline(is, line);
    REQUIRE(line == "step,loss");
    int rows = 0;
    while (std::getline(is, line))
        if (!line.empty() && line[0] != '#') ++rows;
    REQUIRE(rows == 50);
}

TEST_CASE("train-toy with lr 0 keeps the loss column constant-in-law and reruns identical") {
    const fs::path dir = work_dir();
    const std::string out1 = (dir / "z1.csv").string();
    const std::string out2 = (dir / "z2.csv").string();
    const std::string flags =
        "train-toy --steps 30 --batch 8 --lr 0 --seed 12 --eval-samples 32 --eval-steps 4";
    REQUIRE(run_cli(flags + " --out " + out1).exit_code == 0);
    REQUIRE(run_cli(flags + " --out " + out2).exit_code == 0);
    REQUIRE(golden::read_file(out1) == golden::read_file(out2));
}

TEST_CASE("train-toy divergence exits 4") {
    const fs::path dir = work_dir();
    RunResult r = run_cli("train-toy --steps 400 --batch 8 --lr 2000 --warmup 0 --out " +
                          (dir / "d.csv").string());
    REQUIRE(r.exit_code == 4);
    REQUIRE_THAT(r.err, Catch::Matchers::ContainsSubstring("diverged"));
}

TEST_CASE("inspect reports the toy preset consistently with count_params") {
    RunResult r = run_cli("inspect --preset toy");
    REQUIRE(r.exit_code == 0);
    const std::string needle = "total params: ";
    const size_t at = r.out.find(needle);
    REQUIRE(at != std::string::npos);
    const int64_t printed = std::stoll(r.out.substr(at + needle.size()));
    REQUIRE(printed == rfx::count_params(rfx::ModelConfig::toy()));
}

TEST_CASE("inspect flux-shape lands in the expected bracket and is stable") {
    RunResult r = run_cli("inspect --preset flux-shape");
    REQUIRE(r.exit_code == 0);
    REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("d_model=3072"));
    REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("double blocks=19"));
    REQUIRE(r.out == golden::expect("inspect_flux_shape.txt", r.out));

    RunResult toy = run_cli("inspect --preset toy");
    REQUIRE(toy.out == golden::expect("inspect_toy.txt", toy.out));
}

TEST_CASE("unknown preset exits 2") {
    RunResult r = run_cli("inspect --preset enormous");
    REQUIRE(r.exit_code == 2);
}

TEST_CASE("config file sets flags, command line overrides") {
    const fs::path dir = work_dir();
    const std::string cfg_path = (dir / "run.cfg").string();
    golden::write_file(cfg_path,
                       "# defaults for smoke runs\n"
                       "steps = 30\n"
                       "batch = 8\n"
                       "lr = 0.001\n");
    const std::string out = (dir / "cfg.csv").string();
    RunResult r = run_cli("train-toy --config " + cfg_path + " --steps 12 --eval-samples 16 "
                          "--eval-steps 2 --out " + out);
    REQUIRE(r.exit_code == 0);
    REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("steps = 12"));   // flag wins
    REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("batch = 8"));    // file applies
    std::istringstream is(golden::read_file(out));
    std::string line;
    std::getline(is, line);
    int rows = 0;
    while (std::getline(is, line))
        if (!line.empty() && line[0] != '#') ++rows;
    REQUIRE(rows == 12);
}
