// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/cli.hpp"

#include "lito/image_io.hpp"
#include "lito/lightfield.hpp"
#include "lito/splat.hpp"

#include <json.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace lito;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# tiny model for tests
k = 8
d = 4
df = 8
mlp = 16
heads = 2
dec_heads = 2
enc_self_layers = 1
enc_voxel_res = 2
grid_res = 4
gaussians_per_voxel = 2
time_dim = 8
batch_points = 64
input_points = 128
views_per_step = 2
render_resolution = 32
total_steps = 4
checkpoint_every = 2
)";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int lito_run(std::vector<std::string> args) {
    args.insert(args.begin(), "lito");
    return cli::run(args);
}

class CliPipeline : public ::testing::Test {
protected:
    static fs::path root;

    static void SetUpTestSuite() {
        root = fs::temp_directory_path() / "lito_cli_test";
        fs::remove_all(root);
        fs::create_directories(root);
        std::ofstream(root / "tiny.cfg") << kTinyConfig;
        // the same pipeline twice, into a and b
        for (const char* run : {"a", "b"}) {
            const fs::path r = root / run;
            ASSERT_EQ(lito_run({"--seed", "3", "render-dataset", "--views", "4", "--res", "32", "--surface-points",
                                "2000", "--out", (r / "ds").string()}),
                      0);
            ASSERT_EQ(lito_run({"--seed", "3", "train", "--config", (root / "tiny.cfg").string(), "--data",
                                (r / "ds").string(), "--out", (r / "run").string(), "--quiet"}),
                      0);
            ASSERT_EQ(lito_run({"--seed", "3", "encode", "--ckpt", (r / "run/checkpoint.litc").string(), "--data",
                                (r / "ds").string(), "--n-input", "128", "--out", (r / "lat.lit").string()}),
                      0);
            ASSERT_EQ(lito_run({"--seed", "3", "sample-geometry", "--ckpt", (r / "run/checkpoint.litc").string(),
                                "--latent", (r / "lat.lit").string(), "--steps", "8", "--n", "300", "--out",
                                (r / "pred/points.pts").string()}),
                      0);
            ASSERT_EQ(lito_run({"--seed", "3", "decode", "--ckpt", (r / "run/checkpoint.litc").string(), "--latent",
                                (r / "lat.lit").string(), "--steps", "8", "--n", "300", "--out",
                                (r / "g.ply").string()}),
                      0);
            ASSERT_EQ(lito_run({"render", "--splats", (r / "g.ply").string(), "--camera",
                                (r / "ds/cameras.txt").string(), "--all", "--out", (r / "pred").string()}),
                      0);
            ASSERT_EQ(lito_run({"eval", "--gt", (r / "ds").string(), "--pred", (r / "pred").string(), "--report",
                                (r / "report.json").string(), "--latent", (r / "lat.lit").string()}),
                      0);
        }
    }
    static void TearDownTestSuite() { fs::remove_all(root); }
};

fs::path CliPipeline::root;

} // namespace

TEST_F(CliPipeline, EverySubcommandIsReproducible) {
    for (const char* f : {"ds/lightfield.slf", "ds/cameras.txt", "ds/view_000.rgbd", "ds/surface.pts",
                          "run/checkpoint.litc", "run/state.bin", "lat.lit", "pred/points.pts", "g.ply",
                          "pred/view_001.raw", "report.json"}) {
        const std::string a = slurp(root / "a" / f), b = slurp(root / "b" / f);
        EXPECT_FALSE(a.empty()) << f;
        EXPECT_EQ(a, b) << f;
    }
}

TEST_F(CliPipeline, SeedChangesStochasticOutputs) {
    const fs::path r = root / "a";
    ASSERT_EQ(lito_run({"--seed", "4", "encode", "--ckpt", (r / "run/checkpoint.litc").string(), "--data",
                        (r / "ds").string(), "--n-input", "128", "--out", (root / "lat4.lit").string()}),
              0);
    EXPECT_NE(slurp(root / "lat4.lit"), slurp(r / "lat.lit"));
}

TEST_F(CliPipeline, EvalOfIdenticalDirectories) {
    const fs::path r = root / "a";
    ASSERT_EQ(lito_run({"eval", "--gt", (r / "ds").string(), "--pred", (r / "ds").string(), "--report",
                        (root / "same.json").string()}),
              0);
    const auto j = nlohmann::json::parse(slurp(root / "same.json"));
    EXPECT_EQ(j["psnr_mean"].get<double>(), 99.0);
    EXPECT_NEAR(j["ssim_mean"].get<double>(), 1.0, 1e-12);
    EXPECT_EQ(j["chamfer"].get<double>(), 0.0);
    EXPECT_EQ(j["views"].get<int>(), 4);

    const auto rep = nlohmann::json::parse(slurp(r / "report.json"));
    EXPECT_LT(rep["psnr_mean"].get<double>(), 99.0);
    EXPECT_TRUE(rep["chamfer"].is_number());
    EXPECT_GT(rep["latent_std"].get<double>(), 0.0);
}

TEST_F(CliPipeline, ResumedTrainingMatches) {
    const fs::path r = root / "a";
    const fs::path out = root / "resumed";
    ASSERT_EQ(lito_run({"--seed", "3", "train", "--config", (root / "tiny.cfg").string(), "--data",
                        (r / "ds").string(), "--out", out.string(), "--steps", "2", "--quiet"}),
              0);
    ASSERT_EQ(lito_run({"--seed", "3", "train", "--config", (root / "tiny.cfg").string(), "--data",
                        (r / "ds").string(), "--out", out.string(), "--quiet"}),
              0);
    EXPECT_EQ(slurp(out / "checkpoint.litc"), slurp(r / "run/checkpoint.litc"));
}

TEST_F(CliPipeline, ExitCodes) {
    const fs::path r = root / "a";
    EXPECT_EQ(lito_run({"render-dataset", "--views", "0", "--out", (root / "x").string()}), cli::kExitUsage);
    EXPECT_EQ(lito_run({"render-dataset", "--views", "2", "--scene", (root / "missing.txt").string(), "--out",
                        (root / "x").string()}),
              cli::kExitIo);
    std::ofstream(root / "bad_scene.txt") << "sphere 0 0 oops\n";
    EXPECT_EQ(lito_run({"render-dataset", "--scene", (root / "bad_scene.txt").string(), "--out",
                        (root / "x").string()}),
              cli::kExitUsage);
    EXPECT_EQ(lito_run({"encode", "--ckpt", (r / "run/checkpoint.litc").string(), "--data", (r / "ds").string(),
                        "--n-input", "4", "--out", (root / "l.lit").string()}),
              cli::kExitUsage);
    EXPECT_EQ(lito_run({"render", "--splats", (root / "nope.ply").string(), "--camera",
                        (r / "ds/cameras.txt").string(), "--out", (root / "o.png").string()}),
              cli::kExitIo);
    EXPECT_EQ(lito_run({"render", "--splats", (r / "g.ply").string(), "--camera", (r / "ds/cameras.txt").string(),
                        "--sh-deg", "4", "--out", (root / "o.png").string()}),
              cli::kExitUsage);
    EXPECT_EQ(lito_run({"sample-geometry", "--ckpt", (r / "run/checkpoint.litc").string(), "--latent",
                        (r / "lat.lit").string(), "--sampler", "rk4", "--out", (root / "p.pts").string()}),
              cli::kExitUsage);
    std::ofstream(root / "bad.cfg") << "kl_weight = 0\nlearning_rate = 1\n";
    EXPECT_EQ(lito_run({"train", "--config", (root / "bad.cfg").string(), "--data", (r / "ds").string(), "--out",
                        (root / "t").string()}),
              cli::kExitUsage);
    EXPECT_EQ(lito_run({"render", "--frobnicate"}), cli::kExitUsage);
    EXPECT_EQ(lito_run({}), cli::kExitUsage);
    EXPECT_EQ(lito_run({"--help"}), cli::kExitOk);
    std::ofstream(root / "junk.lit") << "not a latent";
    EXPECT_EQ(lito_run({"decode", "--ckpt", (r / "run/checkpoint.litc").string(), "--latent",
                        (root / "junk.lit").string(), "--out", (root / "g.ply").string()}),
              cli::kExitIo);
}

TEST_F(CliPipeline, DegreeZeroRenderIsViewIndependent) {
    splat::Gaussian g;
    g.scale = {0.2, 0.1, 0.15};
    g.rotation = {0.9, 0.1, 0.3, 0.2};
    g.opacity = 0.8;
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < splat::kShCoeffs; ++k) g.sh[c][k] = 0.3 * std::sin(1.0 + c + 0.7 * k);
    splat::write_ply((root / "one.ply").string(), {g});
    lf::write_cameras((root / "two.txt").string(), scene::cameras_on_sphere(2, 3.0, 40, 32));
    std::vector<double> ratio[2][2]; // [sh degree][camera] -> rgb / alpha
    for (int deg : {0, 3})
        for (int cam = 0; cam < 2; ++cam) {
            const fs::path out = root / ("one_" + std::to_string(deg) + std::to_string(cam) + ".raw");
            ASSERT_EQ(lito_run({"render", "--splats", (root / "one.ply").string(), "--camera",
                                (root / "two.txt").string(), "--view", std::to_string(cam), "--sh-deg",
                                std::to_string(deg), "--out", out.string()}),
                      0);
            const RawImage img = read_raw(out.string());
            double best = 0;
            std::size_t at = 0;
            for (std::size_t p = 0; p < img.values.size() / 4; ++p)
                if (img.values[p * 4 + 3] > best) {
                    best = img.values[p * 4 + 3];
                    at = p;
                }
            for (int c = 0; c < 3; ++c)
                ratio[deg ? 1 : 0][cam].push_back(img.values[at * 4 + static_cast<std::size_t>(c)] / best);
        }
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(ratio[0][0][static_cast<std::size_t>(c)], ratio[0][1][static_cast<std::size_t>(c)], 1e-6);
    }
    double diff = 0;
    for (int c = 0; c < 3; ++c)
        diff += std::abs(ratio[1][0][static_cast<std::size_t>(c)] - ratio[1][1][static_cast<std::size_t>(c)]);
    EXPECT_GT(diff, 1e-3);
}
