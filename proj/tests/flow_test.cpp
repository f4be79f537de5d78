// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/binary_io.hpp"
#include "lito/flow.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

using namespace lito;
using namespace lito::flow;
using ad::Tensor;

namespace {

// Spatially constant field a + b t.
VelocityFn affine_in_time(Vec3 a, Vec3 b) {
    return [a, b](const Tensor& x, const Tensor& t) {
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.dim(0); ++i)
            for (int c = 0; c < 3; ++c) out[i * 3 + static_cast<std::size_t>(c)] = a[c] + b[c] * t[i];
        return Tensor::from(x.shape(), std::move(out));
    };
}

double max_dist(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, norm(a[i] - b[i]));
    return m;
}

} // namespace

TEST(Interpolate, Examples) {
    const Tensor x = Tensor::from({3, 3}, {2, 0, 0, 1, 2, 3, 1, 2, 3});
    const Tensor e = Tensor::from({3, 3}, {0, 2, 0, -1, -1, -1, 5, 5, 5});
    const Tensor xt = interpolate(x, e, Tensor::from({3}, {0.5, 1.0, 0.0}));
    const std::vector<double> want{1, 1, 0, 1, 2, 3, 5, 5, 5};
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(xt[i], want[i]);
    EXPECT_THROW(interpolate(x, e, Tensor::from({2}, {0, 1})), std::invalid_argument);
}

TEST(GeoLoss, OracleAndZeroPredictor) {
    Rng rng(1);
    std::vector<Vec3> pts;
    for (int i = 0; i < 50; ++i) pts.push_back({uniform01(rng), uniform01(rng), uniform01(rng)});
    const FlowBatch b = make_batch(pts, rng);
    for (std::size_t i = 0; i < b.size(); ++i) {
        EXPECT_GE(b.t[i], 0.0);
        EXPECT_LE(b.t[i], 1.0);
    }
    const VelocityFn oracle = [&](const Tensor&, const Tensor&) { return b.x - b.eps; };
    EXPECT_EQ(geo_loss(oracle, b).item(), 0.0);

    const VelocityFn zero = [](const Tensor& x, const Tensor&) { return Tensor::zeros(x.shape()); };
    double want = 0;
    for (std::size_t i = 0; i < 50; ++i) {
        const Vec3 eps{b.eps[i * 3], b.eps[i * 3 + 1], b.eps[i * 3 + 2]};
        const Vec3 d = pts[i] - eps;
        want += dot(d, d);
    }
    EXPECT_NEAR(geo_loss(zero, b).item(), want / 50, 1e-13);
}

TEST(Samplers, OneEulerStepReachesTarget) {
    const Vec3 target{0.3, -0.2, 0.7};
    const Vec3 eps = initial_noise(1, 9)[0];
    const auto oracle = affine_in_time(target - eps, {0, 0, 0});
    EXPECT_LT(norm(sample_euler(oracle, 1, 1, 9)[0] - target), 1e-15);
    EXPECT_THROW(sample_euler(oracle, 1, 0, 9), Error);
    EXPECT_THROW(sample_heun(oracle, 1, 0, 9), Error);
}

TEST(Samplers, PathOracleRecoveredByAllSamplers) {
    // V = x* - eps holds all along the straight path eps -> x*.
    const Vec3 target{-0.4, 0.1, 0.25};
    const Vec3 eps = initial_noise(1, 4)[0];
    const auto oracle = affine_in_time(target - eps, {0, 0, 0});
    for (int steps : {1, 25, 100}) {
        EXPECT_LT(norm(sample_euler(oracle, 1, steps, 4)[0] - target), 1e-13) << steps;
        EXPECT_LT(norm(sample_heun(oracle, 1, steps, 4)[0] - target), 1e-13) << steps;
    }
}

TEST(Samplers, ConstantFieldHeunEqualsEuler) {
    const auto v = affine_in_time({0.5, -1.25, 2.0}, {0, 0, 0});
    const auto e = sample_euler(v, 40, 7, 3), h = sample_heun(v, 40, 7, 3);
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(e[i], h[i]);
}

TEST(Samplers, LinearInTimeHeunExactEulerFirstOrder) {
    const Vec3 a{0.2, -0.1, 0.4}, b{1.0, -2.0, 0.5};
    const auto v = affine_in_time(a, b);
    const auto start = initial_noise(16, 2);
    for (int n : {4, 8, 16}) {
        const auto h = sample_heun(v, 16, n, 2), e = sample_euler(v, 16, n, 2);
        for (std::size_t i = 0; i < 16; ++i) {
            // x(1) = x0 + a + b / 2; Euler's left sums miss b / (2n).
            const Vec3 exact = start[i] + a + b * 0.5;
            EXPECT_LT(norm(h[i] - exact), 1e-14);
            EXPECT_NEAR(norm(e[i] - exact), norm(b) / (2 * n), 1e-14);
        }
    }
}

TEST(Samplers, DeterministicAcrossThreadsAndChunks) {
    Rng rng(5);
    const nets::ModelConfig c = nets::toy_config();
    nets::Params p = nets::init_parameters(c, rng);
    for (double& v : p.at("vel.head.w").mutable_data()) v = 0.2 * normal01(rng);
    lf::SampleSet in;
    for (int i = 0; i < 200; ++i)
        in.samples.push_back({{uniform01(rng), uniform01(rng), uniform01(rng)}, {0, 0, 1}, {0.5, 0.5, 0.5}});
    const nets::LatentSet lat = nets::encode(p, c, in, rng);
    const VelocityFn v = network_velocity(p, c, lat);

    const int saved = thread_count();
    set_thread_count(1);
    const auto a = integrate(v, initial_noise(100, 11), Sampler::heun, 5, 100);
    set_thread_count(4);
    const auto b = integrate(v, initial_noise(100, 11), Sampler::heun, 5, 7);
    set_thread_count(saved);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);

    // nested seeds: the first n points are shared, so occupancy only grows
    SampleOptions opt{Sampler::euler, 4, 11};
    const auto small = estimate_occupancy_via_sampling(v, 50, 8, opt);
    const auto large = estimate_occupancy_via_sampling(v, 100, 8, opt);
    EXPECT_TRUE(std::includes(large.occupied.begin(), large.occupied.end(), small.occupied.begin(),
                              small.occupied.end()));
}

TEST(Occupancy, PointTargetGivesOneVoxel) {
    lf::OccupancyGrid g;
    g.resolution = 16;
    const Vec3 c = g.center({5, 9, 2});
    // Euler on V = (c - x) / (1 - t) lands on c at the last step.
    const VelocityFn v = [c](const Tensor& x, const Tensor& t) {
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.dim(0); ++i)
            for (int a = 0; a < 3; ++a)
                out[i * 3 + static_cast<std::size_t>(a)] = (c[a] - x[i * 3 + static_cast<std::size_t>(a)]) / (1 - t[i]);
        return Tensor::from(x.shape(), std::move(out));
    };
    const auto occ = estimate_occupancy_via_sampling(v, 500, 16, {Sampler::euler, 10, 3});
    ASSERT_EQ(occ.occupied.size(), 1u);
    EXPECT_EQ(occ.occupied[0], (std::array<int, 3>{5, 9, 2}));
}

TEST(Points, RoundTripAndErrors) {
    const auto dir = std::filesystem::temp_directory_path() / "lito_flow";
    std::filesystem::create_directories(dir);
    const auto pts = initial_noise(33, 1);
    const auto path = (dir / "p.pts").string();
    write_points(path, pts);
    EXPECT_EQ(std::filesystem::file_size(path), 12u + 33 * 12);
    const auto back = read_points(path);
    ASSERT_EQ(back.size(), 33u);
    EXPECT_LT(max_dist(back, pts), 1e-6);
    write_points(path, {});
    EXPECT_TRUE(read_points(path).empty());

    write_points(path, pts);
    std::filesystem::resize_file(path, 100);
    try {
        read_points(path);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.reason(), FormatError::Reason::truncated);
    }
    {
        std::ofstream(path) << "PTS2xxxxxxxx";
    }
    EXPECT_THROW(read_points(path), FormatError);
}
