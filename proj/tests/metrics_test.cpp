// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/metrics.hpp"

#include <json.hpp>

#include <gtest/gtest.h>

#include <limits>

using namespace lito;
using namespace lito::metrics;

namespace {

std::vector<Vec3> uniform_points(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<Vec3> p(n);
    for (auto& v : p) v = Vec3{uniform01(rng), uniform01(rng), uniform01(rng)} * scale;
    return p;
}

double brute_nn(const std::vector<Vec3>& set, const Vec3& q) {
    double m = std::numeric_limits<double>::infinity();
    for (const Vec3& p : set) m = std::min(m, norm(p - q));
    return m;
}

ImageView view(const std::vector<double>& v, std::size_t w, std::size_t h, std::size_t c = 3) { return {v.data(), w, h, c}; }

} // namespace

TEST(NearestNeighbor, ScatteredAndDuplicates) {
    const NearestNeighbor nn({{0, 0, 0}, {1, 0, 0}, {0, 0, 5}, {0, 0, 5}});
    EXPECT_EQ(nn.distance({0, 0, 0}), 0.0);
    EXPECT_DOUBLE_EQ(nn.distance({0.75, 0, 0}), 0.25);
    EXPECT_DOUBLE_EQ(nn.distance({0, 0, 4}), 1.0);
    EXPECT_DOUBLE_EQ(nn.distance({0, 3, 5}), 3.0);
    EXPECT_DOUBLE_EQ(nn.distance({-10, 0, 0}), 10.0); // outside the box
    EXPECT_EQ(NearestNeighbor({{2, 2, 2}}).distance({2, 2, 2}), 0.0);
    EXPECT_THROW(NearestNeighbor({}), Error);
}

TEST(NearestNeighbor, MatchesBruteForceOnLargeSets) {
    Rng rng(1);
    const auto pts = uniform_points(10000, rng);
    const NearestNeighbor nn(pts);
    for (int i = 0; i < 500; ++i) {
        const Vec3 q{2.4 * uniform01(rng) - 0.7, 2.4 * uniform01(rng) - 0.7, 2.4 * uniform01(rng) - 0.7};
        ASSERT_DOUBLE_EQ(nn.distance(q), brute_nn(pts, q)) << i;
    }
    // clustered: a flat sheet plus a far outlier
    std::vector<Vec3> sheet;
    for (int i = 0; i < 3000; ++i) sheet.push_back({uniform01(rng), uniform01(rng), 1e-3 * uniform01(rng)});
    sheet.push_back({40, 40, 40});
    const NearestNeighbor ns(sheet);
    for (int i = 0; i < 300; ++i) {
        const Vec3 q{50 * uniform01(rng) - 5, 50 * uniform01(rng) - 5, 50 * uniform01(rng) - 5};
        ASSERT_DOUBLE_EQ(ns.distance(q), brute_nn(sheet, q)) << i;
    }
}

TEST(Chamfer, ExamplesAndProperties) {
    EXPECT_EQ(chamfer({{0, 0, 0}}, {{1, 0, 0}}), 2.0);
    Rng rng(2);
    const auto a = uniform_points(300, rng), b = uniform_points(200, rng);
    EXPECT_EQ(chamfer(a, a), 0.0);
    EXPECT_EQ(chamfer(a, b), chamfer(b, a));
    std::vector<Vec3> a3, b3;
    for (const Vec3& p : a) a3.push_back(p * 3.0);
    for (const Vec3& p : b) b3.push_back(p * 3.0);
    EXPECT_NEAR(chamfer(a3, b3), 3 * chamfer(a, b), 1e-12);
    EXPECT_THROW(chamfer({}, b), Error);
    EXPECT_THROW(chamfer(a, {}), Error);
}

TEST(Chamfer, MatchesBruteForce) {
    Rng rng(3);
    for (int inst = 0; inst < 100; ++inst) {
        const auto na = 1 + static_cast<std::size_t>(uniform01(rng) * 500);
        const auto nb = 1 + static_cast<std::size_t>(uniform01(rng) * 500);
        const auto a = uniform_points(na, rng, 1 + 3 * uniform01(rng));
        const auto b = uniform_points(nb, rng);
        EXPECT_NEAR(chamfer(a, b), chamfer_brute_force(a, b), 1e-9) << inst;
    }
}

TEST(Psnr, Examples) {
    const std::vector<double> black(12 * 12 * 3, 0.0), white(12 * 12 * 3, 1.0), grey(12 * 12 * 3, 0.1);
    EXPECT_EQ(psnr(view(black, 12, 12), view(black, 12, 12)), 99.0);
    EXPECT_EQ(psnr(view(black, 12, 12), view(white, 12, 12)), 0.0);
    EXPECT_NEAR(psnr(view(black, 12, 12), view(grey, 12, 12)), 20.0, 1e-12);
    EXPECT_THROW(psnr(view(black, 12, 12), view(white, 6, 24)), std::invalid_argument);
    // monotone in MSE
    double last = 1e9;
    for (double e : {0.01, 0.02, 0.1, 0.3, 0.9}) {
        const std::vector<double> x(12 * 12 * 3, e);
        const double p = psnr(view(black, 12, 12), view(x, 12, 12));
        EXPECT_LT(p, last);
        last = p;
    }
}

TEST(Ssim, Examples) {
    Rng rng(4);
    std::vector<double> a(20 * 16 * 3), neg(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = 0.5 + 0.4 * (2 * uniform01(rng) - 1);
        neg[i] = 1.0 - a[i];
    }
    EXPECT_NEAR(ssim(view(a, 20, 16), view(a, 20, 16)), 1.0, 1e-12);
    EXPECT_LT(ssim(view(a, 20, 16), view(neg, 20, 16)), 0.0);

    const std::vector<double> c1(16 * 16 * 3, 0.2), c2(16 * 16 * 3, 0.7);
    const double want = (2 * 0.2 * 0.7 + kSsimC1) / (0.04 + 0.49 + kSsimC1);
    EXPECT_NEAR(ssim(view(c1, 16, 16), view(c2, 16, 16)), want, 1e-9);
    EXPECT_LT(want, 1.0);

    const std::vector<double> small(10 * 30 * 3, 0.5);
    EXPECT_THROW(ssim(view(small, 30, 10), view(small, 30, 10)), std::invalid_argument);
    const auto w = ssim_window();
    double s = 0;
    for (double v : w) s += v;
    EXPECT_NEAR(s, 1.0, 1e-15);
    EXPECT_EQ(w[0], w[10]);
}

TEST(LatentStats, Examples) {
    nets::LatentSet z{ad::Tensor::zeros({4, 2}), {}};
    const auto s0 = latent_stats({z, z});
    EXPECT_EQ(s0.mean, 0.0);
    EXPECT_EQ(s0.std, 0.0);
    nets::LatentSet pm{ad::Tensor::from({2, 2}, {-1, 1, 1, -1}), {}};
    const auto s1 = latent_stats({pm});
    EXPECT_EQ(s1.mean, 0.0);
    EXPECT_EQ(s1.std, 1.0);
    EXPECT_THROW(latent_stats({}), Error);
}

TEST(EvalReport, MeansAndStableJson) {
    EvalReport r;
    r.psnr = {20, 30, 40};
    r.ssim = {0.5, 0.7, 0.9};
    r.chamfer = 0.125;
    r.has_chamfer = true;
    r.config = "k=64";
    r.finalize();
    EXPECT_EQ(r.psnr_mean, 30.0);
    EXPECT_NEAR(r.ssim_mean, 0.7, 1e-15);
    const auto j = nlohmann::ordered_json::parse(r.to_json());
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    EXPECT_EQ(keys, (std::vector<std::string>{"views", "psnr", "ssim", "psnr_mean", "ssim_mean", "chamfer",
                                              "latent_mean", "latent_std", "config"}));
    EXPECT_EQ(j["chamfer"].get<double>(), 0.125);
    EXPECT_EQ(r.to_json(), r.to_json());
}
