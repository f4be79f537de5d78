// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/splat.hpp"

#include "lito/binary_io.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>

using namespace lito;
using namespace lito::splat;

namespace {

scene::Camera front_camera(int res) { return scene::Camera::look_at({0, 0, 3.5}, {0, 0, 0}, {0, 1, 0}, 40, res, res); }

Gaussian random_gaussian(Rng& rng, double opacity_hi = 0.95) {
    Gaussian g;
    g.position = {uniform01(rng) - 0.5, uniform01(rng) - 0.5, uniform01(rng) - 0.5};
    g.scale = {0.03 + 0.1 * uniform01(rng), 0.03 + 0.1 * uniform01(rng), 0.03 + 0.1 * uniform01(rng)};
    g.rotation = {normal01(rng), normal01(rng), normal01(rng), normal01(rng)};
    g.opacity = 0.2 + (opacity_hi - 0.2) * uniform01(rng);
    for (auto& ch : g.sh)
        for (int i = 0; i < kShCoeffs; ++i) ch[i] = (i == 0 ? 0.8 : 0.25) * normal01(rng);
    return g;
}

std::vector<Gaussian> random_set(Rng& rng, int n, double opacity_hi = 0.95) {
    std::vector<Gaussian> out;
    for (int i = 0; i < n; ++i) out.push_back(random_gaussian(rng, opacity_hi));
    return out;
}

// Fixed random weighting of the rgba output, to turn a render into a scalar.
ad::Tensor weights_for(const ad::Shape& shape, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(ad::shape_numel(shape));
    for (auto& v : w) v = uniform01(rng);
    return ad::Tensor::from(shape, w);
}

// || analytic - numeric || / || numeric || over a whole parameter tensor.
double class_error(const std::function<double()>& f, ad::Tensor& x, const std::vector<double>& analytic, double h) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double n = ad::central_difference(f, x, i, h);
        num += (analytic[i] - n) * (analytic[i] - n);
        den += n * n;
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

} // namespace

TEST(ShBasis, ConstantsAndPadding) {
    for (const Vec3& d : {Vec3{0, 0, 1}, normalized(Vec3{1, -2, 0.5})}) {
        const auto b = sh_basis(3, d);
        EXPECT_NEAR(b[0], 1.0 / (2.0 * std::sqrt(std::numbers::pi)), 1e-15);
        const auto b0 = sh_basis(0, d);
        for (int i = 1; i < kShCoeffs; ++i) EXPECT_EQ(b0[i], 0.0);
        const auto b1 = sh_basis(1, d);
        for (int i = 4; i < kShCoeffs; ++i) EXPECT_EQ(b1[i], 0.0);
    }
    EXPECT_THROW(sh_basis(4, {0, 0, 1}), Error);
}

TEST(ShBasis, MonteCarloOrthonormality) {
    Rng rng(17);
    const int n = 100000;
    std::array<std::array<double, kShCoeffs>, kShCoeffs> gram{};
    for (int s = 0; s < n; ++s) {
        const Vec3 d = normalized(Vec3{normal01(rng), normal01(rng), normal01(rng)});
        const auto b = sh_basis(3, d);
        for (int i = 0; i < kShCoeffs; ++i)
            for (int j = 0; j < kShCoeffs; ++j) gram[i][j] += b[i] * b[j];
    }
    double worst = 0;
    for (int i = 0; i < kShCoeffs; ++i)
        for (int j = 0; j < kShCoeffs; ++j)
            worst = std::max(worst, std::abs(gram[i][j] * 4 * std::numbers::pi / n - (i == j ? 1.0 : 0.0)));
    EXPECT_LT(worst, 2e-2);
}

TEST(GaussianColor, Anchors) {
    Gaussian g;
    EXPECT_EQ(gaussian_color(g, {1, 2, 3}, 3), (Vec3{0.5, 0.5, 0.5}));
    g.sh[1][0] = 0.5 / kY00;
    EXPECT_NEAR(gaussian_color(g, {1, 2, 3}, 0).y, 1.0, 1e-12);
    Rng rng(3);
    const Gaussian r = random_gaussian(rng);
    const Vec3 a = gaussian_color(r, {0, 0, 3}, 0), b = gaussian_color(r, {3, -1, 0}, 0);
    EXPECT_EQ(a, b);
    EXPECT_NE(gaussian_color(r, {0, 0, 3}, 3), gaussian_color(r, {3, -1, 0}, 3));
}

TEST(Covariance, MatchesIndependentRoutine) {
    const Mat3 d = covariance3d({0.1, 0.2, 0.3}, {1, 0, 0, 0});
    EXPECT_NEAR(d[0], 0.01, 1e-15);
    EXPECT_NEAR(d[4], 0.04, 1e-15);
    EXPECT_NEAR(d[8], 0.09, 1e-15);
    EXPECT_EQ(d[1], 0.0);
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
        const Gaussian g = random_gaussian(rng);
        const Mat3 s = covariance3d(g.scale, g.rotation);
        Eigen::Quaterniond q(g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]);
        q.normalize();
        const Eigen::Matrix3d R = q.toRotationMatrix();
        const Eigen::Matrix3d S = Eigen::Vector3d(g.scale.x, g.scale.y, g.scale.z).asDiagonal();
        const Eigen::Matrix3d ref = R * S * S.transpose() * R.transpose();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                EXPECT_NEAR(s[i * 3 + j], ref(i, j), 1e-14);
                EXPECT_NEAR(s[i * 3 + j], s[j * 3 + i], 1e-12);
            }
        Eigen::Matrix3d m;
        for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = s[i];
        EXPECT_GT(Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(m).eigenvalues().minCoeff(), 0.0);
    }
}

TEST(Project, OnAxisClosedForm) {
    const auto cam = front_camera(64);
    Gaussian g;
    g.position = {0, 0, 0.5};
    g.scale = {0.02, 0.02, 0.02};
    const auto p = project(g, cam);
    ASSERT_TRUE(p);
    EXPECT_NEAR(p->mean[0], 32.0, 1e-12);
    EXPECT_NEAR(p->mean[1], 32.0, 1e-12);
    EXPECT_NEAR(p->depth, 3.0, 1e-12);
    const double f = cam.intrinsics.fx;
    EXPECT_NEAR(p->cov[0], std::pow(f * 0.02 / 3.0, 2) + 0.3, 1e-10);
    EXPECT_NEAR(p->cov[2], std::pow(f * 0.02 / 3.0, 2) + 0.3, 1e-10);
    EXPECT_NEAR(p->cov[1], 0.0, 1e-12);
    g.position = {0, 0, 4};
    EXPECT_FALSE(project(g, cam));
}

TEST(Rasterize, SingleBlobPeaksAtCentre) {
    const auto cam = front_camera(33);
    Gaussian g;
    g.scale = {0.1, 0.1, 0.1};
    g.opacity = 0.9;
    for (auto& ch : g.sh) ch[0] = 0.5 / kY00;
    const auto r = rasterize({g}, cam, 0);
    auto at = [&](int x, int y) { return r.rgb[(y * 33 + x) * 3]; };
    EXPECT_NEAR(at(16, 16), 0.9 * std::exp(-0.5 * 0.0), 1e-12);
    for (int x = 16; x < 32; ++x) EXPECT_GE(at(x, 16), at(x + 1, 16));
    for (int y = 16; y < 32; ++y) EXPECT_GE(at(16, y), at(16, y + 1));
    for (double a : r.alpha) {
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
    }
}

TEST(Rasterize, TransmittanceCut) {
    const auto cam = front_camera(16);
    std::vector<Gaussian> gs;
    for (int i = 0; i < 10; ++i) {
        Gaussian g;
        g.position = {0, 0, 0.5 - 0.01 * i};
        g.scale = {50, 50, 50}; // kernel ~1 across the image, so alpha clamps everywhere
        g.opacity = 1.0; // clamped to 0.99
        gs.push_back(g);
    }
    Gaussian back;
    back.position = {0, 0, -0.5};
    back.scale = {1, 1, 1};
    back.opacity = 1.0;
    for (auto& ch : back.sh) ch[0] = 0.5 / kY00;
    const auto front_only = rasterize(gs, cam, 0);
    gs.push_back(back);
    const auto with_back = rasterize(gs, cam, 0);
    for (std::size_t i = 0; i < with_back.rgb.size(); ++i)
        EXPECT_LT(std::abs(with_back.rgb[i] - front_only.rgb[i]), 1e-4);
}

TEST(Rasterize, EmptyIsBlack) {
    const auto r = rasterize({}, front_camera(8), 3);
    for (double v : r.rgb) EXPECT_EQ(v, 0.0);
    for (double v : r.alpha) EXPECT_EQ(v, 0.0);
}

TEST(Rasterize, AlphaIndependentOfDegreeAndReproducible) {
    Rng rng(5);
    const auto gs = random_set(rng, 60);
    const auto cam = front_camera(48);
    const auto r0 = rasterize(gs, cam, 0);
    const auto r3 = rasterize(gs, cam, 3);
    EXPECT_EQ(r0.alpha, r3.alpha);
    set_thread_count(3);
    const auto again = rasterize(gs, cam, 3);
    set_thread_count(1);
    EXPECT_EQ(again.rgb, r3.rgb);
}

TEST(RasterizeDiff, AgreesWithFastPath) {
    Rng rng(99);
    const auto cams = scene::cameras_on_sphere(5, 3.5, 40, 64);
    for (int t = 0; t < 20; ++t) {
        const auto gs = random_set(rng, 40);
        const auto& cam = cams[static_cast<std::size_t>(t) % cams.size()];
        for (int deg : {0, 3}) {
            const auto fast = rasterize(gs, cam, deg);
            const auto slow = to_render(rasterize_diff(to_tensors(gs), cam, deg));
            double worst = 0;
            for (std::size_t i = 0; i < fast.rgb.size(); ++i) worst = std::max(worst, std::abs(fast.rgb[i] - slow.rgb[i]));
            for (std::size_t i = 0; i < fast.alpha.size(); ++i)
                worst = std::max(worst, std::abs(fast.alpha[i] - slow.alpha[i]));
            EXPECT_LT(worst, 1e-5);
        }
    }
}

TEST(RasterizeDiff, CapIsEnforced) {
    Rng rng(1);
    EXPECT_THROW(rasterize_diff(to_tensors(random_set(rng, 2)), front_camera(129), 0), Error);
}

TEST(RasterizeDiff, FiniteDifferencePerParameterClass) {
    Rng rng(12);
    const auto gs = random_set(rng, 6);
    const auto cam = scene::Camera::look_at({0.4, 0.3, 3.5}, {0, 0, 0}, {0, 1, 0}, 40, 24, 24);
    GaussianTensors gt = to_tensors(gs, true);
    const ad::Tensor w = weights_for({24, 24, 4}, 3);
    auto loss = [&] { return ad::sum(rasterize_diff(gt, cam, 3) * w); };
    {
        ad::Graph graph;
        graph.backward(loss());
    }
    auto value = [&] {
        ad::NoGradScope ng;
        return loss().item();
    };
    const std::vector<std::pair<const char*, ad::Tensor*>> classes{
        {"position", &gt.position}, {"scale", &gt.scale}, {"rotation", &gt.rotation},
        {"opacity", &gt.opacity},   {"sh", &gt.sh}};
    for (auto& [name, t] : classes) {
        ASSERT_TRUE(t->has_grad()) << name;
        const std::vector<double> analytic(t->grad().begin(), t->grad().end());
        EXPECT_LT(class_error(value, *t, analytic, 1e-6), 1e-3) << name;
    }
}

TEST(RasterizeDiff, DcGradientMatchesFiniteDifference) {
    Rng rng(21);
    const auto gs = random_set(rng, 12);
    const auto cam = front_camera(32);
    GaussianTensors gt = to_tensors(gs, true);
    auto mean_pixel = [&] { return ad::mean(ad::slice(rasterize_diff(gt, cam, 3), 2, 0, 3)); };
    {
        ad::Graph graph;
        graph.backward(mean_pixel());
    }
    for (std::size_t g = 0; g < gs.size(); ++g) {
        const std::size_t idx = g * 3 * kShCoeffs; // red DC
        const double analytic = gt.sh.grad()[idx];
        const double numeric = ad::central_difference(
            [&] {
                ad::NoGradScope ng;
                return mean_pixel().item();
            },
            gt.sh, idx, 1e-6);
        EXPECT_LT(std::abs(analytic - numeric), 1e-4 * std::max(std::abs(numeric), 1e-3)) << g;
    }
}

TEST(RasterizeDiff, OccludedGaussianGetsNoGradient) {
    std::vector<Gaussian> gs(2);
    gs[0].position = {0, 0, 0.5};
    gs[0].scale = {2, 2, 2};
    gs[0].opacity = 1.0;
    for (int i = 0; i < 12; ++i) gs.push_back(gs[0]);
    gs[1].position = {0, 0, -0.5};
    gs[1].scale = {0.05, 0.05, 0.05};
    gs[1].opacity = 0.8;
    GaussianTensors gt = to_tensors(gs, true);
    ad::Graph graph;
    graph.backward(ad::sum(rasterize_diff(gt, front_camera(16), 0)));
    for (int k = 0; k < 3; ++k) EXPECT_LT(std::abs(gt.position.grad()[3 + k]), 1e-9);
    EXPECT_LT(std::abs(gt.opacity.grad()[1]), 1e-9);
}

TEST(Composite, FiniteDifference) {
    Rng rng(4);
    const std::size_t n = 5;
    std::vector<double> m, q, o, c;
    std::vector<std::array<double, 2>> radius;
    for (std::size_t i = 0; i < n; ++i) {
        m.push_back(4 + 8 * uniform01(rng));
        m.push_back(4 + 8 * uniform01(rng));
        const double sx = 1.5 + 2 * uniform01(rng), sy = 1.5 + 2 * uniform01(rng), rho = 0.6 * uniform01(rng) - 0.3;
        const double a = sx * sx, b = rho * sx * sy, cc = sy * sy, det = a * cc - b * b;
        q.insert(q.end(), {cc / det, -b / det, a / det});
        radius.push_back({6 * sx, 6 * sy});
        o.push_back(0.3 + 0.6 * uniform01(rng));
        for (int k = 0; k < 3; ++k) c.push_back(uniform01(rng));
    }
    ad::Tensor tm = ad::Tensor::from({n, 2}, m, true), tq = ad::Tensor::from({n, 3}, q, true),
               to = ad::Tensor::from({n}, o, true), tc = ad::Tensor::from({n, 3}, c, true);
    const std::vector<std::size_t> order{3, 0, 4, 1, 2};
    const ad::Tensor w = weights_for({16, 16, 4}, 8);
    auto loss = [&] { return ad::sum(composite(tm, tq, to, tc, order, radius, 16, 16) * w); };
    {
        ad::Graph graph;
        graph.backward(loss());
    }
    auto value = [&] {
        ad::NoGradScope ng;
        return loss().item();
    };
    for (ad::Tensor* t : {&tm, &tq, &to, &tc}) {
        const std::vector<double> analytic(t->grad().begin(), t->grad().end());
        EXPECT_LT(class_error(value, *t, analytic, 1e-6), 1e-6);
    }
}

TEST(Ply, RoundTrip) {
    Rng rng(2);
    const auto gs = random_set(rng, 7);
    const auto path = (std::filesystem::temp_directory_path() / "lito_splat.ply").string();
    write_ply(path, gs);
    EXPECT_GT(std::filesystem::file_size(path), 7u * 62 * 4);
    const auto back = read_ply(path);
    ASSERT_EQ(back.size(), gs.size());
    for (std::size_t i = 0; i < gs.size(); ++i) {
        EXPECT_NEAR(back[i].opacity, gs[i].opacity, 1e-6);
        EXPECT_NEAR(back[i].scale.y, gs[i].scale.y, 1e-6);
        EXPECT_NEAR(back[i].sh[2][15], gs[i].sh[2][15], 1e-6);
        EXPECT_NEAR(back[i].sh[1][0], gs[i].sh[1][0], 1e-6);
        EXPECT_NEAR(back[i].rotation[3], gs[i].rotation[3], 1e-6);
    }
    std::filesystem::resize_file(path, 50);
    EXPECT_THROW(read_ply(path), FormatError);
}
