// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/binary_io.hpp"
#include "lito/attnplan.hpp"
#include "lito/nets.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>

using namespace lito;
using namespace lito::nets;
using ad::Tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.k = 8;
    c.d = 4;
    c.df = 8;
    c.mlp = 16;
    c.heads = 2;
    c.dec_heads = 2;
    c.enc_self_layers = 2;
    c.enc_voxel_res = 2;
    c.gs_self_layers = 1;
    c.grid_res = 4;
    c.gaussians_per_voxel = 2;
    c.pe_x = {2, 0, 1};
    c.pe_rgb = {2, 0, 1};
    c.pe_time = {2, std::log2(2 * std::numbers::pi), std::log2(2 * std::numbers::pi) + 1};
    c.time_dim = 4;
    return c;
}

lf::SampleSet random_samples(std::size_t n, Rng& rng) {
    lf::SampleSet s;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 x{2 * uniform01(rng) - 1, 2 * uniform01(rng) - 1, 2 * uniform01(rng) - 1};
        const Vec3 d = normalized(Vec3{normal01(rng), normal01(rng), normal01(rng)});
        s.samples.push_back({x, d, {uniform01(rng), uniform01(rng), uniform01(rng)}});
    }
    return s;
}

// Heads start at zero; give them values so gradients reach every layer.
void randomize_heads(Params& p, Rng& rng) {
    for (const char* name : {"vel.head.w", "vel.head.b", "gs.head.w", "gs.head.b"})
        for (double& v : p.at(name).mutable_data()) v = 0.3 * normal01(rng);
}

// Worst relative FD error over a few well-conditioned coordinates of every
// parameter tensor, for the scalar loss(params).
double params_fd(const Params& p, const std::function<Tensor(const Params&)>& loss) {
    Params base = p;
    base.zero_grad();
    {
        ad::Graph g;
        g.backward(loss(base));
    }
    double worst = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        const Tensor& t = base.tensor(i);
        if (!t.has_grad()) continue;
        std::vector<std::size_t> coords;
        for (std::size_t j = 0; j < t.size() && coords.size() < 4; j += 1 + t.size() / 7)
            if (std::abs(t.grad()[j]) > 1e-6) coords.push_back(j);
        if (coords.empty()) continue;
        const std::string name = base.name(i);
        const double e = ad::finite_diff_check(
            [&](const Tensor& leaf) {
                Params q = base;
                q.at(name) = leaf;
                return loss(q);
            },
            t, 1e-4, coords);
        EXPECT_LT(e, 1e-4) << name;
        worst = std::max(worst, e);
    }
    return worst;
}

lf::OccupancyGrid small_grid() {
    lf::OccupancyGrid g;
    g.resolution = 4;
    g.occupied = {{0, 1, 2}, {1, 1, 1}, {2, 3, 0}, {3, 3, 3}, {3, 0, 1}};
    return g;
}

} // namespace

TEST(PosEncode, ZeroAndPaperWidths) {
    const PosEncSpec spec{32, 0, 12};
    const auto f = pos_encode({0.0}, spec);
    ASSERT_EQ(f.size(), 64u);
    for (int i = 0; i < 32; ++i) {
        EXPECT_EQ(f[static_cast<std::size_t>(i)], 0.0);
        EXPECT_EQ(f[32 + static_cast<std::size_t>(i)], 1.0);
    }
    EXPECT_EQ(pos_encode({0.1, 0.2, 0.3}, spec).size(), 192u);
    EXPECT_DOUBLE_EQ(spec.frequency(31), 4096.0);
    EXPECT_DOUBLE_EQ(spec.frequency(0), 1.0);

    const double m = std::log2(2 * std::numbers::pi);
    const PosEncSpec time{16, m, m + 15};
    EXPECT_NEAR(pos_encode({0.5}, time)[0], 0.0, 1e-12);
    EXPECT_NEAR(time.frequency(0), 2 * std::numbers::pi, 1e-12);
    EXPECT_DOUBLE_EQ(PosEncSpec({1, 2, 2}).frequency(0), 4.0);
}

TEST(PosEncode, TensorMatchesScalarForm) {
    const PosEncSpec spec{3, -1, 2};
    const Tensor x = Tensor::from({2, 2}, {0.3, -0.7, 1.1, 0.05});
    const Tensor e = pos_encode(x, spec);
    ASSERT_EQ(e.shape(), (ad::Shape{2, 12}));
    const auto row1 = pos_encode({1.1, 0.05}, spec);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(e[12 + i], row1[i]);
}

TEST(Plucker, Examples) {
    const auto a = plucker({1, 0, 0}, {0, 0, 1});
    EXPECT_EQ(a, (std::array<double, 6>{0, 0, 1, 0, -1, 0}));
    const auto b = plucker({0, 0, 0}, {0, 1, 0});
    EXPECT_EQ(b, (std::array<double, 6>{0, 1, 0, 0, 0, 0}));
    const Vec3 x{0.3, -0.2, 0.9}, d = normalized(Vec3{1, 2, -1});
    const auto p0 = plucker(x, d), p1 = plucker(x + d * 0.37, d);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(p0[i], p1[i], 1e-15);
}

TEST(Featurize, WidthsAndSlots) {
    EXPECT_EQ(paper_config().encoder_input_width(), 396u);
    EXPECT_EQ(paper_config().query_width(), 195u);
    EXPECT_EQ(paper_config().time_dim, 64);
    const ModelConfig toy = toy_config();
    EXPECT_EQ(toy.encoder_input_width(), 84u);
    const lf::LightFieldSample black{{0, 0, 0}, {0, 0, 1}, {0, 0, 0}};
    const auto f = featurize_input(black, toy);
    ASSERT_EQ(f.size(), 84u);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(f[static_cast<std::size_t>(i)], 0.0);
        EXPECT_EQ(f[51 + static_cast<std::size_t>(i)], 0.0);
    }
    lf::LightFieldSample a{{0.2, 0.1, -0.4}, {0, 0, 1}, {0.3, 0.6, 0.1}}, b = a;
    b.dir = normalized(Vec3{1, 1, 0});
    const auto fa = featurize_input(a, toy), fb = featurize_input(b, toy);
    for (std::size_t i = 0; i < fa.size(); ++i) {
        if (i < fa.size() - 6)
            EXPECT_EQ(fa[i], fb[i]);
        else
            EXPECT_NE(fa[i], fb[i]);
    }
}

TEST(Params, CountIsClosedFormAndInitDeterministic) {
    Rng r1(3), r2(3);
    const ModelConfig toy = toy_config();
    const Params a = init_parameters(toy, r1), b = init_parameters(toy, r2);
    EXPECT_EQ(a.scalar_count(), parameter_count(toy));
    EXPECT_EQ(parameter_count(toy), 347'939u);
    const ModelConfig tiny = tiny_config();
    Rng r3(1);
    EXPECT_EQ(init_parameters(tiny, r3).scalar_count(), parameter_count(tiny));
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_EQ(a.name(i), b.name(i));
        for (std::size_t j = 0; j < a.tensor(i).size(); ++j) ASSERT_EQ(a.tensor(i)[j], b.tensor(i)[j]);
    }
    for (double v : a.at("enc.in.b").data()) EXPECT_EQ(v, 0.0);
    for (double v : a.at("gs.head.w").data()) EXPECT_EQ(v, 0.0);
    // N(0, 1/fan_in) weights
    const Tensor& w = a.at("enc.self0.fc2.w");
    double ss = 0;
    for (double v : w.data()) ss += v * v;
    EXPECT_NEAR(ss / static_cast<double>(w.size()), 1.0 / toy.mlp, 0.1 / toy.mlp);
}

TEST(Config, RejectsBadValues) {
    ModelConfig c = toy_config();
    c.heads = 3;
    EXPECT_THROW(c.validate(), Error);
    ModelConfig d = toy_config();
    EXPECT_TRUE(apply_config_key(d, "k", "32"));
    EXPECT_EQ(d.k, 32);
    EXPECT_FALSE(apply_config_key(d, "bogus", "1"));
    EXPECT_THROW(apply_config_key(d, "k", "3x"), Error);
    EXPECT_THROW(apply_config_key(d, "offset_scale", "nan"), Error);
}

TEST(Encode, ToyShapeAndErrors) {
    Rng rng(5);
    const ModelConfig toy = toy_config();
    const Params p = init_parameters(toy, rng);
    const auto input = random_samples(300, rng);
    const LatentSet lat = encode(p, toy, input, rng);
    EXPECT_EQ(lat.tokens.shape(), (ad::Shape{64, 8}));
    EXPECT_EQ(lat.positions.size(), 64u);
    for (double v : lat.tokens.data()) EXPECT_TRUE(std::isfinite(v));
    EXPECT_THROW(encode(p, toy, random_samples(10, rng), rng), Error);
}

TEST(Encode, InvariantToInputOrder) {
    Rng rng(6);
    const ModelConfig c = tiny_config();
    const Params p = init_parameters(c, rng);
    const auto input = random_samples(120, rng);
    const auto q = plan::select_queries(input.count(), 8, rng);
    const LatentSet a = encode_with_queries(p, c, input, q);
    // Reverse the sample order and remap the query indices accordingly.
    lf::SampleSet rev = input;
    std::reverse(rev.samples.begin(), rev.samples.end());
    std::vector<std::size_t> q2;
    for (std::size_t i : q) q2.push_back(input.count() - 1 - i);
    const LatentSet b = encode_with_queries(p, c, rev, q2);
    for (std::size_t i = 0; i < a.tokens.size(); ++i) EXPECT_NEAR(a.tokens[i], b.tokens[i], 1e-12);
}

TEST(Velocity, ZeroAtInitAndPointwise) {
    Rng rng(7);
    const ModelConfig toy = toy_config();
    Params p = init_parameters(toy, rng);
    const LatentSet lat = encode(p, toy, random_samples(200, rng), rng);
    std::vector<double> xs, ts;
    for (int i = 0; i < 16; ++i) {
        xs.insert(xs.end(), {normal01(rng), normal01(rng), normal01(rng)});
        ts.push_back(uniform01(rng));
    }
    const Tensor x = Tensor::from({16, 3}, xs), t = Tensor::from({16}, ts);
    const Tensor v0 = velocity(p, toy, lat, x, t);
    for (double v : v0.data()) EXPECT_EQ(v, 0.0);

    randomize_heads(p, rng);
    const Tensor batch = velocity(p, toy, lat, x, t);
    for (std::size_t i = 0; i < 16; ++i) {
        const Tensor one = velocity(p, toy, lat, Tensor::from({1, 3}, {xs[i * 3], xs[i * 3 + 1], xs[i * 3 + 2]}),
                                    Tensor::from({1}, {ts[i]}));
        for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(one[k], batch[i * 3 + k]) << i;
    }
}

TEST(Decode, ActivationsAndCounts) {
    Rng rng(8);
    const ModelConfig c = tiny_config();
    const Params p = init_parameters(c, rng);
    const LatentSet lat = encode(p, c, random_samples(50, rng), rng);
    const auto grid = small_grid();
    const auto g = decode_gaussians(p, c, lat, grid);
    ASSERT_EQ(g.count(), 10u);
    for (std::size_t i = 0; i < g.count(); ++i) {
        const Vec3 ctr = grid.center(grid.occupied[i / 2]);
        for (int a = 0; a < 3; ++a) EXPECT_EQ(g.position[i * 3 + static_cast<std::size_t>(a)], ctr[a]);
        EXPECT_NEAR(g.scale[i * 3], std::exp(-3.0), 1e-15);
        EXPECT_EQ(g.rotation[i * 4], 1.0);
        EXPECT_EQ(g.opacity[i], 0.5);
    }
    // saturated offsets stay within s of the centre
    std::vector<double> raw(5 * 2 * 59);
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = (i % 59 < 3) ? 1e3 * (i % 2 ? 1 : -1) : 0.0;
    const auto sat = activate_gaussians(Tensor::from({5, 2, 59}, raw), c, grid);
    for (std::size_t i = 0; i < sat.count(); ++i) {
        const Vec3 ctr = grid.center(grid.occupied[i / 2]);
        for (int a = 0; a < 3; ++a)
            EXPECT_NEAR(std::abs(sat.position[i * 3 + static_cast<std::size_t>(a)] - ctr[a]), c.offset_scale, 1e-15);
    }
    EXPECT_THROW(decode_gaussians(p, c, lat, lf::OccupancyGrid{4, {}}), Error);
}

TEST(Gradients, EncoderFiniteDifference) {
    Rng rng(10);
    const ModelConfig c = tiny_config();
    Params p = init_parameters(c, rng);
    const auto input = random_samples(40, rng);
    const auto q = plan::select_queries(input.count(), 8, rng);
    const Tensor w = Tensor::from({8, 4}, [&] {
        std::vector<double> v(32);
        for (auto& e : v) e = normal01(rng);
        return v;
    }());
    EXPECT_LT(params_fd(p, [&](const Params& ps) { return ad::sum(encode_with_queries(ps, c, input, q).tokens * w); }),
              1e-4);
}

TEST(Gradients, VelocityFiniteDifference) {
    Rng rng(11);
    const ModelConfig c = tiny_config();
    Params p = init_parameters(c, rng);
    randomize_heads(p, rng);
    const auto input = random_samples(40, rng);
    const auto q = plan::select_queries(input.count(), 8, rng);
    const Tensor x = Tensor::from({5, 3}, {0.1, 0.2, 0.3, -0.5, 0.4, 0.0, 0.9, -0.9, 0.2, 0.0, 0.0, 0.0, 1.2, 0.3, -0.3});
    const Tensor t = Tensor::from({5}, {0.0, 0.25, 0.5, 0.75, 1.0});
    EXPECT_LT(params_fd(p,
                        [&](const Params& ps) {
                            const LatentSet lat = encode_with_queries(ps, c, input, q);
                            const Tensor v = velocity(ps, c, lat, x, t);
                            return ad::sum(v * v);
                        }),
              1e-4);
}

TEST(Gradients, GaussianDecoderFiniteDifference) {
    Rng rng(12);
    const ModelConfig c = tiny_config();
    Params p = init_parameters(c, rng);
    randomize_heads(p, rng);
    const auto input = random_samples(40, rng);
    const auto q = plan::select_queries(input.count(), 8, rng);
    const auto grid = small_grid();
    const Tensor w = Tensor::from({10, 59}, [&] {
        std::vector<double> v(590);
        for (auto& e : v) e = normal01(rng);
        return v;
    }());
    EXPECT_LT(params_fd(p,
                        [&](const Params& ps) {
                            const LatentSet lat = encode_with_queries(ps, c, input, q);
                            const auto g = decode_gaussians(ps, c, lat, grid);
                            const Tensor flat = ad::concat({g.position, g.scale, g.rotation,
                                                            ad::reshape(g.opacity, {10, 1}),
                                                            ad::reshape(g.sh, {10, 48})},
                                                           1);
                            return ad::sum(flat * w);
                        }),
              1e-4);
}

TEST(Files, CheckpointAndLatentRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "lito_nets";
    std::filesystem::create_directories(dir);
    Rng rng(13);
    const ModelConfig c = tiny_config();
    const Params p = init_parameters(c, rng);
    const auto ck = (dir / "m.litc").string();
    write_checkpoint(ck, c, p);
    const auto [c2, p2] = read_checkpoint(ck);
    EXPECT_EQ(format_config(c2), format_config(c));
    ASSERT_EQ(p2.size(), p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < p.tensor(i).size(); ++j)
            ASSERT_EQ(p2.tensor(i)[j], static_cast<double>(static_cast<float>(p.tensor(i)[j])));

    const LatentSet lat = encode(p, c, random_samples(30, rng), rng);
    const auto lp = (dir / "z.lit").string();
    write_latent(lp, lat);
    const LatentSet back = read_latent(lp);
    EXPECT_EQ(back.tokens.shape(), lat.tokens.shape());
    EXPECT_NEAR(back.positions[3].y, lat.positions[3].y, 1e-7);
    EXPECT_NEAR(back.tokens[5], lat.tokens[5], 1e-6);

    std::filesystem::resize_file(ck, 100);
    EXPECT_THROW(read_checkpoint(ck), FormatError);
    EXPECT_THROW(read_checkpoint(lp), FormatError); // wrong magic
}
