// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/flow.hpp"

#include "lito/binary_io.hpp"

#include <filesystem>

namespace lito::flow {

using ad::Tensor;

VelocityFn network_velocity(const nets::Params& p, const nets::ModelConfig& c, const nets::LatentSet& latent) {
    return [&p, c, &latent](const Tensor& x, const Tensor& t) { return nets::velocity(p, c, latent, x, t); };
}

FlowBatch make_batch(const std::vector<Vec3>& points, Rng& rng) {
    const std::size_t b = points.size();
    std::vector<double> x(b * 3), eps(b * 3), t(b);
    for (std::size_t i = 0; i < b; ++i) {
        for (int a = 0; a < 3; ++a) {
            x[i * 3 + static_cast<std::size_t>(a)] = points[i][a];
            eps[i * 3 + static_cast<std::size_t>(a)] = normal01(rng);
        }
        t[i] = uniform01(rng);
    }
    return {Tensor::from({b, 3}, std::move(x)), Tensor::from({b, 3}, std::move(eps)), Tensor::from({b}, std::move(t))};
}

Tensor interpolate(const Tensor& x, const Tensor& eps, const Tensor& t) {
    if (x.shape() != eps.shape() || x.rank() != 2 || t.size() != x.dim(0))
        throw std::invalid_argument("interpolate: shapes " + ad::shape_str(x.shape()) + ", " +
                                    ad::shape_str(eps.shape()) + ", " + ad::shape_str(t.shape()) + " do not align");
    const Tensor tc = ad::reshape(t, {t.size(), 1});
    return tc * x + (1.0 - tc) * eps;
}

Tensor geo_loss(const VelocityFn& v, const FlowBatch& batch) {
    if (batch.size() == 0) throw std::invalid_argument("geo_loss: empty batch");
    const Tensor xt = interpolate(batch.x, batch.eps, batch.t);
    const Tensor err = v(xt, batch.t) - (batch.x - batch.eps);
    return ad::sum(ad::square(err)) * (1.0 / static_cast<double>(batch.size()));
}

std::vector<Vec3> initial_noise(std::size_t n, std::uint64_t seed) {
    std::vector<Vec3> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng r = make_stream(seed, i);
        out[i] = {normal01(r), normal01(r), normal01(r)};
    }
    return out;
}

namespace {

Tensor to_tensor(const Vec3* p, std::size_t m) {
    std::vector<double> v(m * 3);
    for (std::size_t i = 0; i < m; ++i)
        for (int a = 0; a < 3; ++a) v[i * 3 + static_cast<std::size_t>(a)] = p[i][a];
    return Tensor::from({m, 3}, std::move(v));
}

std::vector<Vec3> eval(const VelocityFn& v, const std::vector<Vec3>& x, double t) {
    const Tensor out = v(to_tensor(x.data(), x.size()), Tensor::full({x.size()}, t));
    if (out.shape() != ad::Shape{x.size(), 3})
        throw std::invalid_argument("velocity returned shape " + ad::shape_str(out.shape()));
    std::vector<Vec3> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = {out[i * 3], out[i * 3 + 1], out[i * 3 + 2]};
    return r;
}

void integrate_chunk(const VelocityFn& v, std::vector<Vec3>& x, Sampler sampler, int steps) {
    const double dt = 1.0 / steps;
    std::vector<Vec3> tmp(x.size());
    for (int s = 0; s < steps; ++s) {
        const double t0 = static_cast<double>(s) / steps;
        const double t1 = static_cast<double>(s + 1) / steps;
        const auto k1 = eval(v, x, t0);
        if (sampler == Sampler::euler) {
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt * k1[i];
            continue;
        }
        for (std::size_t i = 0; i < x.size(); ++i) tmp[i] = x[i] + dt * k1[i];
        const auto k2 = eval(v, tmp, t1);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += (0.5 * dt) * (k1[i] + k2[i]);
    }
}

} // namespace

std::vector<Vec3> integrate(const VelocityFn& v, std::vector<Vec3> start, Sampler sampler, int steps,
                            std::size_t chunk) {
    if (steps < 1) throw usage_error("sampler needs at least one step, got " + std::to_string(steps));
    if (chunk == 0) chunk = 1;
    const std::size_t n_chunks = (start.size() + chunk - 1) / chunk;
    parallel_for(n_chunks, [&](std::size_t ci) {
        const std::size_t b = ci * chunk, e = std::min(start.size(), b + chunk);
        std::vector<Vec3> part(start.begin() + static_cast<std::ptrdiff_t>(b),
                               start.begin() + static_cast<std::ptrdiff_t>(e));
        ad::NoGradScope no_grad;
        integrate_chunk(v, part, sampler, steps);
        std::copy(part.begin(), part.end(), start.begin() + static_cast<std::ptrdiff_t>(b));
    });
    return start;
}

std::vector<Vec3> sample_points(const VelocityFn& v, std::size_t n, const SampleOptions& opt) {
    if (opt.steps < 1) throw usage_error("sampler needs at least one step, got " + std::to_string(opt.steps));
    return integrate(v, initial_noise(n, opt.seed), opt.sampler, opt.steps, opt.chunk);
}

std::vector<Vec3> sample_euler(const VelocityFn& v, std::size_t n, int steps, std::uint64_t seed) {
    return sample_points(v, n, {Sampler::euler, steps, seed});
}

std::vector<Vec3> sample_heun(const VelocityFn& v, std::size_t n, int steps, std::uint64_t seed) {
    return sample_points(v, n, {Sampler::heun, steps, seed});
}

lf::OccupancyGrid estimate_occupancy_via_sampling(const VelocityFn& v, std::size_t n, int resolution,
                                                  const SampleOptions& opt, int min_count) {
    return lf::occupancy_from_points(sample_points(v, n, opt), resolution, min_count);
}

void write_points(const std::string& path, const std::vector<Vec3>& points) {
    BinaryWriter w(path);
    w.magic("PTS1");
    w.u64(points.size());
    std::vector<float> buf(points.size() * 3);
    for (std::size_t i = 0; i < points.size(); ++i)
        for (int a = 0; a < 3; ++a) buf[i * 3 + static_cast<std::size_t>(a)] = static_cast<float>(points[i][a]);
    w.f32s(buf);
    w.close();
}

std::vector<Vec3> read_points(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("PTS1");
    const std::uint64_t n = r.u64();
    const auto size = std::filesystem::file_size(path);
    if (n > (size - 12) / 12) throw FormatError(FormatError::Reason::truncated, path + ": truncated file");
    const auto buf = r.f32s(static_cast<std::size_t>(n) * 3);
    std::vector<Vec3> out(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {buf[i * 3], buf[i * 3 + 1], buf[i * 3 + 2]};
    return out;
}

} // namespace lito::flow
