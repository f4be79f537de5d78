// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Flow matching on the surface distribution: the straight-line interpolant
// from noise to surface points, the geometry loss, and ODE samplers that push
// Gaussian noise onto the surface.
#pragma once

#include "lito/autodiff.hpp"
#include "lito/lightfield.hpp"
#include "lito/nets.hpp"

#include <functional>
#include <string>
#include <vector>

namespace lito::flow {

/// Velocity field: x [M, 3], t [M] -> [M, 3]. Rows must not interact.
using VelocityFn = std::function<ad::Tensor(const ad::Tensor& x, const ad::Tensor& t)>;

/// The velocity decoder bound to one latent set.
VelocityFn network_velocity(const nets::Params& p, const nets::ModelConfig& c, const nets::LatentSet& latent);

struct FlowBatch {
    ad::Tensor x;   // [B, 3] surface points
    ad::Tensor eps; // [B, 3] standard normal noise
    ad::Tensor t;   // [B] in [0, 1]

    std::size_t size() const { return x.defined() ? x.dim(0) : 0; }
};

/// Draws eps ~ N(0, I) and t ~ U(0, 1) for the given points.
FlowBatch make_batch(const std::vector<Vec3>& points, Rng& rng);

/// t * x + (1 - t) * eps, with t broadcast over rows.
ad::Tensor interpolate(const ad::Tensor& x, const ad::Tensor& eps, const ad::Tensor& t);

/// Mean over the batch of |V(x_t, t) - (x - eps)|^2.
ad::Tensor geo_loss(const VelocityFn& v, const FlowBatch& batch);

enum class Sampler { euler, heun };

struct SampleOptions {
    Sampler sampler = Sampler::heun;
    int steps = 100;
    std::uint64_t seed = 0;
    std::size_t chunk = 512; // points per velocity call
};

/// Starting noise for point i is drawn from its own stream of `seed`.
std::vector<Vec3> initial_noise(std::size_t n, std::uint64_t seed);

/// Integrates dx/dt = V(x, t) from t = 0 to 1 starting at `start`.
std::vector<Vec3> integrate(const VelocityFn& v, std::vector<Vec3> start, Sampler sampler, int steps,
                            std::size_t chunk = 512);

std::vector<Vec3> sample_euler(const VelocityFn& v, std::size_t n, int steps, std::uint64_t seed);
std::vector<Vec3> sample_heun(const VelocityFn& v, std::size_t n, int steps, std::uint64_t seed);
std::vector<Vec3> sample_points(const VelocityFn& v, std::size_t n, const SampleOptions& opt);

/// Samples n points and thresholds voxel counts at min_count.
lf::OccupancyGrid estimate_occupancy_via_sampling(const VelocityFn& v, std::size_t n, int resolution,
                                                  const SampleOptions& opt = {}, int min_count = 1);

/// "PTS1" file: magic, u64 count, count x 3 f32.
void write_points(const std::string& path, const std::vector<Vec3>& points);
std::vector<Vec3> read_points(const std::string& path);

} // namespace lito::flow
