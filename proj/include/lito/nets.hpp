// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// The tokenizer networks: a patch-masked Perceiver-style encoder, the
// per-point flow-matching velocity decoder and the voxel-anchored Gaussian
// decoder, plus their featurizers and on-disk formats.
//
// All transformer blocks are pre-norm: x + Attn(LN(x), LN(ctx)), then
// x + MLP(LN(x)) with a GELU hidden layer. Layer norms carry no affine terms.
#pragma once

#include "lito/autodiff.hpp"
#include "lito/lightfield.hpp"
#include "lito/splat.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace lito::nets {

struct PosEncSpec {
    int F = 1;
    double m_min = 0.0, m_max = 0.0;

    std::size_t width(std::size_t channels) const { return channels * 2 * static_cast<std::size_t>(F); }
    double frequency(int i) const;
};

/// Per channel: sin(u_0..u_{F-1}) then cos(u_0..u_{F-1}); channels in order.
std::vector<double> pos_encode(const std::vector<double>& values, const PosEncSpec& spec);
/// Row-wise encoding of [N, C] into [N, C*2F]. Treats x as data (no gradient).
ad::Tensor pos_encode(const ad::Tensor& x, const PosEncSpec& spec);

/// (dir, x cross dir).
std::array<double, 6> plucker(const Vec3& x, const Vec3& dir);

struct ModelConfig {
    // latent
    int k = 64, d = 8;
    // shared transformer widths
    int df = 64, mlp = 256, heads = 4, dec_heads = 4;
    // encoder
    int enc_self_layers = 2, enc_voxel_res = 4;
    // gaussian decoder
    int gs_self_layers = 1, grid_res = 16, gaussians_per_voxel = 8, sh_degree = 3;
    double offset_scale = 0.05;
    // velocity decoder
    int time_dim = 64;
    PosEncSpec pe_x{8, 0.0, 6.0};
    PosEncSpec pe_rgb{4, 0.0, 4.0};
    PosEncSpec pe_time{6, 2.651496129472319, 7.651496129472319}; // log2(2 pi) .. + F - 1

    void validate() const;
    std::size_t encoder_input_width() const;  // d'
    std::size_t query_width() const;          // x + PE(x), shared by both decoders
    static constexpr int kRawPerGaussian = 59; // 3 pos, 3 scale, 4 quat, 1 opacity, 48 SH
};

/// Desk-scale defaults (the values above).
ModelConfig toy_config();
/// Published widths; far too large to train here.
ModelConfig paper_config();

/// "key=value" lines; unknown keys are rejected by apply_config_key.
std::string format_config(const ModelConfig& c);
/// Returns false when `key` is not a model key; throws on malformed values.
bool apply_config_key(ModelConfig& c, const std::string& key, const std::string& value);

/// Ordered named parameter tensors (all leaves requiring gradients).
class Params {
public:
    ad::Tensor& add(const std::string& name, ad::Shape shape);
    const ad::Tensor& at(const std::string& name) const;
    ad::Tensor& at(const std::string& name);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    ad::Tensor& tensor(std::size_t i) { return tensors_[i]; }
    const ad::Tensor& tensor(std::size_t i) const { return tensors_[i]; }
    std::size_t scalar_count() const;
    void zero_grad();

private:
    std::vector<std::string> names_;
    std::vector<ad::Tensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

/// Linear weights ~ N(0, 1/fan_in), biases 0; the velocity and Gaussian
/// output heads start at zero.
Params init_parameters(const ModelConfig& c, Rng& rng);
/// Closed-form count of scalars in init_parameters(c).
std::size_t parameter_count(const ModelConfig& c);

struct LatentSet {
    ad::Tensor tokens;          // [k, d]
    std::vector<Vec3> positions; // anchor positions of the k queries
};

/// Features [N, d'] for a batch of samples.
ad::Tensor featurize(const std::vector<lf::LightFieldSample>& samples, const ModelConfig& c);
std::vector<double> featurize_input(const lf::LightFieldSample& s, const ModelConfig& c);

/// Picks k queries with rng, then runs encode_with_queries.
LatentSet encode(const Params& p, const ModelConfig& c, const lf::SampleSet& input, Rng& rng);
LatentSet encode_with_queries(const Params& p, const ModelConfig& c, const lf::SampleSet& input,
                              const std::vector<std::size_t>& query_indices);

/// Velocity at points x [M, 3] and times t [M]. Rows are independent.
ad::Tensor velocity(const Params& p, const ModelConfig& c, const LatentSet& latent, const ad::Tensor& x,
                    const ad::Tensor& t);

/// Raw head output [V, G, 59] for the occupied voxels of `grid`.
ad::Tensor gaussian_head(const Params& p, const ModelConfig& c, const LatentSet& latent, const lf::OccupancyGrid& grid);
/// Applies the output activations to raw [V, G, 59] values.
splat::GaussianTensors activate_gaussians(const ad::Tensor& raw, const ModelConfig& c, const lf::OccupancyGrid& grid);
splat::GaussianTensors decode_gaussians(const Params& p, const ModelConfig& c, const LatentSet& latent,
                                        const lf::OccupancyGrid& grid);

/// "LITC" checkpoint: magic, u32 version, config echo, u32 blob count, then
/// per blob (name, u32 rank, u64 dims, f32 data).
void write_checkpoint(const std::string& path, const ModelConfig& c, const Params& p);
std::pair<ModelConfig, Params> read_checkpoint(const std::string& path);

/// "LIT1" latent: magic, u32 k, u32 d, k x 3 f32 positions, k x d f32 tokens.
void write_latent(const std::string& path, const LatentSet& latent);
LatentSet read_latent(const std::string& path);

} // namespace lito::nets
