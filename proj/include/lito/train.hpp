// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Tokenizer training: losses, AdamW, the Noam schedule and the step loop.
#pragma once

#include "lito/autodiff.hpp"
#include "lito/flow.hpp"
#include "lito/lightfield.hpp"
#include "lito/nets.hpp"

#include <string>
#include <vector>

namespace lito::train {

struct TrainConfig {
    double lambda_perceptual = 0.2; // weight of the 1 - SSIM term
    double kl_weight = 1e-4;
    int batch_points = 4096;  // flow-matching points per step
    int input_points = 2048;  // encoder input samples per step
    int views_per_step = 4;
    double d_model = 512.0;
    double warmup_steps = 4000.0;
    double beta1 = 0.9, beta2 = 0.98, adam_eps = 1e-8, weight_decay = 0.0;
    double clip_norm = 1.0; // global gradient norm; 0 disables
    int total_steps = 2000;
    std::uint64_t seed = 0;
    int render_resolution = 64;
    int checkpoint_every = 100;
    nets::ModelConfig model = nets::toy_config();

    void validate() const;
};

/// Parses "key = value" lines ('#' starts a comment). Model keys are accepted
/// unprefixed. Unknown keys and bad values throw a usage error naming the key.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
std::string format_train_config(const TrainConfig& c);

/// 0.4 * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step >= 1.
double lr_noam(long step, double d_model, double warmup_steps);

/// Sum of squared latent entries.
ad::Tensor kl_reg(const nets::LatentSet& latent);

/// SSIM of two [H, W, C] images on their channel mean, same window and
/// constants as metrics::ssim, built from differentiable ops.
ad::Tensor ssim_diff(const ad::Tensor& a, const ad::Tensor& b);

/// mean((a - b)^2) + lambda * (1 - SSIM(a, b)) for [H, W, 3] images.
ad::Tensor radiance_loss(const ad::Tensor& rendered, const ad::Tensor& target, double lambda);

struct LossParts {
    ad::Tensor total;
    double geo = 0.0, radiance = 0.0, kl = 0.0; // kl already weighted
};
LossParts tokenizer_loss(const ad::Tensor& geo, const ad::Tensor& radiance, const ad::Tensor& kl, double kl_weight);

struct OptimizerState {
    std::vector<std::vector<double>> m, v;
    long step = 0;
};

struct AdamConfig {
    double beta1 = 0.9, beta2 = 0.98, eps = 1e-8, weight_decay = 0.0;
};

/// Global L2 norm of all gradients; rescales them to max_norm when larger.
double clip_grad_norm(nets::Params& p, double max_norm);

/// One AdamW update with bias-corrected moments. Missing gradients count as 0.
void optimizer_step(nets::Params& p, OptimizerState& state, double lr, const AdamConfig& cfg);

/// Inputs prepared once from a rendered dataset.
struct TrainData {
    lf::SampleSet samples;
    lf::OccupancyGrid occupancy; // from all sample positions
    std::vector<scene::Camera> cameras;
    std::vector<ad::Tensor> targets; // [H, W, 3] per camera at render resolution
};

/// Downsamples views by an integer factor to `render_resolution`.
TrainData prepare_data(const lf::Dataset& data, const TrainConfig& c);

/// Box-filters an RGBD image to [H/f, W/f, 3] and returns matching intrinsics.
ad::Tensor downsample(const scene::RgbdImage& img, int factor);
scene::Camera scale_camera(const scene::Camera& cam, int factor);

struct StepLog {
    long step = 0;
    double lr = 0.0;
    double total = 0.0, geo = 0.0, radiance = 0.0, kl = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class Trainer {
public:
    Trainer(TrainConfig config, TrainData data);

    /// Runs one optimization step (steps are numbered from 1).
    StepLog step();
    long steps_done() const { return state_.step; }

    const TrainConfig& config() const { return config_; }
    const TrainData& data() const { return data_; }
    nets::Params& params() { return params_; }
    const nets::Params& params() const { return params_; }

    /// Encodes `input_points` samples drawn with the given rng.
    nets::LatentSet encode(Rng& rng) const;

    /// Full-precision resume state: config echo, step, parameters, moments.
    void save_state(const std::string& path) const;
    void load_state(const std::string& path);

private:
    TrainConfig config_;
    TrainData data_;
    nets::Params params_;
    OptimizerState state_;
};

/// Trains to config.total_steps, writing into out_dir: metrics.csv (appended),
/// checkpoint.litc (f32 model) and state.bin (f64 resume state) every
/// checkpoint_every steps and at the end. Resumes from state.bin when present.
void train_tokenizer(const TrainConfig& config, const lf::Dataset& data, const std::string& out_dir,
                     bool quiet = true);

std::string metrics_header();
std::string metrics_row(const StepLog& log);

} // namespace lito::train
