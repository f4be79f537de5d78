// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: Chamfer distance, PSNR, SSIM and latent statistics.
#pragma once

#include "lito/common.hpp"
#include "lito/nets.hpp"

#include <string>
#include <vector>

namespace lito::metrics {

/// Exact nearest-neighbour distances over a fixed point set (uniform grid).
class NearestNeighbor {
public:
    explicit NearestNeighbor(std::vector<Vec3> points);
    /// Euclidean distance from q to the closest stored point.
    double distance(const Vec3& q) const;
    std::size_t size() const { return points_.size(); }

private:
    std::vector<Vec3> points_; // sorted by cell
    std::vector<std::size_t> cell_start_;
    Vec3 lo_;
    double cell_ = 1.0;
    int dims_[3] = {1, 1, 1};

    std::size_t cell_index(int i, int j, int k) const;
    int axis_cell(double v, int a) const;
};

/// Mean over a of nearest distances into b plus mean over b into a.
double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b);
double chamfer_brute_force(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

/// Interleaved H x W x C values.
struct ImageView {
    const double* data = nullptr;
    std::size_t width = 0, height = 0, channels = 3;
    std::size_t size() const { return width * height * channels; }
};

constexpr double kPsnrCap = 99.0;

double mse(const ImageView& a, const ImageView& b);
/// 10 log10(1 / MSE), 99 dB when the images are equal.
double psnr(const ImageView& a, const ImageView& b);
/// Windowed SSIM on the channel-mean grayscale image, 11x11 Gaussian window
/// (sigma 1.5), averaged over every window that fits inside the image.
double ssim(const ImageView& a, const ImageView& b);

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;
/// Normalized 1D window; the 2D window is its outer product.
std::vector<double> ssim_window();

struct LatentStats {
    double mean = 0.0, std = 0.0;
};
/// Mean and population std over every entry of every latent.
LatentStats latent_stats(const std::vector<nets::LatentSet>& latents);

struct EvalReport {
    std::vector<double> psnr, ssim; // per view
    double psnr_mean = 0.0, ssim_mean = 0.0;
    double chamfer = 0.0;
    bool has_chamfer = false;
    LatentStats latent;
    std::string config; // echo of the model config

    void finalize(); // fills the means
    /// JSON with a fixed key order.
    std::string to_json() const;
};

} // namespace lito::metrics
