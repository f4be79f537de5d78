// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Degree-3 spherical harmonics and EWA Gaussian splatting: a fast tiled
// rasterizer on plain doubles and a differentiable one on the autodiff tape.
//
// Both rasterizers composite front to back in a global depth order (ties by
// gaussian index), clamp alpha at 0.99, stop once transmittance drops below
// 1e-4 and truncate each kernel at Mahalanobis radius 6.
#pragma once

#include "lito/autodiff.hpp"
#include "lito/common.hpp"
#include "lito/scenes.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace lito::splat {

inline constexpr double kY00 = 0.28209479177387814;
inline constexpr int kShCoeffs = 16;
inline constexpr double kAlphaMax = 0.99;
inline constexpr double kTransmittanceMin = 1e-4;
inline constexpr double kDilation = 0.3;
inline constexpr double kNearPlane = 0.01;
inline constexpr double kMaxPower = 18.0; // 0.5 * 6^2
inline constexpr int kTile = 16;
inline constexpr int kDiffCap = 128;

struct Gaussian {
    Vec3 position;
    Vec3 scale{0.01, 0.01, 0.01};
    std::array<double, 4> rotation{1, 0, 0, 0}; // (w, x, y, z)
    double opacity = 1.0;
    std::array<std::array<double, kShCoeffs>, 3> sh{}; // [channel][coefficient]
};

using Mat3 = std::array<double, 9>; // row-major

/// Real SH basis in the usual splatting order; entries above deg_max are 0.
std::array<double, kShCoeffs> sh_basis(int deg_max, const Vec3& dir);
Vec3 gaussian_color(const Gaussian& g, const Vec3& view_point, int deg_max);

Mat3 quat_to_rotation(const std::array<double, 4>& q); // q is normalized first
Mat3 covariance3d(const Vec3& scale, const std::array<double, 4>& rotation);

struct Projected {
    std::array<double, 2> mean; // pixels
    std::array<double, 3> cov;  // (xx, xy, yy), dilated
    double depth;               // camera z
};
/// nullopt when the gaussian is not in front of the near plane.
std::optional<Projected> project(const Gaussian& g, const scene::Camera& camera);

struct Render {
    int width = 0, height = 0;
    std::vector<double> rgb;   // H*W*3
    std::vector<double> alpha; // H*W
};

/// Fast path, tiled over 16x16 tiles and parallel over tiles. Image size
/// comes from the camera intrinsics.
Render rasterize(const std::vector<Gaussian>& gaussians, const scene::Camera& camera, int deg_max);

/// Gaussian parameters as autodiff tensors (already activated).
struct GaussianTensors {
    ad::Tensor position; // [G, 3]
    ad::Tensor scale;    // [G, 3]
    ad::Tensor rotation; // [G, 4], normalized inside the rasterizer
    ad::Tensor opacity;  // [G]
    ad::Tensor sh;       // [G, 3, 16]

    std::size_t count() const { return position.defined() ? position.dim(0) : 0; }
};

GaussianTensors to_tensors(const std::vector<Gaussian>& gaussians, bool requires_grad = false);
std::vector<Gaussian> to_gaussians(const GaussianTensors& t);

/// Differentiable path. Returns [H, W, 4] (rgb, alpha). Throws a usage error
/// when either side exceeds `cap`.
ad::Tensor rasterize_diff(const GaussianTensors& g, const scene::Camera& camera, int deg_max, int cap = kDiffCap);

/// Compositing primitive of the differentiable path. mean2d [V,2], conic
/// [V,3] = (a, b, c) of the inverse 2D covariance, opacity [V], color [V,3].
/// `order` lists gaussians front to back; `radius` gives the 6-sigma pixel
/// half extents used for culling. Returns [H, W, 4].
ad::Tensor composite(const ad::Tensor& mean2d, const ad::Tensor& conic, const ad::Tensor& opacity,
                     const ad::Tensor& color, const std::vector<std::size_t>& order,
                     const std::vector<std::array<double, 2>>& radius, int width, int height);

/// Splits an [H, W, 4] render into rgb and alpha.
Render to_render(const ad::Tensor& rgba);

/// Binary little-endian PLY in the common splatting layout.
void write_ply(const std::string& path, const std::vector<Gaussian>& gaussians);
std::vector<Gaussian> read_ply(const std::string& path);

/// PNG of the rgb channels / raw f32 dump of rgba.
void write_render_png(const std::string& path, const Render& r);
void write_render_raw(const std::string& path, const Render& r);

} // namespace lito::splat
