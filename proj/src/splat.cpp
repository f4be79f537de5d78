// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/splat.hpp"

#include "lito/binary_io.hpp"
#include "lito/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace lito::splat {

namespace {

constexpr double kC1 = 0.4886025119029199;
constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
                           0.5462742152960396};
constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
                           -0.4570457994644658, 1.445305721320277, -0.5900435899266435};

int check_degree(int deg_max) {
    if (deg_max < 0 || deg_max > 3) throw usage_error("SH degree must be in 0..3, got " + std::to_string(deg_max));
    return deg_max;
}

int coeffs_for(int deg_max) { return (deg_max + 1) * (deg_max + 1); }

Mat3 matmul3(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return c;
}

Mat3 transpose3(const Mat3& a) { return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]}; }

// Pixel range [lo, hi] whose centres lie within `r` of `m`, clipped to [0, n).
std::array<int, 2> pixel_span(double m, double r, int n) {
    const double lo = std::ceil(m - r - 0.5), hi = std::floor(m + r - 0.5);
    return {static_cast<int>(std::max(lo, 0.0)), static_cast<int>(std::min(hi, static_cast<double>(n - 1)))};
}

// Per-tile gaussian lists, each in global front-to-back order.
struct TileBins {
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> lists;
};

TileBins bin_tiles(const std::vector<std::size_t>& order, const std::vector<std::array<double, 2>>& mean,
                   const std::vector<std::array<double, 2>>& radius, int width, int height) {
    TileBins b;
    b.tiles_x = (width + kTile - 1) / kTile;
    b.tiles_y = (height + kTile - 1) / kTile;
    b.lists.resize(static_cast<std::size_t>(b.tiles_x) * b.tiles_y);
    for (std::size_t g : order) {
        const auto xs = pixel_span(mean[g][0], radius[g][0], width);
        const auto ys = pixel_span(mean[g][1], radius[g][1], height);
        if (xs[0] > xs[1] || ys[0] > ys[1]) continue;
        for (int ty = ys[0] / kTile; ty <= ys[1] / kTile; ++ty)
            for (int tx = xs[0] / kTile; tx <= xs[1] / kTile; ++tx)
                b.lists[static_cast<std::size_t>(ty) * b.tiles_x + tx].push_back(static_cast<std::uint32_t>(g));
    }
    return b;
}

std::vector<std::size_t> depth_order(const std::vector<double>& depth, const std::vector<std::uint8_t>& valid) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < depth.size(); ++i)
        if (valid[i]) order.push_back(i);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return depth[a] < depth[b] || (depth[a] == depth[b] && a < b); });
    return order;
}

} // namespace

std::array<double, kShCoeffs> sh_basis(int deg_max, const Vec3& dir) {
    check_degree(deg_max);
    std::array<double, kShCoeffs> b{};
    const double x = dir.x, y = dir.y, z = dir.z;
    b[0] = kY00;
    if (deg_max >= 1) {
        b[1] = -kC1 * y;
        b[2] = kC1 * z;
        b[3] = -kC1 * x;
    }
    if (deg_max >= 2) {
        const double xx = x * x, yy = y * y, zz = z * z;
        b[4] = kC2[0] * x * y;
        b[5] = kC2[1] * y * z;
        b[6] = kC2[2] * (2 * zz - xx - yy);
        b[7] = kC2[3] * x * z;
        b[8] = kC2[4] * (xx - yy);
    }
    if (deg_max >= 3) {
        const double xx = x * x, yy = y * y, zz = z * z;
        b[9] = kC3[0] * y * (3 * xx - yy);
        b[10] = kC3[1] * x * y * z;
        b[11] = kC3[2] * y * (4 * zz - xx - yy);
        b[12] = kC3[3] * z * (2 * zz - 3 * xx - 3 * yy);
        b[13] = kC3[4] * x * (4 * zz - xx - yy);
        b[14] = kC3[5] * z * (xx - yy);
        b[15] = kC3[6] * x * (xx - 3 * yy);
    }
    return b;
}

Vec3 gaussian_color(const Gaussian& g, const Vec3& view_point, int deg_max) {
    const auto basis = sh_basis(deg_max, normalized(view_point - g.position));
    const int n = coeffs_for(deg_max);
    Vec3 c;
    for (int ch = 0; ch < 3; ++ch) {
        double s = 0;
        for (int i = 0; i < n; ++i) s += g.sh[ch][i] * basis[i];
        c[ch] = std::clamp(s + 0.5, 0.0, 1.0);
    }
    return c;
}

Mat3 quat_to_rotation(const std::array<double, 4>& q) {
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
            2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

Mat3 covariance3d(const Vec3& scale, const std::array<double, 4>& rotation) {
    Mat3 m = quat_to_rotation(rotation);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m[i * 3 + j] *= scale[j];
    return matmul3(m, transpose3(m));
}

std::optional<Projected> project(const Gaussian& g, const scene::Camera& camera) {
    const Vec3 p = camera.to_camera(g.position);
    if (!(p.z > kNearPlane)) return std::nullopt;
    const auto& k = camera.intrinsics;
    Projected out;
    out.depth = p.z;
    out.mean = {k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy};
    // J W, with J the Jacobian of the pinhole projection at p
    const double iz = 1.0 / p.z, iz2 = iz * iz;
    const double j[6] = {k.fx * iz, 0, -k.fx * p.x * iz2, 0, k.fy * iz, -k.fy * p.y * iz2};
    const Mat3& w = camera.rotation;
    double t[6]{};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c)
            for (int m = 0; m < 3; ++m) t[r * 3 + c] += j[r * 3 + m] * w[m * 3 + c];
    const Mat3 sigma = covariance3d(g.scale, g.rotation);
    double ts[6]{};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c)
            for (int m = 0; m < 3; ++m) ts[r * 3 + c] += t[r * 3 + m] * sigma[m * 3 + c];
    double cov[4]{};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c)
            for (int m = 0; m < 3; ++m) cov[r * 2 + c] += ts[r * 3 + m] * t[c * 3 + m];
    out.cov = {cov[0] + kDilation, 0.5 * (cov[1] + cov[2]), cov[3] + kDilation};
    return out;
}

Render rasterize(const std::vector<Gaussian>& gaussians, const scene::Camera& camera, int deg_max) {
    check_degree(deg_max);
    const int width = camera.intrinsics.width, height = camera.intrinsics.height;
    Render r;
    r.width = width;
    r.height = height;
    r.rgb.assign(static_cast<std::size_t>(width) * height * 3, 0.0);
    r.alpha.assign(static_cast<std::size_t>(width) * height, 0.0);

    const std::size_t n = gaussians.size();
    std::vector<double> depth(n, 0.0);
    std::vector<std::uint8_t> valid(n, 0);
    std::vector<std::array<double, 2>> mean(n), radius(n);
    std::vector<std::array<double, 3>> conic(n);
    std::vector<Vec3> color(n);
    const Vec3 eye = camera.center();
    for (std::size_t i = 0; i < n; ++i) {
        const auto p = project(gaussians[i], camera);
        if (!p) continue;
        const auto [a, b, c] = p->cov;
        const double det = a * c - b * b;
        if (!(det > 0)) continue;
        valid[i] = 1;
        depth[i] = p->depth;
        mean[i] = p->mean;
        conic[i] = {c / det, -b / det, a / det};
        radius[i] = {6.0 * std::sqrt(a), 6.0 * std::sqrt(c)};
        color[i] = gaussian_color(gaussians[i], eye, deg_max);
    }
    const auto order = depth_order(depth, valid);
    const TileBins bins = bin_tiles(order, mean, radius, width, height);

    parallel_for(bins.lists.size(), [&](std::size_t tile) {
        const int tx = static_cast<int>(tile) % bins.tiles_x, ty = static_cast<int>(tile) / bins.tiles_x;
        const auto& list = bins.lists[tile];
        for (int py = ty * kTile; py < std::min(height, (ty + 1) * kTile); ++py)
            for (int px = tx * kTile; px < std::min(width, (tx + 1) * kTile); ++px) {
                double T = 1.0;
                Vec3 acc;
                for (std::uint32_t g : list) {
                    const double dx = px + 0.5 - mean[g][0], dy = py + 0.5 - mean[g][1];
                    const auto& q = conic[g];
                    const double power = 0.5 * (q[0] * dx * dx + q[2] * dy * dy) + q[1] * dx * dy;
                    if (power > kMaxPower) continue;
                    const double alpha = std::min(kAlphaMax, gaussians[g].opacity * std::exp(-power));
                    acc += color[g] * (alpha * T);
                    T *= 1.0 - alpha;
                    if (T < kTransmittanceMin) break;
                }
                const std::size_t pix = static_cast<std::size_t>(py) * width + px;
                for (int c = 0; c < 3; ++c) r.rgb[pix * 3 + c] = acc[c];
                r.alpha[pix] = 1.0 - T;
            }
    });
    return r;
}

GaussianTensors to_tensors(const std::vector<Gaussian>& gs, bool requires_grad) {
    const std::size_t n = gs.size();
    std::vector<double> pos, scale, rot, op, sh;
    for (const auto& g : gs) {
        for (int k = 0; k < 3; ++k) {
            pos.push_back(g.position[k]);
            scale.push_back(g.scale[k]);
        }
        rot.insert(rot.end(), g.rotation.begin(), g.rotation.end());
        op.push_back(g.opacity);
        for (const auto& ch : g.sh) sh.insert(sh.end(), ch.begin(), ch.end());
    }
    return {ad::Tensor::from({n, 3}, pos, requires_grad), ad::Tensor::from({n, 3}, scale, requires_grad),
            ad::Tensor::from({n, 4}, rot, requires_grad), ad::Tensor::from({n}, op, requires_grad),
            ad::Tensor::from({n, 3, kShCoeffs}, sh, requires_grad)};
}

std::vector<Gaussian> to_gaussians(const GaussianTensors& t) {
    std::vector<Gaussian> out(t.count());
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto& g = out[i];
        for (int k = 0; k < 3; ++k) {
            g.position[k] = t.position[i * 3 + k];
            g.scale[k] = t.scale[i * 3 + k];
        }
        for (int k = 0; k < 4; ++k) g.rotation[k] = t.rotation[i * 4 + k];
        g.opacity = t.opacity[i];
        for (int c = 0; c < 3; ++c)
            for (int k = 0; k < kShCoeffs; ++k) g.sh[c][k] = t.sh[(i * 3 + c) * kShCoeffs + k];
    }
    return out;
}

ad::Tensor composite(const ad::Tensor& mean2d, const ad::Tensor& conic, const ad::Tensor& opacity,
                     const ad::Tensor& color, const std::vector<std::size_t>& order,
                     const std::vector<std::array<double, 2>>& radius, int width, int height) {
    const std::size_t n = opacity.size();
    if (mean2d.shape() != ad::Shape{n, 2} || conic.shape() != ad::Shape{n, 3} || color.shape() != ad::Shape{n, 3} ||
        radius.size() != n)
        throw std::invalid_argument("composite: inconsistent shapes");
    std::vector<std::array<double, 2>> mean(n);
    for (std::size_t i = 0; i < n; ++i) mean[i] = {mean2d[i * 2], mean2d[i * 2 + 1]};
    auto bins = std::make_shared<TileBins>(bin_tiles(order, mean, radius, width, height));

    const std::size_t npix = static_cast<std::size_t>(width) * height;
    std::vector<double> out(npix * 4, 0.0);
    const double* pm = mean2d.data().data();
    const double* pq = conic.data().data();
    const double* po = opacity.data().data();
    const double* pc = color.data().data();

    // Per-tile copies of the compositing inputs, in depth order.
    struct Packed {
        double mx, my, q0, q1, q2, op;
        std::uint32_t g;
    };
    auto packed = std::make_shared<std::vector<std::vector<Packed>>>(bins->lists.size());
    for (std::size_t t = 0; t < bins->lists.size(); ++t) {
        auto& dst = (*packed)[t];
        dst.reserve(bins->lists[t].size());
        for (std::uint32_t g : bins->lists[t])
            dst.push_back({pm[g * 2], pm[g * 2 + 1], pq[g * 3], pq[g * 3 + 1], pq[g * 3 + 2], po[g], g});
    }

    // One entry per composited gaussian of a pixel.
    struct Step {
        std::uint32_t g;
        double alpha, T, G, dx, dy;
        bool clamped;
    };
    auto walk = [](const std::vector<Packed>& list, int px, int py, std::vector<Step>& steps) {
        steps.clear();
        double T = 1.0;
        const double fx = px + 0.5, fy = py + 0.5;
        for (const Packed& e : list) {
            const double dx = fx - e.mx, dy = fy - e.my;
            const double power = 0.5 * (e.q0 * dx * dx + e.q2 * dy * dy) + e.q1 * dx * dy;
            if (power > kMaxPower) continue;
            const double G = std::exp(-power);
            const double raw = e.op * G;
            const bool clamped = raw > kAlphaMax;
            const double alpha = clamped ? kAlphaMax : raw;
            steps.push_back({e.g, alpha, T, G, dx, dy, clamped});
            T *= 1.0 - alpha;
            if (T < kTransmittanceMin) break;
        }
        return T;
    };

    std::vector<Step> steps;
    for (std::size_t tile = 0; tile < bins->lists.size(); ++tile) {
        const int tx = static_cast<int>(tile) % bins->tiles_x, ty = static_cast<int>(tile) / bins->tiles_x;
        for (int py = ty * kTile; py < std::min(height, (ty + 1) * kTile); ++py)
            for (int px = tx * kTile; px < std::min(width, (tx + 1) * kTile); ++px) {
                const double T = walk((*packed)[tile], px, py, steps);
                double* o = &out[(static_cast<std::size_t>(py) * width + px) * 4];
                for (const Step& s : steps)
                    for (int c = 0; c < 3; ++c) o[c] += pc[s.g * 3 + c] * (s.alpha * s.T);
                o[3] = 1.0 - T;
            }
    }
    ad::Tensor result = ad::Tensor::from({static_cast<std::size_t>(height), static_cast<std::size_t>(width), 4},
                                         std::move(out));
    ad::Graph* graph = ad::recording_graph({&mean2d, &conic, &opacity, &color});
    if (!graph) return result;
    result.impl()->requires_grad = true;
    auto* ri = result.impl();
    graph->record("composite", {mean2d, conic, opacity, color}, result,
                  [=, mean2d = mean2d, conic = conic, opacity = opacity, color = color] {
                      auto& gm = mean2d.impl()->grad_buffer();
                      auto& gq = conic.impl()->grad_buffer();
                      auto& go = opacity.impl()->grad_buffer();
                      auto& gc = color.impl()->grad_buffer();
                      const double* gout = ri->grad.data();
                      std::vector<Step> st;
                      for (std::size_t tile = 0; tile < bins->lists.size(); ++tile) {
                          const int tx = static_cast<int>(tile) % bins->tiles_x;
                          const int ty = static_cast<int>(tile) / bins->tiles_x;
                          for (int py = ty * kTile; py < std::min(height, (ty + 1) * kTile); ++py)
                              for (int px = tx * kTile; px < std::min(width, (tx + 1) * kTile); ++px) {
                                  const double* gp = gout + (static_cast<std::size_t>(py) * width + px) * 4;
                                  if (gp[0] == 0 && gp[1] == 0 && gp[2] == 0 && gp[3] == 0) continue;
                                  const double T_end = walk((*packed)[tile], px, py, st);
                                  double suffix[3] = {0, 0, 0}; // sum over later steps of alpha*T*color
                                  for (auto it = st.rbegin(); it != st.rend(); ++it) {
                                      const Step& s = *it;
                                      const double* c = pc + s.g * 3;
                                      const double w = s.alpha * s.T;
                                      double d_alpha = gp[3] * T_end / (1.0 - s.alpha);
                                      for (int k = 0; k < 3; ++k) {
                                          gc[s.g * 3 + k] += gp[k] * w;
                                          d_alpha += gp[k] * (c[k] * s.T - suffix[k] / (1.0 - s.alpha));
                                          suffix[k] += c[k] * w;
                                      }
                                      if (s.clamped) continue;
                                      go[s.g] += d_alpha * s.G;
                                      const double d_power = -d_alpha * s.alpha;
                                      const double* q = pq + s.g * 3;
                                      gm[s.g * 2] -= d_power * (q[0] * s.dx + q[1] * s.dy);
                                      gm[s.g * 2 + 1] -= d_power * (q[1] * s.dx + q[2] * s.dy);
                                      gq[s.g * 3] += d_power * 0.5 * s.dx * s.dx;
                                      gq[s.g * 3 + 1] += d_power * s.dx * s.dy;
                                      gq[s.g * 3 + 2] += d_power * 0.5 * s.dy * s.dy;
                                  }
                              }
                      }
                  });
    return result;
}

namespace {

// Column k of a [G, n] tensor as [G, 1].
ad::Tensor col(const ad::Tensor& t, std::size_t k) { return ad::slice(t, 1, k, k + 1); }

ad::Tensor sh_basis_tensor(const ad::Tensor& dir, int deg_max) {
    using ad::Tensor;
    const std::size_t n = dir.dim(0);
    const Tensor x = col(dir, 0), y = col(dir, 1), z = col(dir, 2);
    std::vector<Tensor> b{Tensor::full({n, 1}, kY00)};
    if (deg_max >= 1) {
        b.push_back(y * -kC1);
        b.push_back(z * kC1);
        b.push_back(x * -kC1);
    }
    if (deg_max >= 2) {
        const Tensor xx = x * x, yy = y * y, zz = z * z;
        b.push_back(x * y * kC2[0]);
        b.push_back(y * z * kC2[1]);
        b.push_back((zz * 2.0 - xx - yy) * kC2[2]);
        b.push_back(x * z * kC2[3]);
        b.push_back((xx - yy) * kC2[4]);
        if (deg_max >= 3) {
            b.push_back(y * (xx * 3.0 - yy) * kC3[0]);
            b.push_back(x * y * z * kC3[1]);
            b.push_back(y * (zz * 4.0 - xx - yy) * kC3[2]);
            b.push_back(z * (zz * 2.0 - xx * 3.0 - yy * 3.0) * kC3[3]);
            b.push_back(x * (zz * 4.0 - xx - yy) * kC3[4]);
            b.push_back(z * (xx - yy) * kC3[5]);
            b.push_back(x * (xx - yy * 3.0) * kC3[6]);
        }
    }
    return ad::concat(b, 1); // [G, (deg+1)^2]
}

} // namespace

ad::Tensor rasterize_diff(const GaussianTensors& gt, const scene::Camera& camera, int deg_max, int cap) {
    using ad::Tensor;
    check_degree(deg_max);
    const int width = camera.intrinsics.width, height = camera.intrinsics.height;
    if (width > cap || height > cap)
        throw usage_error("differentiable rasterizer is limited to " + std::to_string(cap) + " px per side (got " +
                          std::to_string(width) + "x" + std::to_string(height) + "); use the fast rasterizer");
    const auto& k = camera.intrinsics;
    const auto& W = camera.rotation;

    // Visibility is decided on values; only visible gaussians enter the graph.
    std::vector<std::size_t> visible;
    for (std::size_t i = 0; i < gt.count(); ++i) {
        const Vec3 p{gt.position[i * 3], gt.position[i * 3 + 1], gt.position[i * 3 + 2]};
        if (camera.to_camera(p).z > kNearPlane) visible.push_back(i);
    }
    const std::size_t n = visible.size();
    if (n == 0) return Tensor::zeros({static_cast<std::size_t>(height), static_cast<std::size_t>(width), 4});

    const Tensor pos = ad::gather(gt.position, visible);
    const Tensor scale = ad::gather(gt.scale, visible);
    const Tensor quat = ad::gather(gt.rotation, visible);
    const Tensor opacity = ad::gather(gt.opacity, visible);
    const Tensor sh = ad::gather(gt.sh, visible);

    // Rotation from the normalized quaternion, scaled columns, Sigma = M M^T.
    const Tensor qn = quat / ad::sqrt(ad::sum(quat * quat, 1, true));
    const Tensor w = col(qn, 0), x = col(qn, 1), y = col(qn, 2), z = col(qn, 3);
    const Tensor r = ad::concat({1.0 - (y * y + z * z) * 2.0, (x * y - w * z) * 2.0, (x * z + w * y) * 2.0,
                                 (x * y + w * z) * 2.0, 1.0 - (x * x + z * z) * 2.0, (y * z - w * x) * 2.0,
                                 (x * z - w * y) * 2.0, (y * z + w * x) * 2.0, 1.0 - (x * x + y * y) * 2.0},
                                1);
    const Tensor m = ad::reshape(r, {n, 3, 3}) * ad::reshape(scale, {n, 1, 3});
    const Tensor sigma = ad::matmul(m, ad::transpose(m, 1, 2));

    // Camera-space mean: p W^T + t.
    const Tensor wt = Tensor::from({3, 3}, {W[0], W[3], W[6], W[1], W[4], W[7], W[2], W[5], W[8]});
    const Tensor t = Tensor::from({1, 3}, {camera.translation.x, camera.translation.y, camera.translation.z});
    const Tensor pc = ad::matmul(pos, wt) + t;
    const Tensor cx = col(pc, 0), cy = col(pc, 1), cz = col(pc, 2);
    const Tensor iz = Tensor::scalar(1.0) / cz;
    const Tensor u = cx * iz * k.fx + k.cx;
    const Tensor v = cy * iz * k.fy + k.cy;
    const Tensor mean2d = ad::concat({u, v}, 1);

    // T = J W with J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]].
    const Tensor zero = Tensor::zeros({n, 1});
    const Tensor j = ad::reshape(
        ad::concat({iz * k.fx, zero, cx * iz * iz * -k.fx, zero, iz * k.fy, cy * iz * iz * -k.fy}, 1), {n, 2, 3});
    const Tensor jw = ad::matmul(j, Tensor::from({3, 3}, std::vector<double>(W.begin(), W.end())));
    const Tensor cov = ad::matmul(ad::matmul(jw, sigma), ad::transpose(jw, 1, 2)); // [n, 2, 2]
    const Tensor flat = ad::reshape(cov, {n, 4});
    const Tensor a = col(flat, 0) + kDilation;
    const Tensor b = (col(flat, 1) + col(flat, 2)) * 0.5;
    const Tensor c = col(flat, 3) + kDilation;
    const Tensor det = a * c - b * b;
    const Tensor conic = ad::concat({c / det, -b / det, a / det}, 1);

    // View-dependent color.
    const Vec3 eye = camera.center();
    const Tensor diff = Tensor::from({1, 3}, {eye.x, eye.y, eye.z}) - pos;
    const Tensor dir = diff / ad::sqrt(ad::sum(diff * diff, 1, true));
    const std::size_t nc = static_cast<std::size_t>(coeffs_for(deg_max));
    const Tensor basis = sh_basis_tensor(dir, deg_max);
    const Tensor shc = nc == kShCoeffs ? sh : ad::slice(sh, 2, 0, nc);
    const Tensor color = ad::clamp(ad::sum(shc * ad::reshape(basis, {n, 1, nc}), 2) + 0.5, 0.0, 1.0);

    std::vector<double> depth(n);
    std::vector<std::uint8_t> valid(n, 1);
    std::vector<std::array<double, 2>> radius(n);
    for (std::size_t i = 0; i < n; ++i) {
        depth[i] = cz[i];
        if (!(det[i] > 0)) valid[i] = 0;
        radius[i] = {6.0 * std::sqrt(std::max(a[i], 0.0)), 6.0 * std::sqrt(std::max(c[i], 0.0))};
    }
    return composite(mean2d, conic, opacity, color, depth_order(depth, valid), radius, width, height);
}

Render to_render(const ad::Tensor& rgba) {
    Render r;
    r.height = static_cast<int>(rgba.dim(0));
    r.width = static_cast<int>(rgba.dim(1));
    const std::size_t npix = static_cast<std::size_t>(r.width) * r.height;
    r.rgb.resize(npix * 3);
    r.alpha.resize(npix);
    for (std::size_t i = 0; i < npix; ++i) {
        for (int c = 0; c < 3; ++c) r.rgb[i * 3 + c] = rgba[i * 4 + c];
        r.alpha[i] = rgba[i * 4 + 3];
    }
    return r;
}

namespace {
constexpr int kPlyFloats = 62;
const char* const kPlyNames[] = {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
} // namespace

void write_ply(const std::string& path, const std::vector<Gaussian>& gaussians) {
    std::ostringstream h;
    h << "ply\nformat binary_little_endian 1.0\nelement vertex " << gaussians.size() << '\n';
    for (const char* name : kPlyNames) h << "property float " << name << '\n';
    for (int i = 0; i < 45; ++i) h << "property float f_rest_" << i << '\n';
    h << "property float opacity\n";
    for (int i = 0; i < 3; ++i) h << "property float scale_" << i << '\n';
    for (int i = 0; i < 4; ++i) h << "property float rot_" << i << '\n';
    h << "end_header\n";
    BinaryWriter w(path);
    const std::string header = h.str();
    w.bytes(header.data(), header.size());
    std::vector<float> rec(kPlyFloats);
    for (const auto& g : gaussians) {
        std::size_t o = 0;
        for (int k = 0; k < 3; ++k) rec[o++] = static_cast<float>(g.position[k]);
        for (int k = 0; k < 3; ++k) rec[o++] = 0.0f;
        for (int c = 0; c < 3; ++c) rec[o++] = static_cast<float>(g.sh[c][0]);
        for (int c = 0; c < 3; ++c)
            for (int i = 1; i < kShCoeffs; ++i) rec[o++] = static_cast<float>(g.sh[c][i]);
        const double op = std::clamp(g.opacity, 1e-7, 1.0 - 1e-7);
        rec[o++] = static_cast<float>(std::log(op / (1.0 - op)));
        for (int k = 0; k < 3; ++k) rec[o++] = static_cast<float>(std::log(g.scale[k]));
        for (int k = 0; k < 4; ++k) rec[o++] = static_cast<float>(g.rotation[k]);
        w.f32s(rec);
    }
    w.close();
}

std::vector<Gaussian> read_ply(const std::string& path) {
    BinaryReader r(path);
    std::string header;
    std::size_t count = 0;
    int properties = 0;
    for (;;) {
        std::string line;
        char ch = 0;
        while (true) {
            r.bytes(&ch, 1);
            if (ch == '\n') break;
            line.push_back(ch);
            if (line.size() > 256) throw FormatError(FormatError::Reason::malformed, path + ": bad PLY header");
        }
        if (header.empty() && line != "ply") throw FormatError(FormatError::Reason::bad_magic, path + ": not a PLY");
        header += line + '\n';
        if (line.rfind("format", 0) == 0 && line != "format binary_little_endian 1.0")
            throw FormatError(FormatError::Reason::bad_version, path + ": unsupported PLY format");
        if (line.rfind("element vertex ", 0) == 0) count = std::stoull(line.substr(15));
        if (line.rfind("property float ", 0) == 0) ++properties;
        if (line == "end_header") break;
    }
    if (properties != kPlyFloats)
        throw FormatError(FormatError::Reason::malformed, path + ": unexpected PLY property layout");
    std::vector<Gaussian> out(count);
    for (auto& g : out) {
        const auto rec = r.f32s(kPlyFloats);
        std::size_t o = 0;
        for (int k = 0; k < 3; ++k) g.position[k] = rec[o++];
        o += 3;
        for (int c = 0; c < 3; ++c) g.sh[c][0] = rec[o++];
        for (int c = 0; c < 3; ++c)
            for (int i = 1; i < kShCoeffs; ++i) g.sh[c][i] = rec[o++];
        g.opacity = 1.0 / (1.0 + std::exp(-static_cast<double>(rec[o++])));
        for (int k = 0; k < 3; ++k) g.scale[k] = std::exp(static_cast<double>(rec[o++]));
        for (int k = 0; k < 4; ++k) g.rotation[k] = rec[o++];
    }
    return out;
}

void write_render_png(const std::string& path, const Render& r) {
    Image img{r.width, r.height, std::vector<float>(r.rgb.begin(), r.rgb.end())};
    write_png(path, img);
}

void write_render_raw(const std::string& path, const Render& r) {
    const std::size_t npix = static_cast<std::size_t>(r.width) * r.height;
    std::vector<float> v(npix * 4);
    for (std::size_t i = 0; i < npix; ++i) {
        for (int c = 0; c < 3; ++c) v[i * 4 + c] = static_cast<float>(r.rgb[i * 3 + c]);
        v[i * 4 + 3] = static_cast<float>(r.alpha[i]);
    }
    write_raw(path, r.width, r.height, 4, v);
}

} // namespace lito::splat
