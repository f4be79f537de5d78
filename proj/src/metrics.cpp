// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace lito::metrics {

NearestNeighbor::NearestNeighbor(std::vector<Vec3> points) {
    if (points.empty()) throw usage_error("nearest neighbour set is empty");
    Vec3 hi = points[0];
    lo_ = points[0];
    for (const Vec3& p : points)
        for (int a = 0; a < 3; ++a) {
            lo_[a] = std::min(lo_[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    const double extent = std::max({hi.x - lo_.x, hi.y - lo_.y, hi.z - lo_.z});
    const double per_axis = std::clamp(std::cbrt(static_cast<double>(points.size()) / 2.0), 1.0, 128.0);
    cell_ = extent > 0 ? extent / per_axis : 1.0;
    for (int a = 0; a < 3; ++a)
        dims_[a] = std::clamp(static_cast<int>(std::floor((hi[a] - lo_[a]) / cell_)) + 1, 1, 129);

    std::vector<std::size_t> key(points.size());
    for (std::size_t i = 0; i < points.size(); ++i)
        key[i] = cell_index(axis_cell(points[i].x, 0), axis_cell(points[i].y, 1), axis_cell(points[i].z, 2));
    const std::size_t cells = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    cell_start_.assign(cells + 1, 0);
    for (std::size_t k : key) ++cell_start_[k + 1];
    std::partial_sum(cell_start_.begin(), cell_start_.end(), cell_start_.begin());
    std::vector<std::size_t> fill(cell_start_.begin(), cell_start_.end() - 1);
    points_.resize(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) points_[fill[key[i]]++] = points[i];
}

std::size_t NearestNeighbor::cell_index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * static_cast<std::size_t>(dims_[1]) + static_cast<std::size_t>(j)) *
               static_cast<std::size_t>(dims_[2]) +
           static_cast<std::size_t>(k);
}

int NearestNeighbor::axis_cell(double v, int a) const {
    const double c = std::floor((v - lo_[a]) / cell_);
    if (!(c > 0)) return 0;
    return static_cast<int>(std::min(c, static_cast<double>(dims_[a] - 1)));
}

double NearestNeighbor::distance(const Vec3& q) const {
    const int c[3] = {axis_cell(q.x, 0), axis_cell(q.y, 1), axis_cell(q.z, 2)};
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0;; ++r) {
        int lo[3], hi[3];
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::max(0, c[a] - r);
            hi[a] = std::min(dims_[a] - 1, c[a] + r);
        }
        for (int i = lo[0]; i <= hi[0]; ++i)
            for (int j = lo[1]; j <= hi[1]; ++j)
                for (int k = lo[2]; k <= hi[2]; ++k) {
                    const int ring = std::max({std::abs(i - c[0]), std::abs(j - c[1]), std::abs(k - c[2])});
                    if (ring != r) continue;
                    const std::size_t id = cell_index(i, j, k);
                    for (std::size_t p = cell_start_[id]; p < cell_start_[id + 1]; ++p) {
                        const Vec3 d = points_[p] - q;
                        best = std::min(best, dot(d, d));
                    }
                }
        // distance from q to the unvisited cells
        double bound = std::numeric_limits<double>::infinity();
        for (int a = 0; a < 3; ++a) {
            if (c[a] - r > 0) bound = std::min(bound, std::max(0.0, q[a] - (lo_[a] + (c[a] - r) * cell_)));
            if (c[a] + r < dims_[a] - 1)
                bound = std::min(bound, std::max(0.0, lo_[a] + (c[a] + r + 1) * cell_ - q[a]));
        }
        if (std::isinf(bound) || best <= bound * bound * (1 - 1e-12)) break;
    }
    return std::sqrt(best);
}

namespace {

double mean_nn(const std::vector<Vec3>& from, const NearestNeighbor& into) {
    std::vector<double> d(from.size());
    parallel_for(from.size(), [&](std::size_t i) { d[i] = into.distance(from[i]); });
    double s = 0;
    for (double v : d) s += v;
    return s / static_cast<double>(from.size());
}

void require_points(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    if (a.empty() || b.empty()) throw usage_error("chamfer: point sets must be non-empty");
}

} // namespace

double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    require_points(a, b);
    const NearestNeighbor na(a), nb(b);
    return mean_nn(a, nb) + mean_nn(b, na);
}

double chamfer_brute_force(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    require_points(a, b);
    auto one_way = [](const std::vector<Vec3>& x, const std::vector<Vec3>& y) {
        double s = 0;
        for (const Vec3& p : x) {
            double m = std::numeric_limits<double>::infinity();
            for (const Vec3& q : y) m = std::min(m, dot(p - q, p - q));
            s += std::sqrt(m);
        }
        return s / static_cast<double>(x.size());
    };
    return one_way(a, b) + one_way(b, a);
}

namespace {

void require_same(const ImageView& a, const ImageView& b, const char* what) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw std::invalid_argument(std::string(what) + ": image shapes differ (" + std::to_string(a.width) + "x" +
                                    std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " +
                                    std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                                    std::to_string(b.channels) + ")");
}

std::vector<double> gray(const ImageView& a) {
    std::vector<double> g(a.width * a.height);
    for (std::size_t i = 0; i < g.size(); ++i) {
        double s = 0;
        for (std::size_t c = 0; c < a.channels; ++c) s += a.data[i * a.channels + c];
        g[i] = s / static_cast<double>(a.channels);
    }
    return g;
}

} // namespace

double mse(const ImageView& a, const ImageView& b) {
    require_same(a, b, "mse");
    if (a.size() == 0) throw std::invalid_argument("mse: empty images");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return s / static_cast<double>(a.size());
}

double psnr(const ImageView& a, const ImageView& b) {
    const double m = mse(a, b);
    if (m == 0) return kPsnrCap;
    return std::min(kPsnrCap, -10.0 * std::log10(m));
}

std::vector<double> ssim_window() {
    std::vector<double> w(kSsimWindow);
    double s = 0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double x = i - kSsimWindow / 2;
        w[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
        s += w[static_cast<std::size_t>(i)];
    }
    for (double& v : w) v /= s;
    return w;
}

double ssim(const ImageView& a, const ImageView& b) {
    require_same(a, b, "ssim");
    const std::size_t win = kSsimWindow;
    if (a.width < win || a.height < win)
        throw std::invalid_argument("ssim: image " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                                    " is smaller than the 11x11 window");
    const auto ga = gray(a), gb = gray(b);
    const auto w = ssim_window();
    const std::size_t oh = a.height - win + 1, ow = a.width - win + 1;
    std::vector<double> per_row(oh);
    parallel_for(oh, [&](std::size_t y0) {
        double row = 0;
        for (std::size_t x0 = 0; x0 < ow; ++x0) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (std::size_t i = 0; i < win; ++i)
                for (std::size_t j = 0; j < win; ++j) {
                    const double wij = w[i] * w[j];
                    const double va = ga[(y0 + i) * a.width + x0 + j], vb = gb[(y0 + i) * a.width + x0 + j];
                    ma += wij * va;
                    mb += wij * vb;
                    saa += wij * va * va;
                    sbb += wij * vb * vb;
                    sab += wij * va * vb;
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            row += ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) /
                   ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
        }
        per_row[y0] = row;
    });
    double s = 0;
    for (double v : per_row) s += v;
    return s / static_cast<double>(oh * ow);
}

LatentStats latent_stats(const std::vector<nets::LatentSet>& latents) {
    if (latents.empty()) throw usage_error("latent_stats: no latents");
    double s = 0;
    std::size_t n = 0;
    for (const auto& l : latents) {
        for (double v : l.tokens.data()) s += v;
        n += l.tokens.size();
    }
    if (n == 0) throw usage_error("latent_stats: latents are empty");
    const double mean = s / static_cast<double>(n);
    double ss = 0;
    for (const auto& l : latents)
        for (double v : l.tokens.data()) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(n))};
}

void EvalReport::finalize() {
    auto avg = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    psnr_mean = avg(psnr);
    ssim_mean = avg(ssim);
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["views"] = psnr.size();
    j["psnr"] = psnr;
    j["ssim"] = ssim;
    j["psnr_mean"] = psnr_mean;
    j["ssim_mean"] = ssim_mean;
    if (has_chamfer)
        j["chamfer"] = chamfer;
    else
        j["chamfer"] = nullptr;
    j["latent_mean"] = latent.mean;
    j["latent_std"] = latent.std;
    j["config"] = config;
    return j.dump(2) + "\n";
}

} // namespace lito::metrics
