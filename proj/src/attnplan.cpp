// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/attnplan.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <map>
#include <numeric>

namespace lito::plan {

std::vector<std::size_t> select_queries(std::size_t n, std::size_t k, Rng& rng) {
    if (k > n) throw usage_error("select_queries: k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " samples");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + std::uniform_int_distribution<std::size_t>(0, n - 1 - i)(rng);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

std::vector<std::size_t> PatchPlan::patch_sizes() const {
    std::vector<std::size_t> sizes(query_indices.size(), 0);
    for (int a : assignment) ++sizes[static_cast<std::size_t>(a)];
    return sizes;
}

namespace {

inline double dist2(const Vec3& a, const Vec3& b) {
    const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
}

// Lexicographic (distance, rank) comparison shared by both searches.
inline bool better(double d, int rank, double best_d, int best_rank) {
    return d < best_d || (d == best_d && rank < best_rank);
}

struct QueryGrid {
    Vec3 lo;
    double cell = 1.0;
    std::array<int, 3> dims{1, 1, 1};
    std::vector<std::vector<int>> cells; // ranks, ascending

    int axis_cell(double x, int a) const {
        const double f = std::floor((x - lo[a]) / cell);
        if (!(f >= 0)) return 0;
        return static_cast<int>(std::min<double>(f, dims[a] - 1));
    }
    std::size_t flat(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k;
    }
};

QueryGrid build_grid(const std::vector<Vec3>& queries) {
    QueryGrid g;
    Vec3 lo = queries[0], hi = queries[0];
    for (const Vec3& q : queries)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], q[a]);
            hi[a] = std::max(hi[a], q[a]);
        }
    const double extent = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z, 1e-9});
    const int per_axis = std::clamp(static_cast<int>(std::cbrt(static_cast<double>(queries.size()))), 1, 64);
    g.lo = lo;
    g.cell = extent / per_axis;
    for (int a = 0; a < 3; ++a) g.dims[a] = std::clamp(static_cast<int>((hi[a] - lo[a]) / g.cell) + 1, 1, 65);
    g.cells.resize(static_cast<std::size_t>(g.dims[0]) * g.dims[1] * g.dims[2]);
    for (std::size_t r = 0; r < queries.size(); ++r) {
        const Vec3& q = queries[r];
        g.cells[g.flat(g.axis_cell(q.x, 0), g.axis_cell(q.y, 1), g.axis_cell(q.z, 2))].push_back(static_cast<int>(r));
    }
    return g;
}

int nearest(const QueryGrid& g, const std::vector<Vec3>& queries, const Vec3& p) {
    const std::array<int, 3> c{g.axis_cell(p.x, 0), g.axis_cell(p.y, 1), g.axis_cell(p.z, 2)};
    double best_d = std::numeric_limits<double>::infinity();
    int best = -1;
    const int max_ring = std::max({g.dims[0], g.dims[1], g.dims[2]});
    for (int r = 0; r <= max_ring; ++r) {
        std::array<int, 3> lo{}, hi{};
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::max(c[a] - r, 0);
            hi[a] = std::min(c[a] + r, g.dims[a] - 1);
        }
        for (int i = lo[0]; i <= hi[0]; ++i)
            for (int j = lo[1]; j <= hi[1]; ++j)
                for (int k = lo[2]; k <= hi[2]; ++k) {
                    const bool shell = std::abs(i - c[0]) == r || std::abs(j - c[1]) == r || std::abs(k - c[2]) == r;
                    if (!shell) continue;
                    for (int q : g.cells[g.flat(i, j, k)]) {
                        const double d = dist2(p, queries[static_cast<std::size_t>(q)]);
                        if (better(d, q, best_d, best)) {
                            best_d = d;
                            best = q;
                        }
                    }
                }
        // Lower bound on the distance to any cell outside the visited block.
        double bound = std::numeric_limits<double>::infinity();
        for (int a = 0; a < 3; ++a) {
            if (c[a] - r > 0) bound = std::min(bound, std::max(0.0, p[a] - (g.lo[a] + (c[a] - r) * g.cell)));
            if (c[a] + r < g.dims[a] - 1)
                bound = std::min(bound, std::max(0.0, g.lo[a] + (c[a] + r + 1) * g.cell - p[a]));
        }
        if (std::isinf(bound)) break;
        if (best >= 0 && best_d < bound * bound * (1.0 - 1e-12)) break;
    }
    return best;
}

} // namespace

PatchPlan assign_patches(const std::vector<Vec3>& positions, const std::vector<std::size_t>& query_indices) {
    if (query_indices.empty()) throw usage_error("assign_patches: no queries");
    std::vector<Vec3> queries;
    queries.reserve(query_indices.size());
    for (std::size_t q : query_indices) {
        if (q >= positions.size()) throw usage_error("assign_patches: query index out of range");
        queries.push_back(positions[q]);
    }
    const QueryGrid grid = build_grid(queries);
    PatchPlan plan;
    plan.query_indices = query_indices;
    plan.assignment.resize(positions.size());
    parallel_for(positions.size(), [&](std::size_t i) { plan.assignment[i] = nearest(grid, queries, positions[i]); });
    return plan;
}

std::vector<int> assign_patches_brute_force(const std::vector<Vec3>& positions,
                                            const std::vector<std::size_t>& query_indices) {
    std::vector<int> out(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        double best_d = std::numeric_limits<double>::infinity();
        int best = -1;
        for (std::size_t r = 0; r < query_indices.size(); ++r) {
            const double d = dist2(positions[i], positions[query_indices[r]]);
            if (better(d, static_cast<int>(r), best_d, best)) {
                best_d = d;
                best = static_cast<int>(r);
            }
        }
        out[i] = best;
    }
    return out;
}

int group_cell(double x, int resolution, bool shifted) {
    const double w = 2.0 / resolution;
    const double f = std::floor((x + 1.0 + (shifted ? 0.5 * w : 0.0)) / w);
    if (!(f >= 0)) return 0;
    return static_cast<int>(std::min<double>(f, resolution - 1));
}

VoxelGroups voxel_groups(const std::vector<Vec3>& positions, int resolution, bool shifted) {
    if (resolution < 1) throw usage_error("voxel_groups: resolution must be >= 1");
    std::map<std::array<int, 3>, std::vector<int>> cells;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const Vec3& p = positions[i];
        cells[{group_cell(p.x, resolution, shifted), group_cell(p.y, resolution, shifted),
               group_cell(p.z, resolution, shifted)}]
            .push_back(static_cast<int>(i));
    }
    VoxelGroups g;
    g.resolution = resolution;
    g.shifted = shifted;
    g.group_of.resize(positions.size());
    for (auto& [cell, members] : cells) {
        for (int m : members) g.group_of[static_cast<std::size_t>(m)] = static_cast<int>(g.groups.size());
        g.groups.push_back(std::move(members));
    }
    return g;
}

std::size_t Mask::row_count(std::size_t r) const {
    return static_cast<std::size_t>(std::count(allowed.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                               allowed.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols), 1));
}

Mask plan_to_mask(const PatchPlan& plan) {
    Mask m;
    m.rows = plan.num_queries();
    m.cols = plan.assignment.size();
    m.allowed.assign(m.rows * m.cols, 0);
    for (std::size_t i = 0; i < m.cols; ++i) m.allowed[static_cast<std::size_t>(plan.assignment[i]) * m.cols + i] = 1;
    return m;
}

Mask plan_to_mask(const VoxelGroups& groups) {
    Mask m;
    m.rows = m.cols = groups.group_of.size();
    m.allowed.assign(m.rows * m.cols, 0);
    for (std::size_t a = 0; a < m.rows; ++a)
        for (std::size_t b = 0; b < m.cols; ++b) m.allowed[a * m.cols + b] = groups.group_of[a] == groups.group_of[b];
    return m;
}

ad::Tensor additive_mask(const Mask& mask) {
    std::vector<double> v(mask.allowed.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.allowed[i] ? 0.0 : -1e9;
    return ad::Tensor::from({mask.rows, mask.cols}, std::move(v));
}

} // namespace lito::plan
