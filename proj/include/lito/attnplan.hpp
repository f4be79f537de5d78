// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Sparse attention plans: nearest-query patches for the input
// cross-attention and (half-cell shifted) voxel groups for self-attention.
#pragma once

#include "lito/autodiff.hpp"
#include "lito/common.hpp"

#include <cstdint>
#include <vector>

namespace lito::plan {

/// k distinct uniform-random indices in [0, n), in draw order.
std::vector<std::size_t> select_queries(std::size_t n, std::size_t k, Rng& rng);

struct PatchPlan {
    std::vector<std::size_t> query_indices; // k indices into the input samples
    std::vector<int> assignment;            // per input sample, rank of its query

    std::size_t num_queries() const { return query_indices.size(); }
    std::vector<std::size_t> patch_sizes() const;
};

/// Nearest query by Euclidean distance; ties go to the lowest query rank.
/// Uses uniform-grid bucketing with an exact stopping bound.
PatchPlan assign_patches(const std::vector<Vec3>& positions, const std::vector<std::size_t>& query_indices);
/// O(N k) reference scan with the same tie rule.
std::vector<int> assign_patches_brute_force(const std::vector<Vec3>& positions,
                                            const std::vector<std::size_t>& query_indices);

struct VoxelGroups {
    int resolution = 1;
    bool shifted = false;
    std::vector<std::vector<int>> groups; // ordered by cell, members ascending
    std::vector<int> group_of;            // per token
};

/// Cell per axis: floor((x + 1 + offset) / w) clamped to [0, resolution - 1],
/// w = 2 / resolution, offset = w / 2 when shifted.
int group_cell(double x, int resolution, bool shifted);
VoxelGroups voxel_groups(const std::vector<Vec3>& positions, int resolution, bool shifted);

/// Row-major boolean admissibility, rows attend to columns.
struct Mask {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> allowed;

    bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
    std::size_t row_count(std::size_t r) const;
};

/// Query q admits input i iff assignment[i] == q.
Mask plan_to_mask(const PatchPlan& plan);
/// Token a admits token b iff they share a group.
Mask plan_to_mask(const VoxelGroups& groups);

/// Additive attention bias: 0 where allowed, -1e9 elsewhere. Shape [rows, cols].
ad::Tensor additive_mask(const Mask& mask);

} // namespace lito::plan
