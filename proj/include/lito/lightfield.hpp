// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Surface light-field samples (position, outgoing direction, radiance) taken
// from multi-view RGBD, plus occupancy grids and the on-disk dataset layout.
#pragma once

#include "lito/common.hpp"
#include "lito/scenes.hpp"

#include <array>
#include <string>
#include <vector>

namespace lito::lf {

struct LightFieldSample {
    Vec3 x;     // surface position in [-1, 1]^3
    Vec3 dir;   // unit direction from the surface toward the observing camera
    Vec3 color; // RGB in [0, 1]
};

struct SampleSet {
    std::vector<LightFieldSample> samples;

    std::size_t count() const { return samples.size(); }
    std::vector<Vec3> positions() const;
};

/// One sample per foreground pixel, ordered by (view, row-major pixel).
/// Throws when no view has a foreground pixel.
SampleSet sample_light_field(const std::vector<scene::RgbdImage>& views, const std::vector<scene::Camera>& cameras);

/// Disjoint uniform split: `n_input` samples for the encoder, the rest held
/// out as supervision. Deterministic for a given rng state.
std::pair<SampleSet, SampleSet> split_input_supervision(const SampleSet& full, std::size_t n_input, Rng& rng);

/// Sparse occupancy on a resolution^3 grid over [-1, 1]^3.
struct OccupancyGrid {
    int resolution = 0;
    std::vector<std::array<int, 3>> occupied; // sorted lexicographically, unique

    bool empty() const { return occupied.empty(); }
    std::size_t size() const { return occupied.size(); }
    double cell_width() const { return 2.0 / resolution; }
    Vec3 center(const std::array<int, 3>& v) const;
    bool contains(const std::array<int, 3>& v) const;
};

/// Cell index of a coordinate: floor((x + 1) / 2 * resolution), clamped.
int voxel_index(double x, int resolution);

OccupancyGrid occupancy_from_points(const std::vector<Vec3>& points, int resolution, int min_count = 1);

/// Text form: "res=<n>" header then one "i j k" line per occupied voxel.
void write_occupancy(const std::string& path, const OccupancyGrid& grid);
OccupancyGrid read_occupancy(const std::string& path);

/// "SLF1" binary: magic, u32 version 1, u64 count, count x 9 f32
/// (x, y, z, dx, dy, dz, r, g, b).
void write_dataset(const std::string& path, const SampleSet& set);
SampleSet read_dataset(const std::string& path);

/// Rendered training data as laid out by `lito render-dataset`.
struct Dataset {
    scene::Scene scene;
    std::vector<scene::Camera> cameras;
    std::vector<scene::RgbdImage> views;
    SampleSet samples;
};

/// Writes scene.txt, cameras.txt, view_XXX.rgbd, view_XXX.png and
/// lightfield.slf into `dir`.
void write_dataset_dir(const std::string& dir, const Dataset& data);
Dataset load_dataset_dir(const std::string& dir);

/// Full-precision camera manifest (one camera per line).
void write_cameras(const std::string& path, const std::vector<scene::Camera>& cameras);
std::vector<scene::Camera> read_cameras(const std::string& path);

} // namespace lito::lf
