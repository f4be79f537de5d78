// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Analytic object-centric scenes, pinhole cameras and an RGBD ray tracer.
//
// Camera frame: x right, y down, z forward. Pixel (i, j) covers
// [i, i+1) x [j, j+1) and its center is at (i + 0.5, j + 0.5).
#pragma once

#include "lito/common.hpp"

#include <array>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace lito::scene {

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
};

struct Camera {
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1}; // world -> camera, row-major
    Vec3 translation;                                          // camera = R * world + t
    Intrinsics intrinsics;
    double fov_deg = 40.0;

    /// Square-pixel camera at `eye` looking at `target`. The image y axis
    /// points along -up; when the view direction is (anti)parallel to `up`
    /// the +z axis is used as up instead.
    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_deg, int width,
                          int height);
    /// Rebuilds a camera from a stored [R|t] and pinhole parameters.
    static Camera from_pose(const std::array<double, 12>& pose_3x4, const Intrinsics& intrinsics);

    Vec3 center() const;
    Vec3 to_camera(const Vec3& world) const;
    /// Unit world-space direction of the ray through continuous pixel
    /// coordinates (u, v).
    Vec3 ray_direction(double u, double v) const;
    /// Continuous pixel coordinates of a world point; nullopt when the point
    /// is not in front of the camera.
    std::optional<std::array<double, 2>> project(const Vec3& world) const;
    std::array<double, 12> pose_3x4() const;
};

/// Camera centres on a Fibonacci lattice over the sphere of `radius`, all
/// looking at the origin with global up +y. For n = 1 the single camera
/// sits at (0, 0, radius).
std::vector<Camera> cameras_on_sphere(int n_views, double radius, double fov_deg, int resolution);

struct Material {
    Vec3 albedo{0.8, 0.8, 0.8};
    double specular = 0.0;
    double exponent = 32.0;
};

struct Sphere {
    Vec3 center;
    double radius = 1.0;
};

struct Box {
    Vec3 center;
    Vec3 half_extents{1, 1, 1};
};

struct Primitive {
    std::variant<Sphere, Box> shape;
    Material material;
};

struct PointLight {
    Vec3 position;
    Vec3 intensity{1, 1, 1};
};

/// `direction` is the direction the light travels.
struct DirectionalLight {
    Vec3 direction{0, -1, 0};
    Vec3 intensity{1, 1, 1};
};

using Light = std::variant<PointLight, DirectionalLight>;

struct Scene {
    std::vector<Primitive> primitives;
    std::vector<Light> lights;
    Vec3 ambient{0.1, 0.1, 0.1};
};

/// Uniformly rescales and recentres the scene so its bounding box fits
/// [-1, 1]^3 with the longest side spanning the full range. Point lights
/// move with the geometry.
void box_normalize(Scene& scene);
std::array<Vec3, 2> bounding_box(const Scene& scene);

/// Parses the line-based scene description (see docs/formats.md).
Scene parse_scene(const std::string& text);
Scene load_scene(const std::string& path);
std::string format_scene(const Scene& scene);

/// A built-in sphere + box scene with two point lights and Phong speculars.
Scene demo_scene();

struct RgbdImage {
    int width = 0, height = 0;
    std::vector<float> rgb;   // width*height*3, row-major
    std::vector<float> depth; // ray distance, +inf for background

    bool foreground(int px, int py) const;
    Vec3 color(int px, int py) const;
};

struct Hit {
    double distance;
    Vec3 normal;
    std::size_t primitive;
};

std::optional<Hit> intersect(const Scene& scene, const Vec3& origin, const Vec3& dir);
/// Phong shading of a hit point seen along `dir`.
Vec3 shade(const Scene& scene, const Vec3& origin, const Vec3& dir, const Hit& hit);
RgbdImage render_rgbd(const Scene& scene, const Camera& camera);

struct Backprojection {
    Vec3 position;
    Vec3 direction; // unit, from the surface point toward the camera
};

/// Surface point seen through the centre of pixel (px, py) at ray distance
/// `depth`. Throws for non-finite depth.
Backprojection backproject(const Camera& camera, int px, int py, double depth);

/// Area-uniform samples of the visible surface (points inside another
/// primitive are rejected).
std::vector<Vec3> sample_surface(const Scene& scene, std::size_t n, Rng& rng);
/// Distance from x to the nearest primitive surface.
double surface_distance(const Scene& scene, const Vec3& x);

/// "RGBD" per-view dump: header then width*height*(r,g,b,depth) f32.
void write_rgbd(const std::string& path, const RgbdImage& image, const Camera& camera);
std::pair<RgbdImage, Camera> read_rgbd(const std::string& path);

} // namespace lito::scene
