// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/scenes.hpp"

#include "lito/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace lito::scene {

// ---------------------------------------------------------------------------
// Camera

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_deg, int width, int height) {
    const Vec3 forward = normalized(target - eye);
    Vec3 up_dir = up;
    if (std::abs(dot(forward, normalized(up))) > 1.0 - 1e-9) up_dir = Vec3{0, 0, 1};
    const Vec3 right = normalized(cross(forward, up_dir));
    const Vec3 down = cross(forward, right);
    Camera cam;
    cam.rotation = {right.x, right.y, right.z, down.x, down.y, down.z, forward.x, forward.y, forward.z};
    cam.translation = -Vec3{dot(right, eye), dot(down, eye), dot(forward, eye)};
    const double focal = (width / 2.0) / std::tan(fov_deg * std::numbers::pi / 360.0);
    cam.intrinsics = {focal, focal, width / 2.0, height / 2.0, width, height};
    cam.fov_deg = fov_deg;
    return cam;
}

Camera Camera::from_pose(const std::array<double, 12>& p, const Intrinsics& intrinsics) {
    Camera cam;
    cam.rotation = {p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]};
    cam.translation = {p[3], p[7], p[11]};
    cam.intrinsics = intrinsics;
    cam.fov_deg = 2.0 * std::atan((intrinsics.width / 2.0) / intrinsics.fx) * 180.0 / std::numbers::pi;
    return cam;
}

Vec3 Camera::center() const {
    const auto& r = rotation;
    const Vec3& t = translation;
    return -Vec3{r[0] * t.x + r[3] * t.y + r[6] * t.z, r[1] * t.x + r[4] * t.y + r[7] * t.z,
                 r[2] * t.x + r[5] * t.y + r[8] * t.z};
}

Vec3 Camera::to_camera(const Vec3& w) const {
    const auto& r = rotation;
    return Vec3{r[0] * w.x + r[1] * w.y + r[2] * w.z, r[3] * w.x + r[4] * w.y + r[5] * w.z,
                r[6] * w.x + r[7] * w.y + r[8] * w.z} +
           translation;
}

Vec3 Camera::ray_direction(double u, double v) const {
    const Vec3 c{(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0};
    const auto& r = rotation;
    // R^T c
    return normalized(Vec3{r[0] * c.x + r[3] * c.y + r[6] * c.z, r[1] * c.x + r[4] * c.y + r[7] * c.z,
                           r[2] * c.x + r[5] * c.y + r[8] * c.z});
}

std::optional<std::array<double, 2>> Camera::project(const Vec3& world) const {
    const Vec3 c = to_camera(world);
    if (c.z <= 0.0) return std::nullopt;
    return std::array<double, 2>{intrinsics.fx * c.x / c.z + intrinsics.cx, intrinsics.fy * c.y / c.z + intrinsics.cy};
}

std::array<double, 12> Camera::pose_3x4() const {
    const auto& r = rotation;
    return {r[0], r[1], r[2], translation.x, r[3], r[4], r[5], translation.y, r[6], r[7], r[8], translation.z};
}

std::vector<Camera> cameras_on_sphere(int n_views, double radius, double fov_deg, int resolution) {
    if (n_views < 1) throw usage_error("cameras_on_sphere: n_views must be >= 1");
    const double golden_angle = std::numbers::pi * (3.0 - std::sqrt(5.0));
    std::vector<Camera> cams;
    cams.reserve(static_cast<std::size_t>(n_views));
    for (int i = 0; i < n_views; ++i) {
        const double y = 1.0 - (2.0 * i + 1.0) / n_views;
        const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
        const double phi = golden_angle * i;
        const Vec3 dir{r * std::sin(phi), y, r * std::cos(phi)};
        cams.push_back(Camera::look_at(normalized(dir) * radius, {0, 0, 0}, {0, 1, 0}, fov_deg, resolution, resolution));
    }
    return cams;
}

// ---------------------------------------------------------------------------
// Scene description

std::array<Vec3, 2> bounding_box(const Scene& scene) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    Vec3 lo{inf, inf, inf}, hi{-inf, -inf, -inf};
    for (const auto& p : scene.primitives) {
        Vec3 c, h;
        if (const auto* s = std::get_if<Sphere>(&p.shape)) {
            c = s->center;
            h = {s->radius, s->radius, s->radius};
        } else {
            const auto& b = std::get<Box>(p.shape);
            c = b.center;
            h = b.half_extents;
        }
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], c[k] - h[k]);
            hi[k] = std::max(hi[k], c[k] + h[k]);
        }
    }
    return {lo, hi};
}

void box_normalize(Scene& scene) {
    if (scene.primitives.empty()) return;
    const auto [lo, hi] = bounding_box(scene);
    const Vec3 center = (lo + hi) * 0.5;
    const double half = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z}) * 0.5;
    const double s = 1.0 / half;
    for (auto& p : scene.primitives) {
        if (auto* sp = std::get_if<Sphere>(&p.shape)) {
            sp->center = (sp->center - center) * s;
            sp->radius *= s;
        } else {
            auto& b = std::get<Box>(p.shape);
            b.center = (b.center - center) * s;
            b.half_extents = b.half_extents * s;
        }
    }
    for (auto& l : scene.lights)
        if (auto* pl = std::get_if<PointLight>(&l)) pl->position = (pl->position - center) * s;
}

namespace {

// One "<kind> key v... key v..." line split into keyed numeric arrays.
struct Record {
    std::string kind;
    std::map<std::string, std::vector<double>> values;
    int line = 0;
};

[[noreturn]] void scene_error(int line, const std::string& what) {
    throw usage_error("scene line " + std::to_string(line) + ": " + what);
}

Vec3 take_vec3(const Record& r, const std::string& key, std::optional<Vec3> fallback = std::nullopt) {
    auto it = r.values.find(key);
    if (it == r.values.end()) {
        if (fallback) return *fallback;
        scene_error(r.line, r.kind + " requires '" + key + "'");
    }
    if (it->second.size() != 3) scene_error(r.line, "'" + key + "' expects 3 numbers");
    return {it->second[0], it->second[1], it->second[2]};
}

double take_scalar(const Record& r, const std::string& key, std::optional<double> fallback = std::nullopt) {
    auto it = r.values.find(key);
    if (it == r.values.end()) {
        if (fallback) return *fallback;
        scene_error(r.line, r.kind + " requires '" + key + "'");
    }
    if (it->second.size() != 1) scene_error(r.line, "'" + key + "' expects 1 number");
    return it->second[0];
}

void check_keys(const Record& r, std::initializer_list<const char*> allowed) {
    for (const auto& [k, v] : r.values) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
            scene_error(r.line, "unknown key '" + k + "' for " + r.kind);
        }
    }
}

Material take_material(const Record& r) {
    Material m;
    m.albedo = take_vec3(r, "albedo", m.albedo);
    m.specular = take_scalar(r, "specular", m.specular);
    m.exponent = take_scalar(r, "exponent", m.exponent);
    return m;
}

bool is_number(const std::string& tok) {
    char* end = nullptr;
    std::strtod(tok.c_str(), &end);
    return end != tok.c_str() && *end == '\0';
}

} // namespace

Scene parse_scene(const std::string& text) {
    Scene scene;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::vector<std::string> toks;
        for (std::string t; ls >> t;) toks.push_back(t);
        if (toks.empty()) continue;

        Record rec;
        rec.kind = toks[0];
        rec.line = line_no;
        std::string key;
        for (std::size_t i = 1; rec.kind != "ambient" && i < toks.size(); ++i) {
            if (is_number(toks[i])) {
                if (key.empty()) scene_error(line_no, "value '" + toks[i] + "' without a key");
                rec.values[key].push_back(std::strtod(toks[i].c_str(), nullptr));
            } else {
                key = toks[i];
                if (rec.values.count(key)) scene_error(line_no, "duplicate key '" + key + "'");
                rec.values[key];
            }
        }

        if (rec.kind == "ambient") {
            if (toks.size() != 4 || !is_number(toks[1]) || !is_number(toks[2]) || !is_number(toks[3]))
                scene_error(line_no, "ambient expects 3 numbers");
            scene.ambient = {std::stod(toks[1]), std::stod(toks[2]), std::stod(toks[3])};
        } else if (rec.kind == "sphere") {
            check_keys(rec, {"center", "radius", "albedo", "specular", "exponent"});
            Sphere s{take_vec3(rec, "center"), take_scalar(rec, "radius")};
            if (!(s.radius > 0)) scene_error(line_no, "sphere radius must be positive");
            scene.primitives.push_back({s, take_material(rec)});
        } else if (rec.kind == "box") {
            check_keys(rec, {"center", "half", "albedo", "specular", "exponent"});
            Box b{take_vec3(rec, "center"), take_vec3(rec, "half")};
            if (!(b.half_extents.x > 0 && b.half_extents.y > 0 && b.half_extents.z > 0))
                scene_error(line_no, "box half extents must be positive");
            scene.primitives.push_back({b, take_material(rec)});
        } else if (rec.kind == "point_light") {
            check_keys(rec, {"position", "intensity"});
            scene.lights.push_back(PointLight{take_vec3(rec, "position"), take_vec3(rec, "intensity")});
        } else if (rec.kind == "directional_light") {
            check_keys(rec, {"direction", "intensity"});
            const Vec3 d = take_vec3(rec, "direction");
            if (norm(d) == 0.0) scene_error(line_no, "directional light needs a non-zero direction");
            scene.lights.push_back(DirectionalLight{normalized(d), take_vec3(rec, "intensity")});
        } else {
            scene_error(line_no, "unknown entry '" + rec.kind + "'");
        }
    }
    if (scene.primitives.empty()) throw usage_error("scene has no primitives");
    return scene;
}

Scene load_scene(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open scene file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_scene(ss.str());
}

std::string format_scene(const Scene& scene) {
    std::ostringstream os;
    os.precision(17);
    auto v3 = [&](const Vec3& v) { os << v.x << ' ' << v.y << ' ' << v.z; };
    os << "ambient ";
    v3(scene.ambient);
    os << '\n';
    for (const auto& p : scene.primitives) {
        if (const auto* s = std::get_if<Sphere>(&p.shape)) {
            os << "sphere center ";
            v3(s->center);
            os << " radius " << s->radius;
        } else {
            const auto& b = std::get<Box>(p.shape);
            os << "box center ";
            v3(b.center);
            os << " half ";
            v3(b.half_extents);
        }
        os << " albedo ";
        v3(p.material.albedo);
        os << " specular " << p.material.specular << " exponent " << p.material.exponent << '\n';
    }
    for (const auto& l : scene.lights) {
        if (const auto* pl = std::get_if<PointLight>(&l)) {
            os << "point_light position ";
            v3(pl->position);
            os << " intensity ";
            v3(pl->intensity);
        } else {
            const auto& dl = std::get<DirectionalLight>(l);
            os << "directional_light direction ";
            v3(dl.direction);
            os << " intensity ";
            v3(dl.intensity);
        }
        os << '\n';
    }
    return os.str();
}

Scene demo_scene() {
    Scene s;
    s.ambient = {0.15, 0.15, 0.15};
    s.primitives.push_back({Sphere{{-0.38, 0.0, 0.0}, 0.5}, Material{{0.85, 0.32, 0.25}, 0.6, 24.0}});
    s.primitives.push_back({Box{{0.52, -0.1, 0.05}, {0.3, 0.4, 0.35}}, Material{{0.25, 0.5, 0.85}, 0.5, 16.0}});
    s.lights.push_back(PointLight{{2.5, 3.0, 2.0}, {0.6, 0.6, 0.6}});
    s.lights.push_back(PointLight{{-3.0, -1.0, -2.5}, {0.45, 0.45, 0.5}});
    box_normalize(s);
    return s;
}

// ---------------------------------------------------------------------------
// Ray tracing

bool RgbdImage::foreground(int px, int py) const {
    return std::isfinite(depth[static_cast<std::size_t>(py) * width + px]);
}

Vec3 RgbdImage::color(int px, int py) const {
    const std::size_t i = (static_cast<std::size_t>(py) * width + px) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

namespace {

std::optional<Hit> intersect_sphere(const Sphere& s, const Vec3& o, const Vec3& d) {
    const Vec3 oc = o - s.center;
    const double b = dot(oc, d);
    const double c = dot(oc, oc) - s.radius * s.radius;
    const double disc = b * b - c;
    if (disc < 0) return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t <= 0) t = -b + sq;
    if (t <= 0) return std::nullopt;
    return Hit{t, normalized(o + d * t - s.center), 0};
}

std::optional<Hit> intersect_box(const Box& b, const Vec3& o, const Vec3& d) {
    double t_near = -std::numeric_limits<double>::infinity();
    double t_far = std::numeric_limits<double>::infinity();
    int near_axis = 0, far_axis = 0;
    for (int k = 0; k < 3; ++k) {
        const double lo = b.center[k] - b.half_extents[k];
        const double hi = b.center[k] + b.half_extents[k];
        if (d[k] == 0.0) {
            if (o[k] < lo || o[k] > hi) return std::nullopt;
            continue;
        }
        double t0 = (lo - o[k]) / d[k];
        double t1 = (hi - o[k]) / d[k];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > t_near) {
            t_near = t0;
            near_axis = k;
        }
        if (t1 < t_far) {
            t_far = t1;
            far_axis = k;
        }
    }
    if (t_near > t_far || t_far <= 0) return std::nullopt;
    const bool inside = t_near <= 0;
    const double t = inside ? t_far : t_near;
    const int axis = inside ? far_axis : near_axis;
    Vec3 n;
    const Vec3 p = o + d * t;
    n[axis] = p[axis] > b.center[axis] ? 1.0 : -1.0;
    return Hit{t, n, 0};
}

} // namespace

std::optional<Hit> intersect(const Scene& scene, const Vec3& origin, const Vec3& dir) {
    std::optional<Hit> best;
    for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
        const auto& shape = scene.primitives[i].shape;
        std::optional<Hit> h = std::holds_alternative<Sphere>(shape)
                                   ? intersect_sphere(std::get<Sphere>(shape), origin, dir)
                                   : intersect_box(std::get<Box>(shape), origin, dir);
        if (h && (!best || h->distance < best->distance)) {
            h->primitive = i;
            best = h;
        }
    }
    return best;
}

Vec3 shade(const Scene& scene, const Vec3& origin, const Vec3& dir, const Hit& hit) {
    const Material& m = scene.primitives[hit.primitive].material;
    const Vec3 p = origin + dir * hit.distance;
    const Vec3& n = hit.normal;
    const Vec3 v = -dir;
    Vec3 c = mul(scene.ambient, m.albedo);
    for (const auto& light : scene.lights) {
        Vec3 l, intensity;
        if (const auto* pl = std::get_if<PointLight>(&light)) {
            l = normalized(pl->position - p);
            intensity = pl->intensity;
        } else {
            const auto& dl = std::get<DirectionalLight>(light);
            l = -dl.direction;
            intensity = dl.intensity;
        }
        const double ndl = dot(n, l);
        if (ndl <= 0) continue; // surface faces away from the light
        const Vec3 r = n * (2.0 * ndl) - l;
        const double spec = m.specular * std::pow(std::max(0.0, dot(r, v)), m.exponent);
        c += mul(m.albedo * ndl + Vec3{spec, spec, spec}, intensity);
    }
    return {std::clamp(c.x, 0.0, 1.0), std::clamp(c.y, 0.0, 1.0), std::clamp(c.z, 0.0, 1.0)};
}

RgbdImage render_rgbd(const Scene& scene, const Camera& camera) {
    RgbdImage img;
    img.width = camera.intrinsics.width;
    img.height = camera.intrinsics.height;
    const auto npix = static_cast<std::size_t>(img.width) * img.height;
    img.rgb.assign(npix * 3, 0.0f);
    img.depth.assign(npix, std::numeric_limits<float>::infinity());
    const Vec3 origin = camera.center();
    parallel_for(static_cast<std::size_t>(img.height), [&](std::size_t py) {
        for (int px = 0; px < img.width; ++px) {
            const Vec3 dir = camera.ray_direction(px + 0.5, static_cast<double>(py) + 0.5);
            const auto hit = intersect(scene, origin, dir);
            if (!hit) continue;
            const std::size_t i = py * img.width + px;
            const Vec3 c = shade(scene, origin, dir, *hit);
            img.rgb[i * 3 + 0] = static_cast<float>(c.x);
            img.rgb[i * 3 + 1] = static_cast<float>(c.y);
            img.rgb[i * 3 + 2] = static_cast<float>(c.z);
            img.depth[i] = static_cast<float>(hit->distance);
        }
    });
    return img;
}

Backprojection backproject(const Camera& camera, int px, int py, double depth) {
    if (!std::isfinite(depth)) throw std::invalid_argument("backproject: depth is not finite");
    const Vec3 r = camera.ray_direction(px + 0.5, py + 0.5);
    return {camera.center() + r * depth, -r};
}

// ---------------------------------------------------------------------------
// Analytic surface oracle

namespace {

bool strictly_inside(const Primitive& p, const Vec3& x, double margin) {
    if (const auto* s = std::get_if<Sphere>(&p.shape)) return norm(x - s->center) < s->radius - margin;
    const auto& b = std::get<Box>(p.shape);
    for (int k = 0; k < 3; ++k)
        if (std::abs(x[k] - b.center[k]) >= b.half_extents[k] - margin) return false;
    return true;
}

double primitive_area(const Primitive& p) {
    if (const auto* s = std::get_if<Sphere>(&p.shape)) return 4.0 * std::numbers::pi * s->radius * s->radius;
    const Vec3& h = std::get<Box>(p.shape).half_extents;
    return 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z);
}

Vec3 sample_on(const Primitive& p, Rng& rng) {
    if (const auto* s = std::get_if<Sphere>(&p.shape)) {
        Vec3 g{normal01(rng), normal01(rng), normal01(rng)};
        while (norm(g) < 1e-12) g = {normal01(rng), normal01(rng), normal01(rng)};
        return s->center + normalized(g) * s->radius;
    }
    const auto& b = std::get<Box>(p.shape);
    const Vec3& h = b.half_extents;
    const std::array<double, 3> face_area{h.y * h.z, h.x * h.z, h.x * h.y};
    double u = uniform01(rng) * (face_area[0] + face_area[1] + face_area[2]);
    int axis = 0;
    while (axis < 2 && u >= face_area[static_cast<std::size_t>(axis)]) u -= face_area[static_cast<std::size_t>(axis++)];
    Vec3 q;
    for (int k = 0; k < 3; ++k) q[k] = (2.0 * uniform01(rng) - 1.0) * h[k];
    q[axis] = uniform01(rng) < 0.5 ? -h[axis] : h[axis];
    return b.center + q;
}

} // namespace

std::vector<Vec3> sample_surface(const Scene& scene, std::size_t n, Rng& rng) {
    std::vector<double> cdf;
    double total = 0;
    for (const auto& p : scene.primitives) cdf.push_back(total += primitive_area(p));
    std::vector<Vec3> out;
    out.reserve(n);
    while (out.size() < n) {
        const double u = uniform01(rng) * total;
        const auto idx = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        const std::size_t k = std::min(idx, scene.primitives.size() - 1);
        const Vec3 x = sample_on(scene.primitives[k], rng);
        bool hidden = false;
        for (std::size_t j = 0; j < scene.primitives.size() && !hidden; ++j)
            hidden = j != k && strictly_inside(scene.primitives[j], x, 0.0);
        if (!hidden) out.push_back(x);
    }
    return out;
}

double surface_distance(const Scene& scene, const Vec3& x) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : scene.primitives) {
        double d;
        if (const auto* s = std::get_if<Sphere>(&p.shape)) {
            d = std::abs(norm(x - s->center) - s->radius);
        } else {
            const auto& b = std::get<Box>(p.shape);
            Vec3 q;
            for (int k = 0; k < 3; ++k) q[k] = std::abs(x[k] - b.center[k]) - b.half_extents[k];
            const Vec3 outside{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
            const double inside = std::min(std::max({q.x, q.y, q.z}), 0.0);
            d = std::abs(norm(outside) + inside);
        }
        best = std::min(best, d);
    }
    return best;
}

// ---------------------------------------------------------------------------
// RGBD dump

void write_rgbd(const std::string& path, const RgbdImage& image, const Camera& camera) {
    BinaryWriter w(path);
    w.magic("RGBD");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(image.width));
    w.u32(static_cast<std::uint32_t>(image.height));
    for (double v : camera.pose_3x4()) w.f32(static_cast<float>(v));
    const auto& k = camera.intrinsics;
    for (double v : {k.fx, k.fy, k.cx, k.cy}) w.f32(static_cast<float>(v));
    const std::size_t npix = static_cast<std::size_t>(image.width) * image.height;
    std::vector<float> px(npix * 4);
    for (std::size_t i = 0; i < npix; ++i) {
        px[i * 4 + 0] = image.rgb[i * 3 + 0];
        px[i * 4 + 1] = image.rgb[i * 3 + 1];
        px[i * 4 + 2] = image.rgb[i * 3 + 2];
        px[i * 4 + 3] = image.depth[i];
    }
    w.f32s(px);
    w.close();
}

std::pair<RgbdImage, Camera> read_rgbd(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("RGBD");
    r.expect_version(1);
    RgbdImage img;
    img.width = static_cast<int>(r.u32());
    img.height = static_cast<int>(r.u32());
    if (img.width <= 0 || img.height <= 0 || img.width > 1 << 15 || img.height > 1 << 15)
        throw FormatError(FormatError::Reason::malformed, path + ": bad image size");
    std::array<double, 12> pose{};
    for (double& v : pose) v = r.f32();
    Intrinsics k;
    k.fx = r.f32();
    k.fy = r.f32();
    k.cx = r.f32();
    k.cy = r.f32();
    k.width = img.width;
    k.height = img.height;
    const std::size_t npix = static_cast<std::size_t>(img.width) * img.height;
    const auto px = r.f32s(npix * 4);
    img.rgb.resize(npix * 3);
    img.depth.resize(npix);
    for (std::size_t i = 0; i < npix; ++i) {
        img.rgb[i * 3 + 0] = px[i * 4 + 0];
        img.rgb[i * 3 + 1] = px[i * 4 + 1];
        img.rgb[i * 3 + 2] = px[i * 4 + 2];
        img.depth[i] = px[i * 4 + 3];
    }
    return {std::move(img), Camera::from_pose(pose, k)};
}

} // namespace lito::scene
