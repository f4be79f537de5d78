// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/lightfield.hpp"

#include "lito/binary_io.hpp"
#include "lito/image_io.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace lito::lf {

std::vector<Vec3> SampleSet::positions() const {
    std::vector<Vec3> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.x);
    return out;
}

SampleSet sample_light_field(const std::vector<scene::RgbdImage>& views, const std::vector<scene::Camera>& cameras) {
    if (views.size() != cameras.size())
        throw usage_error("sample_light_field: " + std::to_string(views.size()) + " views but " +
                          std::to_string(cameras.size()) + " cameras");
    std::vector<std::vector<LightFieldSample>> per_view(views.size());
    parallel_for(views.size(), [&](std::size_t v) {
        const auto& img = views[v];
        auto& out = per_view[v];
        for (int py = 0; py < img.height; ++py)
            for (int px = 0; px < img.width; ++px) {
                if (!img.foreground(px, py)) continue;
                const auto b = scene::backproject(cameras[v], px, py,
                                                  img.depth[static_cast<std::size_t>(py) * img.width + px]);
                out.push_back({b.position, b.direction, img.color(px, py)});
            }
    });
    SampleSet set;
    for (auto& v : per_view) set.samples.insert(set.samples.end(), v.begin(), v.end());
    if (set.samples.empty()) throw usage_error("sample_light_field: no foreground pixel in any view");
    return set;
}

std::pair<SampleSet, SampleSet> split_input_supervision(const SampleSet& full, std::size_t n_input, Rng& rng) {
    if (n_input > full.count())
        throw usage_error("split_input_supervision: n_input " + std::to_string(n_input) + " exceeds " +
                          std::to_string(full.count()) + " samples");
    std::vector<std::size_t> idx(full.count());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // partial Fisher-Yates
    for (std::size_t i = 0; i < n_input; ++i) {
        const std::size_t j = i + std::uniform_int_distribution<std::size_t>(0, idx.size() - 1 - i)(rng);
        std::swap(idx[i], idx[j]);
    }
    SampleSet in, held;
    in.samples.reserve(n_input);
    held.samples.reserve(full.count() - n_input);
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_input ? in : held).samples.push_back(full.samples[idx[i]]);
    return {std::move(in), std::move(held)};
}

Vec3 OccupancyGrid::center(const std::array<int, 3>& v) const {
    const double w = cell_width();
    return {-1.0 + (v[0] + 0.5) * w, -1.0 + (v[1] + 0.5) * w, -1.0 + (v[2] + 0.5) * w};
}

bool OccupancyGrid::contains(const std::array<int, 3>& v) const {
    return std::binary_search(occupied.begin(), occupied.end(), v);
}

int voxel_index(double x, int resolution) {
    const double f = std::floor((x + 1.0) / 2.0 * resolution);
    if (!(f >= 0)) return 0;
    return static_cast<int>(std::min<double>(f, resolution - 1));
}

OccupancyGrid occupancy_from_points(const std::vector<Vec3>& points, int resolution, int min_count) {
    if (resolution < 1) throw usage_error("occupancy resolution must be >= 1");
    std::vector<std::array<int, 3>> cells;
    cells.reserve(points.size());
    for (const Vec3& p : points)
        cells.push_back({voxel_index(p.x, resolution), voxel_index(p.y, resolution), voxel_index(p.z, resolution)});
    std::sort(cells.begin(), cells.end());
    OccupancyGrid g;
    g.resolution = resolution;
    for (std::size_t i = 0; i < cells.size();) {
        std::size_t j = i;
        while (j < cells.size() && cells[j] == cells[i]) ++j;
        if (static_cast<int>(j - i) >= min_count) g.occupied.push_back(cells[i]);
        i = j;
    }
    return g;
}

void write_occupancy(const std::string& path, const OccupancyGrid& grid) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open " + path + " for writing");
    out << "res=" << grid.resolution << '\n';
    for (const auto& v : grid.occupied) out << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
    if (!out) throw io_error("write failed on " + path);
}

OccupancyGrid read_occupancy(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path);
    auto bad = [&](const std::string& why) { return FormatError(FormatError::Reason::malformed, path + ": " + why); };
    std::string line;
    if (!std::getline(in, line) || line.rfind("res=", 0) != 0) throw bad("missing res=<n> header");
    OccupancyGrid g;
    try {
        g.resolution = std::stoi(line.substr(4));
    } catch (const std::exception&) {
        throw bad("bad resolution");
    }
    if (g.resolution < 1) throw bad("bad resolution");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::array<int, 3> v{};
        std::string extra;
        if (!(ss >> v[0] >> v[1] >> v[2]) || (ss >> extra)) throw bad("bad voxel line \"" + line + "\"");
        for (int c : v)
            if (c < 0 || c >= g.resolution) throw bad("voxel index out of range");
        g.occupied.push_back(v);
    }
    std::sort(g.occupied.begin(), g.occupied.end());
    g.occupied.erase(std::unique(g.occupied.begin(), g.occupied.end()), g.occupied.end());
    return g;
}

void write_dataset(const std::string& path, const SampleSet& set) {
    BinaryWriter w(path);
    w.magic("SLF1");
    w.u32(1);
    w.u64(set.count());
    std::vector<float> rec(9);
    for (const auto& s : set.samples) {
        for (int k = 0; k < 3; ++k) {
            rec[k] = static_cast<float>(s.x[k]);
            rec[3 + k] = static_cast<float>(s.dir[k]);
            rec[6 + k] = static_cast<float>(s.color[k]);
        }
        w.f32s(rec);
    }
    w.close();
}

SampleSet read_dataset(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("SLF1");
    r.expect_version(1);
    const std::uint64_t n = r.u64();
    const auto size = std::filesystem::file_size(path);
    if (n > (size - 16) / 36) throw FormatError(FormatError::Reason::truncated, path + ": truncated file");
    SampleSet set;
    set.samples.resize(n);
    const auto data = r.f32s(n * 9);
    for (std::size_t i = 0; i < n; ++i) {
        const float* p = &data[i * 9];
        set.samples[i] = {{p[0], p[1], p[2]}, {p[3], p[4], p[5]}, {p[6], p[7], p[8]}};
    }
    return set;
}

void write_cameras(const std::string& path, const std::vector<scene::Camera>& cameras) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open " + path + " for writing");
    out << "# r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 fx fy cx cy width height fov_deg\n";
    char buf[32];
    for (const auto& c : cameras) {
        for (double v : c.pose_3x4()) {
            std::snprintf(buf, sizeof buf, "%.17g ", v);
            out << buf;
        }
        const auto& k = c.intrinsics;
        for (double v : {k.fx, k.fy, k.cx, k.cy}) {
            std::snprintf(buf, sizeof buf, "%.17g ", v);
            out << buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g", c.fov_deg);
        out << k.width << ' ' << k.height << ' ' << buf << '\n';
    }
    if (!out) throw io_error("write failed on " + path);
}

std::vector<scene::Camera> read_cameras(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path);
    std::vector<scene::Camera> cams;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::array<double, 12> pose{};
        scene::Intrinsics k;
        double fov = 0;
        for (double& v : pose) ss >> v;
        ss >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height >> fov;
        if (!ss || k.width <= 0 || k.height <= 0)
            throw FormatError(FormatError::Reason::malformed, path + ": bad camera line");
        auto cam = scene::Camera::from_pose(pose, k);
        cam.fov_deg = fov;
        cams.push_back(cam);
    }
    return cams;
}

namespace {

std::string view_name(std::size_t i, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%03zu.%s", i, ext);
    return buf;
}

} // namespace

void write_dataset_dir(const std::string& dir, const Dataset& data) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw io_error("cannot create " + dir + ": " + ec.message());
    const fs::path root(dir);
    {
        std::ofstream out(root / "scene.txt");
        if (!out) throw io_error("cannot write scene.txt in " + dir);
        out << scene::format_scene(data.scene);
    }
    write_cameras((root / "cameras.txt").string(), data.cameras);
    for (std::size_t i = 0; i < data.views.size(); ++i) {
        const auto& v = data.views[i];
        scene::write_rgbd((root / view_name(i, "rgbd")).string(), v, data.cameras[i]);
        write_png((root / view_name(i, "png")).string(), Image{v.width, v.height, v.rgb});
    }
    write_dataset((root / "lightfield.slf").string(), data.samples);
}

Dataset load_dataset_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    if (!fs::is_directory(root)) throw io_error("dataset directory " + dir + " does not exist");
    Dataset d;
    d.scene = scene::load_scene((root / "scene.txt").string());
    d.cameras = read_cameras((root / "cameras.txt").string());
    for (std::size_t i = 0; i < d.cameras.size(); ++i) {
        auto [img, cam] = scene::read_rgbd((root / view_name(i, "rgbd")).string());
        d.views.push_back(std::move(img));
    }
    d.samples = read_dataset((root / "lightfield.slf").string());
    return d;
}

} // namespace lito::lf
