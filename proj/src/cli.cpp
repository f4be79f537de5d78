// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/cli.hpp"

#include "lito/binary_io.hpp"
#include "lito/flow.hpp"
#include "lito/image_io.hpp"
#include "lito/lightfield.hpp"
#include "lito/nets.hpp"
#include "lito/scenes.hpp"
#include "lito/splat.hpp"
#include "lito/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace lito::cli {

namespace fs = std::filesystem;

namespace {

struct Global {
    std::uint64_t seed = 0;
    std::string out_dir;
    int threads = 0;
};

// Relative outputs land under --out-dir when it is given.
std::string out_path(const Global& g, const std::string& p) {
    if (g.out_dir.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(g.out_dir) / p).string();
}

void ensure_parent(const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (parent.empty()) return;
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw io_error("cannot create " + parent.string() + ": " + ec.message());
}

void require_file(const std::string& path) {
    if (!fs::exists(path)) throw io_error("no such file: " + path);
}

std::string view_file(std::size_t i, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%03zu.%s", i, ext);
    return buf;
}

flow::Sampler parse_sampler(const std::string& s) {
    if (s == "euler") return flow::Sampler::euler;
    if (s == "heun") return flow::Sampler::heun;
    throw usage_error("unknown sampler '" + s + "' (expected euler or heun)");
}

// --- render-dataset

struct RenderDatasetOpts {
    std::string scene = "demo";
    int views = 24;
    double radius = 3.5, fov = 40.0;
    int res = 64;
    std::size_t surface_points = 100000;
    std::string out;
};

void render_dataset(const Global& g, const RenderDatasetOpts& o) {
    if (o.views < 1) throw usage_error("--views must be >= 1");
    if (o.res < 1) throw usage_error("--res must be >= 1");
    if (!(o.radius > 0) || !(o.fov > 0 && o.fov < 180)) throw usage_error("--radius must be > 0 and --fov in (0, 180)");
    lf::Dataset d;
    d.scene = o.scene == "demo" ? scene::demo_scene() : scene::load_scene(o.scene);
    scene::box_normalize(d.scene);
    d.cameras = scene::cameras_on_sphere(o.views, o.radius, o.fov, o.res);
    d.views.resize(d.cameras.size());
    for (std::size_t i = 0; i < d.cameras.size(); ++i) d.views[i] = scene::render_rgbd(d.scene, d.cameras[i]);
    d.samples = lf::sample_light_field(d.views, d.cameras);
    const std::string dir = out_path(g, o.out);
    lf::write_dataset_dir(dir, d);
    if (o.surface_points > 0) {
        Rng rng = make_stream(g.seed, 0x5EEDull);
        flow::write_points((fs::path(dir) / "surface.pts").string(), scene::sample_surface(d.scene, o.surface_points, rng));
    }
    std::cerr << "wrote " << d.views.size() << " views and " << d.samples.count() << " samples to " << dir << "\n";
}

// --- train

struct TrainOpts {
    std::string config, data, out;
    int steps = -1;
    bool quiet = false;
};

void train_cmd(const Global& g, const TrainOpts& o, bool seed_given) {
    train::TrainConfig c = o.config.empty() ? train::TrainConfig{} : train::load_train_config(o.config);
    if (seed_given) c.seed = g.seed;
    if (o.steps >= 0) c.total_steps = o.steps;
    c.validate();
    const lf::Dataset d = lf::load_dataset_dir(o.data);
    train::train_tokenizer(c, d, out_path(g, o.out), o.quiet);
}

// --- encode

struct EncodeOpts {
    std::string ckpt, data, out;
    int n_input = 2048;
};

void encode_cmd(const Global& g, const EncodeOpts& o) {
    require_file(o.ckpt);
    const auto [c, p] = nets::read_checkpoint(o.ckpt);
    if (o.n_input < c.k)
        throw usage_error("--n-input " + std::to_string(o.n_input) + " is below k = " + std::to_string(c.k));
    const lf::SampleSet all = lf::read_dataset((fs::path(o.data) / "lightfield.slf").string());
    if (all.count() < static_cast<std::size_t>(o.n_input))
        throw usage_error("dataset has " + std::to_string(all.count()) + " samples, fewer than --n-input");
    Rng rng = make_stream(g.seed, 0xE4C0DEull);
    ad::NoGradScope ng;
    const auto [input, rest] = lf::split_input_supervision(all, static_cast<std::size_t>(o.n_input), rng);
    const std::string out = out_path(g, o.out);
    ensure_parent(out);
    nets::write_latent(out, nets::encode(p, c, input, rng));
}

// --- decode and sample-geometry

struct FlowOpts {
    std::string sampler = "heun";
    int steps = 100;
    std::size_t n = 4096;
};

flow::SampleOptions sample_options(const Global& g, const FlowOpts& f) {
    if (f.steps < 1) throw usage_error("--steps must be >= 1");
    if (f.n < 1) throw usage_error("--n must be >= 1");
    flow::SampleOptions s;
    s.sampler = parse_sampler(f.sampler);
    s.steps = f.steps;
    s.seed = g.seed;
    return s;
}

struct DecodeOpts {
    std::string ckpt, latent, occupancy = "flow", out;
    FlowOpts flow;
};

bool has_magic(const std::string& path, const char* magic) {
    std::ifstream in(path, std::ios::binary);
    char m[4] = {};
    in.read(m, 4);
    return in && std::string(m, 4) == magic;
}

void decode_cmd(const Global& g, const DecodeOpts& o) {
    require_file(o.ckpt);
    require_file(o.latent);
    const auto [c, p] = nets::read_checkpoint(o.ckpt);
    const nets::LatentSet lat = nets::read_latent(o.latent);
    ad::NoGradScope ng;
    lf::OccupancyGrid grid;
    if (o.occupancy == "flow") {
        grid = flow::estimate_occupancy_via_sampling(flow::network_velocity(p, c, lat), o.flow.n, c.grid_res,
                                                     sample_options(g, o.flow));
    } else {
        require_file(o.occupancy);
        if (has_magic(o.occupancy, "PTS1"))
            grid = lf::occupancy_from_points(flow::read_points(o.occupancy), c.grid_res);
        else if (has_magic(o.occupancy, "SLF1"))
            grid = lf::occupancy_from_points(lf::read_dataset(o.occupancy).positions(), c.grid_res);
        else
            grid = lf::read_occupancy(o.occupancy);
    }
    if (grid.resolution != c.grid_res)
        throw usage_error("occupancy resolution " + std::to_string(grid.resolution) + " does not match grid_res " +
                          std::to_string(c.grid_res));
    if (grid.empty()) throw usage_error("occupancy grid is empty");
    const std::string out = out_path(g, o.out);
    ensure_parent(out);
    splat::write_ply(out, splat::to_gaussians(nets::decode_gaussians(p, c, lat, grid)));
}

struct SampleOpts {
    std::string ckpt, latent, out;
    FlowOpts flow;
};

void sample_cmd(const Global& g, const SampleOpts& o) {
    require_file(o.ckpt);
    require_file(o.latent);
    const auto [c, p] = nets::read_checkpoint(o.ckpt);
    const nets::LatentSet lat = nets::read_latent(o.latent);
    const auto opt = sample_options(g, o.flow);
    ad::NoGradScope ng;
    const auto pts = flow::sample_points(flow::network_velocity(p, c, lat), o.flow.n, opt);
    const std::string out = out_path(g, o.out);
    ensure_parent(out);
    flow::write_points(out, pts);
}

// --- render

struct RenderOpts {
    std::string splats, cameras, out;
    int view = 0, sh_deg = 3;
    bool all = false;
};

void write_render(const std::string& path, const splat::Render& r) {
    const std::string ext = fs::path(path).extension().string();
    if (ext == ".png")
        splat::write_render_png(path, r);
    else if (ext == ".raw")
        splat::write_render_raw(path, r);
    else
        throw usage_error("--out must end in .png or .raw, got " + path);
}

void render_cmd(const Global& g, const RenderOpts& o) {
    if (o.sh_deg < 0 || o.sh_deg > 3) throw usage_error("--sh-deg must be 0..3");
    require_file(o.splats);
    require_file(o.cameras);
    const auto gaussians = splat::read_ply(o.splats);
    const auto cams = lf::read_cameras(o.cameras);
    const std::string out = out_path(g, o.out);
    if (o.all) {
        std::error_code ec;
        fs::create_directories(out, ec);
        if (ec) throw io_error("cannot create " + out + ": " + ec.message());
        for (std::size_t i = 0; i < cams.size(); ++i) {
            const auto r = splat::rasterize(gaussians, cams[i], o.sh_deg);
            splat::write_render_png((fs::path(out) / view_file(i, "png")).string(), r);
            splat::write_render_raw((fs::path(out) / view_file(i, "raw")).string(), r);
        }
        return;
    }
    if (o.view < 0 || static_cast<std::size_t>(o.view) >= cams.size())
        throw usage_error("--view " + std::to_string(o.view) + " out of range (" + std::to_string(cams.size()) +
                          " cameras)");
    ensure_parent(out);
    write_render(out, splat::rasterize(gaussians, cams[static_cast<std::size_t>(o.view)], o.sh_deg));
}

// --- eval

struct EvalOpts {
    std::string gt, pred, report, ckpt;
    std::vector<std::string> latents;
};

std::vector<double> load_pred_view(const fs::path& dir, std::size_t i, int w, int h) {
    std::vector<double> rgb;
    int pw = 0, ph = 0;
    if (const fs::path raw = dir / view_file(i, "raw"); fs::exists(raw)) {
        const RawImage r = read_raw(raw.string());
        if (r.channels < 3) throw usage_error(raw.string() + ": need at least 3 channels");
        pw = r.width;
        ph = r.height;
        const std::size_t n = static_cast<std::size_t>(pw) * ph, ch = static_cast<std::size_t>(r.channels);
        rgb.resize(n * 3);
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t c = 0; c < 3; ++c) rgb[k * 3 + c] = r.values[k * ch + c];
    } else if (const fs::path rgbd = dir / view_file(i, "rgbd"); fs::exists(rgbd)) {
        const auto [img, cam] = scene::read_rgbd(rgbd.string());
        pw = img.width;
        ph = img.height;
        rgb.assign(img.rgb.begin(), img.rgb.end());
    } else if (const fs::path png = dir / view_file(i, "png"); fs::exists(png)) {
        const Image img = read_png(png.string());
        pw = img.width;
        ph = img.height;
        rgb.assign(img.rgb.begin(), img.rgb.end());
    } else {
        throw io_error("no prediction for view " + std::to_string(i) + " in " + dir.string());
    }
    if (pw != w || ph != h)
        throw usage_error("view " + std::to_string(i) + ": prediction is " + std::to_string(pw) + "x" +
                          std::to_string(ph) + ", ground truth " + std::to_string(w) + "x" + std::to_string(h));
    return rgb;
}

std::optional<std::vector<Vec3>> point_set(const fs::path& dir, std::initializer_list<const char*> names) {
    for (const char* n : names) {
        const fs::path p = dir / n;
        if (!fs::exists(p)) continue;
        if (std::string(n) == "lightfield.slf") return lf::read_dataset(p.string()).positions();
        return flow::read_points(p.string());
    }
    return std::nullopt;
}

} // namespace

metrics::EvalReport evaluate_dirs(const std::string& gt_dir, const std::string& pred_dir) {
    if (!fs::is_directory(pred_dir)) throw io_error("prediction directory " + pred_dir + " does not exist");
    const fs::path gt(gt_dir), pred(pred_dir);
    if (!fs::is_directory(gt)) throw io_error("ground-truth directory " + gt_dir + " does not exist");
    const auto cams = lf::read_cameras((gt / "cameras.txt").string());
    metrics::EvalReport rep;
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const auto [img, cam] = scene::read_rgbd((gt / view_file(i, "rgbd")).string());
        const std::vector<double> want(img.rgb.begin(), img.rgb.end());
        const std::vector<double> got = load_pred_view(pred, i, img.width, img.height);
        const metrics::ImageView a{got.data(), static_cast<std::size_t>(img.width), static_cast<std::size_t>(img.height), 3};
        const metrics::ImageView b{want.data(), a.width, a.height, 3};
        rep.psnr.push_back(metrics::psnr(a, b));
        rep.ssim.push_back(metrics::ssim(a, b));
    }
    const auto gp = point_set(gt, {"surface.pts", "lightfield.slf"});
    const auto pp = point_set(pred, {"points.pts", "surface.pts", "lightfield.slf"});
    if (gp && pp) {
        rep.chamfer = metrics::chamfer(*pp, *gp);
        rep.has_chamfer = true;
    }
    rep.finalize();
    return rep;
}

namespace {

void eval_cmd(const Global& g, const EvalOpts& o) {
    metrics::EvalReport rep = evaluate_dirs(o.gt, o.pred);
    if (!o.latents.empty()) {
        std::vector<nets::LatentSet> ls;
        for (const auto& f : o.latents) {
            require_file(f);
            ls.push_back(nets::read_latent(f));
        }
        rep.latent = metrics::latent_stats(ls);
    }
    if (!o.ckpt.empty()) {
        require_file(o.ckpt);
        rep.config = nets::format_config(nets::read_checkpoint(o.ckpt).first);
    }
    const std::string out = out_path(g, o.report);
    ensure_parent(out);
    std::ofstream f(out);
    if (!f) throw io_error("cannot write " + out);
    f << rep.to_json();
    std::cout << "psnr " << rep.psnr_mean << " ssim " << rep.ssim_mean;
    if (rep.has_chamfer) std::cout << " chamfer " << rep.chamfer;
    std::cout << "\n";
}

int exit_code(ErrorKind k) {
    switch (k) {
    case ErrorKind::usage: return kExitUsage;
    case ErrorKind::io:
    case ErrorKind::format: return kExitIo;
    case ErrorKind::numeric: return kExitNumeric;
    }
    return 1;
}

} // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"lito: light-field tokenizer toolkit"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    Global g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Seed for every stochastic step")->capture_default_str();
    app.add_option("--out-dir", g.out_dir, "Base directory for relative output paths");
    app.add_option("--threads", g.threads, "Worker threads (default: LITO_THREADS, else 1)")
        ->check(CLI::NonNegativeNumber);
    app.fallthrough();

    RenderDatasetOpts rd;
    auto* c_rd = app.add_subcommand("render-dataset", "Ray-trace RGBD views and dump light-field samples");
    c_rd->add_option("--scene", rd.scene, "Scene file, or 'demo'")->capture_default_str();
    c_rd->add_option("--views", rd.views, "Number of views")->capture_default_str();
    c_rd->add_option("--radius", rd.radius, "Camera distance from the origin")->capture_default_str();
    c_rd->add_option("--fov", rd.fov, "Vertical field of view in degrees")->capture_default_str();
    c_rd->add_option("--res", rd.res, "Image width and height in pixels")->capture_default_str();
    c_rd->add_option("--surface-points", rd.surface_points, "Analytic surface points written to surface.pts")
        ->capture_default_str();
    c_rd->add_option("--out", rd.out, "Output directory")->required();

    TrainOpts tr;
    auto* c_tr = app.add_subcommand("train", "Train the tokenizer; resumes from OUT/state.bin");
    c_tr->add_option("--config", tr.config, "key = value training config")->required();
    c_tr->add_option("--data", tr.data, "Dataset directory from render-dataset")->required();
    c_tr->add_option("--out", tr.out, "Output directory")->required();
    c_tr->add_option("--steps", tr.steps, "Override total_steps");
    c_tr->add_flag("--quiet", tr.quiet, "No progress output");

    EncodeOpts en;
    auto* c_en = app.add_subcommand("encode", "Encode light-field samples into a latent set");
    c_en->add_option("--ckpt", en.ckpt, "Model checkpoint")->required();
    c_en->add_option("--data", en.data, "Dataset directory")->required();
    c_en->add_option("--n-input", en.n_input, "Input samples")->capture_default_str();
    c_en->add_option("--out", en.out, "Output latent file")->required();

    auto add_flow = [](CLI::App* c, FlowOpts& f) {
        c->add_option("--sampler", f.sampler, "euler or heun")->capture_default_str();
        c->add_option("--steps", f.steps, "Integration steps")->capture_default_str();
        c->add_option("--n", f.n, "Number of points")->capture_default_str();
    };

    DecodeOpts de;
    auto* c_de = app.add_subcommand("decode", "Decode a latent set into gaussians (PLY)");
    c_de->add_option("--ckpt", de.ckpt, "Model checkpoint")->required();
    c_de->add_option("--latent", de.latent, "Latent file")->required();
    c_de->add_option("--occupancy", de.occupancy,
                     "'flow' to sample it from the latent, or a point (PTS1), light-field (SLF1) or occupancy file")
        ->capture_default_str();
    add_flow(c_de, de.flow);
    c_de->add_option("--out", de.out, "Output PLY")->required();

    SampleOpts sg;
    auto* c_sg = app.add_subcommand("sample-geometry", "Sample surface points with the flow decoder");
    c_sg->add_option("--ckpt", sg.ckpt, "Model checkpoint")->required();
    c_sg->add_option("--latent", sg.latent, "Latent file")->required();
    add_flow(c_sg, sg.flow);
    c_sg->add_option("--out", sg.out, "Output point file")->required();

    RenderOpts re;
    auto* c_re = app.add_subcommand("render", "Rasterize gaussians from a stored camera");
    c_re->add_option("--splats", re.splats, "Gaussian PLY")->required();
    c_re->add_option("--camera", re.cameras, "Camera manifest (cameras.txt)")->required();
    c_re->add_option("--view", re.view, "Camera index")->capture_default_str();
    c_re->add_flag("--all", re.all, "Render every camera into the --out directory");
    c_re->add_option("--sh-deg", re.sh_deg, "Highest SH degree used, 0..3")->capture_default_str();
    c_re->add_option("--out", re.out, "Output .png or .raw (a directory with --all)")->required();

    EvalOpts ev;
    auto* c_ev = app.add_subcommand("eval", "PSNR, SSIM and Chamfer of predictions against a dataset");
    c_ev->add_option("--gt", ev.gt, "Ground-truth dataset directory")->required();
    c_ev->add_option("--pred", ev.pred, "Prediction directory")->required();
    c_ev->add_option("--report", ev.report, "Output JSON report")->required();
    c_ev->add_option("--latent", ev.latents, "Latent files for latent statistics");
    c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint whose config is echoed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (g.threads > 0) set_thread_count(g.threads);
        if (*c_rd) render_dataset(g, rd);
        else if (*c_tr) train_cmd(g, tr, seed_opt->count() > 0);
        else if (*c_en) encode_cmd(g, en);
        else if (*c_de) decode_cmd(g, de);
        else if (*c_sg) sample_cmd(g, sg);
        else if (*c_re) render_cmd(g, re);
        else if (*c_ev) eval_cmd(g, ev);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

} // namespace lito::cli
