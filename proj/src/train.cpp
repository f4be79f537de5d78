// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/train.hpp"

#include "lito/binary_io.hpp"
#include "lito/metrics.hpp"
#include "lito/splat.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace lito::train {

using ad::Tensor;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

Error bad_value(const std::string& key, const std::string& v) {
    return usage_error("config key '" + key + "': bad value '" + v + "'");
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) throw bad_value(key, v);
    return out;
}

long long to_int(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw bad_value(key, v);
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool apply_train_key(TrainConfig& c, const std::string& key, const std::string& v) {
    auto as_int = [&](int& field) { field = static_cast<int>(to_int(key, v)); };
    if (key == "lambda_perceptual") c.lambda_perceptual = to_double(key, v);
    else if (key == "kl_weight") c.kl_weight = to_double(key, v);
    else if (key == "batch_points") as_int(c.batch_points);
    else if (key == "input_points") as_int(c.input_points);
    else if (key == "views_per_step") as_int(c.views_per_step);
    else if (key == "d_model") c.d_model = to_double(key, v);
    else if (key == "warmup_steps") c.warmup_steps = to_double(key, v);
    else if (key == "beta1") c.beta1 = to_double(key, v);
    else if (key == "beta2") c.beta2 = to_double(key, v);
    else if (key == "adam_eps") c.adam_eps = to_double(key, v);
    else if (key == "weight_decay") c.weight_decay = to_double(key, v);
    else if (key == "clip_norm") c.clip_norm = to_double(key, v);
    else if (key == "total_steps") as_int(c.total_steps);
    else if (key == "seed") {
        const long long s = to_int(key, v);
        if (s < 0) throw bad_value(key, v);
        c.seed = static_cast<std::uint64_t>(s);
    } else if (key == "render_resolution") as_int(c.render_resolution);
    else if (key == "checkpoint_every") as_int(c.checkpoint_every);
    else return false;
    return true;
}

} // namespace

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw usage_error("train config: " + what); };
    if (lambda_perceptual < 0 || kl_weight < 0 || weight_decay < 0 || clip_norm < 0) fail("weights must be >= 0");
    if (batch_points < 1 || input_points < 1 || views_per_step < 0) fail("batch sizes must be positive");
    if (d_model <= 0 || warmup_steps <= 0) fail("d_model and warmup_steps must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1) || adam_eps <= 0) fail("bad optimizer constants");
    if (total_steps < 0 || checkpoint_every < 1 || render_resolution < 1) fail("bad step or resolution settings");
    model.validate();
}

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw usage_error("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        bool known = false;
        try {
            known = apply_train_key(c, key, value) || nets::apply_config_key(c.model, key, value);
        } catch (const Error&) {
            throw usage_error("config line " + std::to_string(lineno) + ": bad value for key '" + key + "': '" +
                              value + "'");
        }
        if (!known) throw usage_error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

std::string format_train_config(const TrainConfig& c) {
    std::ostringstream o;
    o << "lambda_perceptual=" << num(c.lambda_perceptual) << "\n"
      << "kl_weight=" << num(c.kl_weight) << "\n"
      << "batch_points=" << c.batch_points << "\n"
      << "input_points=" << c.input_points << "\n"
      << "views_per_step=" << c.views_per_step << "\n"
      << "d_model=" << num(c.d_model) << "\n"
      << "warmup_steps=" << num(c.warmup_steps) << "\n"
      << "beta1=" << num(c.beta1) << "\n"
      << "beta2=" << num(c.beta2) << "\n"
      << "adam_eps=" << num(c.adam_eps) << "\n"
      << "weight_decay=" << num(c.weight_decay) << "\n"
      << "clip_norm=" << num(c.clip_norm) << "\n"
      << "total_steps=" << c.total_steps << "\n"
      << "seed=" << c.seed << "\n"
      << "render_resolution=" << c.render_resolution << "\n"
      << "checkpoint_every=" << c.checkpoint_every << "\n"
      << nets::format_config(c.model);
    return o.str();
}

// ---------------------------------------------------------------------------
// Losses

double lr_noam(long step, double d_model, double warmup_steps) {
    if (step < 1) throw usage_error("lr_noam: step must be >= 1, got " + std::to_string(step));
    const double s = static_cast<double>(step);
    return 0.4 * std::pow(d_model, -0.5) * std::min(std::pow(s, -0.5), s * std::pow(warmup_steps, -1.5));
}

Tensor kl_reg(const nets::LatentSet& latent) { return ad::sum(ad::square(latent.tokens)); }

namespace {

// Rows of valid-window blur weights: [out, n] with out = n - window + 1.
Tensor blur_matrix(std::size_t n, bool transpose) {
    const auto w = metrics::ssim_window();
    const std::size_t win = w.size(), out = n - win + 1;
    std::vector<double> m(out * n, 0.0);
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < win; ++i) {
            if (transpose)
                m[(o + i) * out + o] = w[i];
            else
                m[o * n + o + i] = w[i];
        }
    return transpose ? Tensor::from({n, out}, std::move(m)) : Tensor::from({out, n}, std::move(m));
}

void require_image_pair(const Tensor& a, const Tensor& b, const char* what) {
    if (a.rank() != 3 || a.shape() != b.shape())
        throw std::invalid_argument(std::string(what) + ": images must share an [H, W, C] shape, got " +
                                    ad::shape_str(a.shape()) + " and " + ad::shape_str(b.shape()));
}

} // namespace

Tensor ssim_diff(const Tensor& a, const Tensor& b) {
    require_image_pair(a, b, "ssim");
    const std::size_t h = a.dim(0), w = a.dim(1);
    if (h < static_cast<std::size_t>(metrics::kSsimWindow) || w < static_cast<std::size_t>(metrics::kSsimWindow))
        throw std::invalid_argument("ssim: image " + std::to_string(w) + "x" + std::to_string(h) +
                                    " is smaller than the 11x11 window");
    const Tensor gh = blur_matrix(h, false), gw = blur_matrix(w, true);
    auto blur = [&](const Tensor& x) { return ad::matmul(ad::matmul(gh, x), gw); };
    const Tensor ga = ad::mean(a, 2), gb = ad::mean(b, 2);
    const Tensor ma = blur(ga), mb = blur(gb);
    const Tensor va = blur(ga * ga) - ma * ma, vb = blur(gb * gb) - mb * mb, cov = blur(ga * gb) - ma * mb;
    const Tensor num = (2.0 * ma * mb + metrics::kSsimC1) * (2.0 * cov + metrics::kSsimC2);
    const Tensor den = (ma * ma + mb * mb + metrics::kSsimC1) * (va + vb + metrics::kSsimC2);
    return ad::mean(num / den);
}

Tensor radiance_loss(const Tensor& rendered, const Tensor& target, double lambda) {
    require_image_pair(rendered, target, "radiance_loss");
    const Tensor mse = ad::mean(ad::square(rendered - target));
    if (lambda == 0.0) return mse;
    return mse + lambda * (1.0 - ssim_diff(rendered, target));
}

LossParts tokenizer_loss(const Tensor& geo, const Tensor& radiance, const Tensor& kl, double kl_weight) {
    LossParts p;
    p.total = geo + radiance + kl_weight * kl;
    p.geo = geo.item();
    p.radiance = radiance.item();
    p.kl = kl_weight * kl.item();
    return p;
}

// ---------------------------------------------------------------------------
// Optimizer

double clip_grad_norm(nets::Params& p, double max_norm) {
    double ss = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        for (double g : p.tensor(i).grad()) ss += g * g;
    const double norm = std::sqrt(ss);
    if (max_norm > 0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (std::size_t i = 0; i < p.size(); ++i)
            for (double& g : p.tensor(i).impl()->grad) g *= s;
    }
    return norm;
}

void optimizer_step(nets::Params& p, OptimizerState& state, double lr, const AdamConfig& cfg) {
    if (state.m.size() != p.size()) {
        state.m.resize(p.size());
        state.v.resize(p.size());
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < p.size(); ++i) {
        Tensor& t = p.tensor(i);
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != t.size()) {
            m.assign(t.size(), 0.0);
            v.assign(t.size(), 0.0);
        }
        const auto g = t.grad();
        auto x = t.mutable_data();
        for (std::size_t j = 0; j < t.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            m[j] = cfg.beta1 * m[j] + (1 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1 - cfg.beta2) * gj * gj;
            const double mh = m[j] / c1, vh = v[j] / c2;
            x[j] -= lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * x[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// Data

Tensor downsample(const scene::RgbdImage& img, int factor) {
    if (factor < 1 || img.width % factor != 0 || img.height % factor != 0)
        throw usage_error("cannot downsample " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          " by " + std::to_string(factor));
    const std::size_t w = static_cast<std::size_t>(img.width / factor), h = static_cast<std::size_t>(img.height / factor);
    const auto f = static_cast<std::size_t>(factor);
    std::vector<double> out(w * h * 3, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                double s = 0;
                for (std::size_t dy = 0; dy < f; ++dy)
                    for (std::size_t dx = 0; dx < f; ++dx)
                        s += img.rgb[((y * f + dy) * static_cast<std::size_t>(img.width) + x * f + dx) * 3 + c];
                out[(y * w + x) * 3 + c] = s / static_cast<double>(f * f);
            }
    return Tensor::from({h, w, 3}, std::move(out));
}

scene::Camera scale_camera(const scene::Camera& cam, int factor) {
    scene::Camera c = cam;
    const double f = factor;
    c.intrinsics.fx /= f;
    c.intrinsics.fy /= f;
    c.intrinsics.cx /= f;
    c.intrinsics.cy /= f;
    c.intrinsics.width /= factor;
    c.intrinsics.height /= factor;
    return c;
}

TrainData prepare_data(const lf::Dataset& data, const TrainConfig& c) {
    if (data.samples.count() == 0) throw usage_error("training data has no light-field samples");
    if (data.views.size() != data.cameras.size()) throw usage_error("training data: views and cameras differ in count");
    TrainData out;
    out.samples = data.samples;
    out.occupancy = lf::occupancy_from_points(data.samples.positions(), c.model.grid_res, 1);
    for (std::size_t i = 0; i < data.views.size(); ++i) {
        const auto& v = data.views[i];
        if (v.width % c.render_resolution != 0)
            throw usage_error("view width " + std::to_string(v.width) + " is not a multiple of render_resolution " +
                              std::to_string(c.render_resolution));
        const int factor = v.width / c.render_resolution;
        out.cameras.push_back(scale_camera(data.cameras[i], factor));
        out.targets.push_back(downsample(v, factor));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, TrainData data) : config_(std::move(config)), data_(std::move(data)) {
    config_.validate();
    if (data_.samples.count() < static_cast<std::size_t>(config_.input_points) + 1)
        throw usage_error("training data has " + std::to_string(data_.samples.count()) +
                          " samples; need more than input_points = " + std::to_string(config_.input_points));
    if (config_.input_points < config_.model.k)
        throw usage_error("input_points must be at least k = " + std::to_string(config_.model.k));
    if (config_.views_per_step > 0 && data_.cameras.empty()) throw usage_error("training data has no views");
    Rng init = make_stream(config_.seed, 0xC0FFEEull);
    params_ = nets::init_parameters(config_.model, init);
}

nets::LatentSet Trainer::encode(Rng& rng) const {
    const auto [input, sup] = lf::split_input_supervision(data_.samples, static_cast<std::size_t>(config_.input_points), rng);
    return nets::encode(params_, config_.model, input, rng);
}

StepLog Trainer::step() {
    const auto t0 = std::chrono::steady_clock::now();
    const long step_no = state_.step + 1;
    Rng rng = make_stream(config_.seed, static_cast<std::uint64_t>(step_no));
    const auto& mc = config_.model;

    params_.zero_grad();
    StepLog log;
    log.step = step_no;
    {
        ad::Graph graph;
        const auto [input, sup] =
            lf::split_input_supervision(data_.samples, static_cast<std::size_t>(config_.input_points), rng);
        const nets::LatentSet latent = nets::encode(params_, mc, input, rng);

        std::vector<Vec3> pts(static_cast<std::size_t>(config_.batch_points));
        std::uniform_int_distribution<std::size_t> pick(0, sup.count() - 1);
        for (Vec3& p : pts) p = sup.samples[pick(rng)].x;
        const flow::FlowBatch batch = flow::make_batch(pts, rng);
        const Tensor geo = flow::geo_loss(flow::network_velocity(params_, mc, latent), batch);

        Tensor radiance = Tensor::scalar(0.0);
        if (config_.views_per_step > 0) {
            const auto g = nets::decode_gaussians(params_, mc, latent, data_.occupancy);
            std::vector<std::size_t> order(data_.cameras.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            const std::size_t nv = std::min(order.size(), static_cast<std::size_t>(config_.views_per_step));
            for (std::size_t i = 0; i < nv; ++i) {
                std::uniform_int_distribution<std::size_t> d(i, order.size() - 1);
                std::swap(order[i], order[d(rng)]);
            }
            for (std::size_t i = 0; i < nv; ++i) {
                const Tensor r = splat::rasterize_diff(g, data_.cameras[order[i]], mc.sh_degree);
                radiance = radiance + radiance_loss(ad::slice(r, 2, 0, 3), data_.targets[order[i]],
                                                    config_.lambda_perceptual);
            }
            radiance = radiance * (1.0 / static_cast<double>(nv));
        }
        const LossParts parts = tokenizer_loss(geo, radiance, kl_reg(latent), config_.kl_weight);
        log.total = parts.total.item();
        log.geo = parts.geo;
        log.radiance = parts.radiance;
        log.kl = parts.kl;
        if (!std::isfinite(log.total))
            throw NumericError("non-finite loss at step " + std::to_string(step_no) + ": total=" + num(log.total) +
                               " geo=" + num(log.geo) + " radiance=" + num(log.radiance) + " kl=" + num(log.kl));
        graph.backward(parts.total);
    }
    log.grad_norm = clip_grad_norm(params_, config_.clip_norm);
    if (!std::isfinite(log.grad_norm))
        throw NumericError("non-finite gradient norm at step " + std::to_string(step_no) + ": geo=" + num(log.geo) +
                           " radiance=" + num(log.radiance) + " kl=" + num(log.kl));
    log.lr = lr_noam(step_no, config_.d_model, config_.warmup_steps);
    optimizer_step(params_, state_, log.lr,
                   {config_.beta1, config_.beta2, config_.adam_eps, config_.weight_decay});
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return log;
}

void Trainer::save_state(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
        BinaryWriter w(tmp);
        w.magic("LITS");
        w.u32(1);
        w.string(format_train_config(config_));
        w.u64(static_cast<std::uint64_t>(state_.step));
        w.u32(static_cast<std::uint32_t>(params_.size()));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const Tensor& t = params_.tensor(i);
            w.string(params_.name(i));
            w.u64(t.size());
            const bool has_m = i < state_.m.size() && state_.m[i].size() == t.size();
            for (double v : t.data()) w.f64(v);
            for (std::size_t j = 0; j < t.size(); ++j) w.f64(has_m ? state_.m[i][j] : 0.0);
            for (std::size_t j = 0; j < t.size(); ++j) w.f64(has_m ? state_.v[i][j] : 0.0);
        }
        w.close();
    }
    fs::rename(tmp, path);
}

void Trainer::load_state(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("LITS");
    r.expect_version(1);
    TrainConfig saved = parse_train_config(r.string());
    saved.total_steps = config_.total_steps;
    if (format_train_config(saved) != format_train_config(config_))
        throw usage_error(path + ": saved state was produced with a different config");
    OptimizerState st;
    st.step = static_cast<long>(r.u64());
    const std::uint32_t n = r.u32();
    if (n != params_.size()) throw FormatError(FormatError::Reason::malformed, path + ": parameter count mismatch");
    st.m.resize(n);
    st.v.resize(n);
    nets::Params loaded = params_;
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = r.string(4096);
        const std::uint64_t size = r.u64();
        if (name != params_.name(i) || size != params_.tensor(i).size())
            throw FormatError(FormatError::Reason::malformed, path + ": unexpected parameter " + name);
        std::vector<double> data(size);
        for (double& v : data) v = r.f64();
        st.m[i].resize(size);
        st.v[i].resize(size);
        for (double& v : st.m[i]) v = r.f64();
        for (double& v : st.v[i]) v = r.f64();
        loaded.tensor(i) = Tensor::from(params_.tensor(i).shape(), std::move(data), true);
    }
    params_ = std::move(loaded);
    state_ = std::move(st);
}

std::string metrics_header() { return "step,lr,loss_total,loss_geo,loss_radiance,loss_kl,wall_ms"; }

std::string metrics_row(const StepLog& l) {
    std::ostringstream o;
    o << l.step << "," << num(l.lr) << "," << num(l.total) << "," << num(l.geo) << "," << num(l.radiance) << ","
      << num(l.kl) << "," << num(l.wall_ms);
    return o.str();
}

namespace {

// Keeps the header and rows up to `last_step`.
void truncate_metrics(const std::string& path, long last_step) {
    std::ifstream in(path);
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(in, line)) {
        if (keep.empty()) {
            keep.push_back(line);
            continue;
        }
        long long s = 0;
        const auto r = std::from_chars(line.data(), line.data() + line.size(), s);
        if (r.ec == std::errc() && s <= last_step) keep.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    if (keep.empty()) keep.push_back(metrics_header());
    for (const auto& l : keep) out << l << "\n";
}

} // namespace

void train_tokenizer(const TrainConfig& config, const lf::Dataset& data, const std::string& out_dir, bool quiet) {
    fs::create_directories(out_dir);
    Trainer trainer(config, prepare_data(data, config));
    const std::string state = (fs::path(out_dir) / "state.bin").string();
    const std::string csv = (fs::path(out_dir) / "metrics.csv").string();
    const std::string ckpt = (fs::path(out_dir) / "checkpoint.litc").string();
    if (fs::exists(state)) {
        trainer.load_state(state);
        truncate_metrics(csv, trainer.steps_done());
        if (!quiet) std::cerr << "resuming from step " << trainer.steps_done() << "\n";
    } else {
        std::ofstream(csv, std::ios::trunc) << metrics_header() << "\n";
    }
    std::ofstream log(csv, std::ios::app);
    if (!log) throw io_error("cannot write " + csv);
    auto save = [&] {
        nets::write_checkpoint(ckpt + ".tmp", config.model, trainer.params());
        fs::rename(ckpt + ".tmp", ckpt);
        trainer.save_state(state);
    };
    while (trainer.steps_done() < config.total_steps) {
        StepLog l;
        try {
            l = trainer.step();
        } catch (const NumericError&) {
            log.flush();
            throw;
        }
        log << metrics_row(l) << "\n";
        if (l.step % config.checkpoint_every == 0 || l.step == config.total_steps) {
            log.flush();
            save();
        }
        if (!quiet && (l.step % 50 == 0 || l.step == 1))
            std::cerr << "step " << l.step << " loss " << l.total << " (geo " << l.geo << ", radiance " << l.radiance
                      << ", kl " << l.kl << ") " << l.wall_ms << " ms\n";
    }
    if (!fs::exists(ckpt)) save();
}

} // namespace lito::train
