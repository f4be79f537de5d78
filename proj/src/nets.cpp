// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/nets.hpp"

#include "lito/attnplan.hpp"
#include "lito/binary_io.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace lito::nets {

using ad::Tensor;

double PosEncSpec::frequency(int i) const {
    const double e = F == 1 ? m_min : m_min + i * (m_max - m_min) / (F - 1);
    return std::exp2(e);
}

std::vector<double> pos_encode(const std::vector<double>& values, const PosEncSpec& spec) {
    std::vector<double> out;
    out.reserve(spec.width(values.size()));
    for (double x : values) {
        for (int i = 0; i < spec.F; ++i) out.push_back(std::sin(x * spec.frequency(i)));
        for (int i = 0; i < spec.F; ++i) out.push_back(std::cos(x * spec.frequency(i)));
    }
    return out;
}

Tensor pos_encode(const Tensor& x, const PosEncSpec& spec) {
    if (x.rank() != 2) throw std::invalid_argument("pos_encode expects [N, C], got " + ad::shape_str(x.shape()));
    const std::size_t n = x.dim(0), ch = x.dim(1), w = spec.width(ch);
    std::vector<double> freq(static_cast<std::size_t>(spec.F));
    for (int i = 0; i < spec.F; ++i) freq[static_cast<std::size_t>(i)] = spec.frequency(i);
    std::vector<double> out(n * w);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < ch; ++c) {
            const double v = x[r * ch + c];
            double* o = &out[r * w + c * 2 * freq.size()];
            for (std::size_t i = 0; i < freq.size(); ++i) {
                o[i] = std::sin(v * freq[i]);
                o[freq.size() + i] = std::cos(v * freq[i]);
            }
        }
    return Tensor::from({n, w}, std::move(out));
}

std::array<double, 6> plucker(const Vec3& x, const Vec3& dir) {
    const Vec3 m = cross(x, dir);
    return {dir.x, dir.y, dir.z, m.x, m.y, m.z};
}

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw usage_error("invalid model config: " + what);
    };
    need(k >= 1 && d >= 1, "k and d must be positive");
    need(df >= 1 && mlp >= 1, "df and mlp must be positive");
    need(heads >= 1 && df % heads == 0, "df must be divisible by heads");
    need(dec_heads >= 1 && df % dec_heads == 0, "df must be divisible by dec_heads");
    need(enc_self_layers >= 0 && gs_self_layers >= 0, "layer counts must be >= 0");
    need(enc_voxel_res >= 1 && grid_res >= 1, "voxel resolutions must be >= 1");
    need(gaussians_per_voxel >= 1, "gaussians_per_voxel must be >= 1");
    need(sh_degree >= 0 && sh_degree <= 3, "sh_degree must be in 0..3");
    need(offset_scale > 0, "offset_scale must be positive");
    need(time_dim >= 1, "time_dim must be positive");
    for (const PosEncSpec* s : {&pe_x, &pe_rgb, &pe_time})
        need(s->F >= 1 && s->m_max >= s->m_min, "positional encodings need F >= 1 and m_max >= m_min");
}

std::size_t ModelConfig::encoder_input_width() const { return 3 + pe_x.width(3) + 3 + pe_rgb.width(3) + 6; }
std::size_t ModelConfig::query_width() const { return 3 + pe_x.width(3); }

ModelConfig toy_config() { return {}; }

ModelConfig paper_config() {
    ModelConfig c;
    c.k = 8192;
    c.d = 32;
    c.df = 512;
    c.mlp = 2048;
    c.heads = 16;
    c.dec_heads = 8;
    c.enc_self_layers = 8;
    c.enc_voxel_res = 16;
    c.gs_self_layers = 4;
    c.grid_res = 64;
    c.gaussians_per_voxel = 64;
    c.pe_x = {32, 0.0, 12.0};
    c.pe_rgb = {32, 0.0, 8.0};
    c.pe_time = {16, std::log2(2.0 * 3.14159265358979323846), std::log2(2.0 * 3.14159265358979323846) + 15};
    c.time_dim = 64;
    return c;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

int parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    int out = 0;
    try {
        out = std::stoi(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size()) throw usage_error("config key " + key + ": expected an integer, got \"" + v + "\"");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size() || !std::isfinite(out))
        throw usage_error("config key " + key + ": expected a number, got \"" + v + "\"");
    return out;
}

} // namespace

std::string format_config(const ModelConfig& c) {
    std::ostringstream o;
    o << "k=" << c.k << "\nd=" << c.d << "\ndf=" << c.df << "\nmlp=" << c.mlp << "\nheads=" << c.heads
      << "\ndec_heads=" << c.dec_heads << "\nenc_self_layers=" << c.enc_self_layers
      << "\nenc_voxel_res=" << c.enc_voxel_res << "\ngs_self_layers=" << c.gs_self_layers
      << "\ngrid_res=" << c.grid_res << "\ngaussians_per_voxel=" << c.gaussians_per_voxel
      << "\nsh_degree=" << c.sh_degree << "\noffset_scale=" << fmt(c.offset_scale) << "\ntime_dim=" << c.time_dim;
    for (auto [name, s] : {std::pair{"pe_x", &c.pe_x}, std::pair{"pe_rgb", &c.pe_rgb}, std::pair{"pe_time", &c.pe_time}})
        o << '\n'
          << name << "_f=" << s->F << '\n'
          << name << "_min=" << fmt(s->m_min) << '\n'
          << name << "_max=" << fmt(s->m_max);
    o << '\n';
    return o.str();
}

bool apply_config_key(ModelConfig& c, const std::string& key, const std::string& value) {
    const std::pair<const char*, int*> ints[] = {
        {"k", &c.k},
        {"d", &c.d},
        {"df", &c.df},
        {"mlp", &c.mlp},
        {"heads", &c.heads},
        {"dec_heads", &c.dec_heads},
        {"enc_self_layers", &c.enc_self_layers},
        {"enc_voxel_res", &c.enc_voxel_res},
        {"gs_self_layers", &c.gs_self_layers},
        {"grid_res", &c.grid_res},
        {"gaussians_per_voxel", &c.gaussians_per_voxel},
        {"sh_degree", &c.sh_degree},
        {"time_dim", &c.time_dim},
        {"pe_x_f", &c.pe_x.F},
        {"pe_rgb_f", &c.pe_rgb.F},
        {"pe_time_f", &c.pe_time.F},
    };
    for (auto [name, ptr] : ints)
        if (key == name) {
            *ptr = parse_int(key, value);
            return true;
        }
    const std::pair<const char*, double*> reals[] = {
        {"offset_scale", &c.offset_scale}, {"pe_x_min", &c.pe_x.m_min},       {"pe_x_max", &c.pe_x.m_max},
        {"pe_rgb_min", &c.pe_rgb.m_min},   {"pe_rgb_max", &c.pe_rgb.m_max},   {"pe_time_min", &c.pe_time.m_min},
        {"pe_time_max", &c.pe_time.m_max},
    };
    for (auto [name, ptr] : reals)
        if (key == name) {
            *ptr = parse_double(key, value);
            return true;
        }
    return false;
}

// ---------------------------------------------------------------------------
// Parameters

Tensor& Params::add(const std::string& name, ad::Shape shape) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(Tensor::zeros(std::move(shape), true));
    return tensors_.back();
}

const Tensor& Params::at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return tensors_[it->second];
}

Tensor& Params::at(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const Params&>(*this).at(name));
}

std::size_t Params::scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

void Params::zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
}

namespace {

void add_linear(Params& p, const std::string& name, std::size_t in, std::size_t out, Rng* rng) {
    Tensor& w = p.add(name + ".w", {in, out});
    if (rng) {
        const double sd = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : w.mutable_data()) v = sd * normal01(*rng);
    }
    p.add(name + ".b", {out});
}

void add_block(Params& p, const std::string& name, const ModelConfig& c, Rng* rng) {
    const auto df = static_cast<std::size_t>(c.df), mlp = static_cast<std::size_t>(c.mlp);
    for (const char* part : {".q", ".k", ".v", ".o"}) add_linear(p, name + ".attn" + part, df, df, rng);
    add_linear(p, name + ".fc1", df, mlp, rng);
    add_linear(p, name + ".fc2", mlp, df, rng);
}

void build(Params& p, const ModelConfig& c, Rng* rng) {
    const auto df = static_cast<std::size_t>(c.df);
    add_linear(p, "enc.in", c.encoder_input_width(), df, rng);
    add_block(p, "enc.cross", c, rng);
    for (int i = 0; i < c.enc_self_layers; ++i) add_block(p, "enc.self" + std::to_string(i), c, rng);
    add_linear(p, "enc.out", df, static_cast<std::size_t>(c.d), rng);

    add_linear(p, "vel.time", c.pe_time.width(1), static_cast<std::size_t>(c.time_dim), rng);
    add_linear(p, "vel.in", c.query_width() + static_cast<std::size_t>(c.time_dim), df, rng);
    add_linear(p, "vel.ctx", static_cast<std::size_t>(c.d), df, rng);
    add_block(p, "vel.cross", c, rng);
    add_linear(p, "vel.head", df, 3, nullptr);

    add_linear(p, "gs.in", c.query_width(), df, rng);
    add_linear(p, "gs.ctx", static_cast<std::size_t>(c.d), df, rng);
    add_block(p, "gs.cross", c, rng);
    for (int i = 0; i < c.gs_self_layers; ++i) add_block(p, "gs.self" + std::to_string(i), c, rng);
    add_linear(p, "gs.head", df, static_cast<std::size_t>(c.gaussians_per_voxel) * ModelConfig::kRawPerGaussian,
               nullptr);
}

} // namespace

Params init_parameters(const ModelConfig& c, Rng& rng) {
    c.validate();
    Params p;
    build(p, c, &rng);
    return p;
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t df = static_cast<std::size_t>(c.df), mlp = static_cast<std::size_t>(c.mlp);
    auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
    const std::size_t block = 4 * linear(df, df) + linear(df, mlp) + linear(mlp, df);
    const std::size_t d = static_cast<std::size_t>(c.d), td = static_cast<std::size_t>(c.time_dim);
    std::size_t n = linear(c.encoder_input_width(), df) + block * (1 + static_cast<std::size_t>(c.enc_self_layers)) +
                    linear(df, d);
    n += linear(c.pe_time.width(1), td) + linear(c.query_width() + td, df) + linear(d, df) + block + linear(df, 3);
    n += linear(c.query_width(), df) + linear(d, df) + block * (1 + static_cast<std::size_t>(c.gs_self_layers)) +
         linear(df, static_cast<std::size_t>(c.gaussians_per_voxel) * ModelConfig::kRawPerGaussian);
    return n;
}

// ---------------------------------------------------------------------------
// Layers

namespace {

Tensor linear(const Params& p, const std::string& name, const Tensor& x) {
    return ad::matmul(x, p.at(name + ".w")) + p.at(name + ".b");
}

// Multi-head attention of xq [Nq, df] over xkv [Nk, df]; mask is an additive
// [Nq, Nk] bias or undefined.
Tensor attention(const Params& p, const std::string& name, const Tensor& xq, const Tensor& xkv, const Tensor& mask,
                 int heads) {
    const std::size_t nq = xq.dim(0), nk = xkv.dim(0), df = xq.dim(1);
    const std::size_t h = static_cast<std::size_t>(heads), dh = df / h;
    auto split = [&](const Tensor& t, std::size_t n) { return ad::permute(ad::reshape(t, {n, h, dh}), {1, 0, 2}); };
    const Tensor q = split(linear(p, name + ".q", xq), nq);                          // [h, nq, dh]
    const Tensor k = ad::permute(ad::reshape(linear(p, name + ".k", xkv), {nk, h, dh}), {1, 2, 0}); // [h, dh, nk]
    const Tensor v = split(linear(p, name + ".v", xkv), nk);                         // [h, nk, dh]
    Tensor scores = ad::matmul(q, k) * (1.0 / std::sqrt(static_cast<double>(dh)));
    if (mask.defined()) scores = scores + mask;
    const Tensor att = ad::softmax(scores, -1);
    const Tensor o = ad::reshape(ad::permute(ad::matmul(att, v), {1, 0, 2}), {nq, df});
    return linear(p, name + ".o", o);
}

Tensor block(const Params& p, const std::string& name, const Tensor& x, const Tensor* ctx, const Tensor& mask,
             int heads) {
    const Tensor xn = ad::layer_norm(x, -1);
    const Tensor cn = ctx ? ad::layer_norm(*ctx, -1) : xn;
    const Tensor h = x + attention(p, name + ".attn", xn, cn, mask, heads);
    return h + linear(p, name + ".fc2", ad::gelu(linear(p, name + ".fc1", ad::layer_norm(h, -1))));
}

Tensor query_features(const Tensor& x, const ModelConfig& c) { return ad::concat({x, pos_encode(x, c.pe_x)}, 1); }

} // namespace

std::vector<double> featurize_input(const lf::LightFieldSample& s, const ModelConfig& c) {
    std::vector<double> f{s.x.x, s.x.y, s.x.z};
    const auto px = pos_encode({s.x.x, s.x.y, s.x.z}, c.pe_x);
    f.insert(f.end(), px.begin(), px.end());
    f.insert(f.end(), {s.color.x, s.color.y, s.color.z});
    const auto pc = pos_encode({s.color.x, s.color.y, s.color.z}, c.pe_rgb);
    f.insert(f.end(), pc.begin(), pc.end());
    const auto pl = plucker(s.x, s.dir);
    f.insert(f.end(), pl.begin(), pl.end());
    return f;
}

Tensor featurize(const std::vector<lf::LightFieldSample>& samples, const ModelConfig& c) {
    const std::size_t w = c.encoder_input_width();
    std::vector<double> out(samples.size() * w);
    parallel_for(samples.size(), [&](std::size_t i) {
        const auto f = featurize_input(samples[i], c);
        std::copy(f.begin(), f.end(), out.begin() + static_cast<std::ptrdiff_t>(i * w));
    });
    return Tensor::from({samples.size(), w}, std::move(out));
}

LatentSet encode(const Params& p, const ModelConfig& c, const lf::SampleSet& input, Rng& rng) {
    if (input.count() < static_cast<std::size_t>(c.k))
        throw usage_error("encode: need at least k = " + std::to_string(c.k) + " input samples, got " +
                          std::to_string(input.count()));
    return encode_with_queries(p, c, input, plan::select_queries(input.count(), static_cast<std::size_t>(c.k), rng));
}

LatentSet encode_with_queries(const Params& p, const ModelConfig& c, const lf::SampleSet& input,
                              const std::vector<std::size_t>& query_indices) {
    if (query_indices.size() != static_cast<std::size_t>(c.k))
        throw usage_error("encode: expected " + std::to_string(c.k) + " queries, got " +
                          std::to_string(query_indices.size()));
    const auto positions = input.positions();
    const plan::PatchPlan patches = plan::assign_patches(positions, query_indices);

    const Tensor emb = linear(p, "enc.in", featurize(input.samples, c)); // [N, df]
    Tensor x = ad::gather(emb, query_indices);                            // [k, df]
    x = block(p, "enc.cross", x, &emb, plan::additive_mask(plan::plan_to_mask(patches)), c.heads);

    LatentSet out;
    for (std::size_t q : query_indices) out.positions.push_back(positions[q]);
    for (int l = 0; l < c.enc_self_layers; ++l) {
        const auto groups = plan::voxel_groups(out.positions, c.enc_voxel_res, l % 2 == 1);
        x = block(p, "enc.self" + std::to_string(l), x, nullptr, plan::additive_mask(plan::plan_to_mask(groups)),
                  c.heads);
    }
    out.tokens = linear(p, "enc.out", ad::layer_norm(x, -1));
    return out;
}

Tensor velocity(const Params& p, const ModelConfig& c, const LatentSet& latent, const Tensor& x, const Tensor& t) {
    const std::size_t m = x.dim(0);
    if (x.shape() != ad::Shape{m, 3} || t.size() != m)
        throw std::invalid_argument("velocity: x must be [M, 3] and t [M], got " + ad::shape_str(x.shape()) + " and " +
                                    ad::shape_str(t.shape()));
    const Tensor temb = linear(p, "vel.time", pos_encode(ad::reshape(t, {m, 1}), c.pe_time));
    Tensor h = linear(p, "vel.in", ad::concat({query_features(x, c), temb}, 1));
    const Tensor ctx = linear(p, "vel.ctx", latent.tokens);
    h = block(p, "vel.cross", h, &ctx, Tensor(), c.dec_heads);
    return linear(p, "vel.head", ad::layer_norm(h, -1));
}

namespace {

Tensor voxel_centers(const lf::OccupancyGrid& grid) {
    std::vector<double> v;
    v.reserve(grid.size() * 3);
    for (const auto& cell : grid.occupied) {
        const Vec3 ctr = grid.center(cell);
        v.insert(v.end(), {ctr.x, ctr.y, ctr.z});
    }
    return Tensor::from({grid.size(), 3}, std::move(v));
}

} // namespace

Tensor gaussian_head(const Params& p, const ModelConfig& c, const LatentSet& latent, const lf::OccupancyGrid& grid) {
    if (grid.empty()) throw usage_error("decode_gaussians: occupancy grid is empty");
    const std::size_t nv = grid.size();
    Tensor h = linear(p, "gs.in", query_features(voxel_centers(grid), c));
    const Tensor ctx = linear(p, "gs.ctx", latent.tokens);
    h = block(p, "gs.cross", h, &ctx, Tensor(), c.dec_heads);
    for (int l = 0; l < c.gs_self_layers; ++l) h = block(p, "gs.self" + std::to_string(l), h, nullptr, Tensor(), c.dec_heads);
    const Tensor raw = linear(p, "gs.head", ad::layer_norm(h, -1));
    return ad::reshape(raw, {nv, static_cast<std::size_t>(c.gaussians_per_voxel), ModelConfig::kRawPerGaussian});
}

splat::GaussianTensors activate_gaussians(const Tensor& raw, const ModelConfig& c, const lf::OccupancyGrid& grid) {
    const std::size_t nv = grid.size(), g = static_cast<std::size_t>(c.gaussians_per_voxel), n = nv * g;
    const Tensor r = ad::reshape(raw, {n, ModelConfig::kRawPerGaussian});
    std::vector<double> ctr(n * 3);
    for (std::size_t v = 0; v < nv; ++v) {
        const Vec3 cc = grid.center(grid.occupied[v]);
        for (std::size_t j = 0; j < g; ++j)
            for (int a = 0; a < 3; ++a) ctr[(v * g + j) * 3 + static_cast<std::size_t>(a)] = cc[a];
    }
    splat::GaussianTensors out;
    out.position = Tensor::from({n, 3}, std::move(ctr)) + ad::tanh(ad::slice(r, 1, 0, 3)) * c.offset_scale;
    out.scale = ad::clamp(ad::exp(ad::slice(r, 1, 3, 6) - 3.0), 1e-4, 0.5);
    const Tensor q = ad::slice(r, 1, 6, 10) + Tensor::from({1, 4}, {1, 0, 0, 0});
    out.rotation = q / ad::sqrt(ad::sum(q * q, 1, true));
    out.opacity = ad::reshape(ad::sigmoid(ad::slice(r, 1, 10, 11)), {n});
    out.sh = ad::reshape(ad::slice(r, 1, 11, ModelConfig::kRawPerGaussian), {n, 3, splat::kShCoeffs});
    return out;
}

splat::GaussianTensors decode_gaussians(const Params& p, const ModelConfig& c, const LatentSet& latent,
                                        const lf::OccupancyGrid& grid) {
    return activate_gaussians(gaussian_head(p, c, latent, grid), c, grid);
}

// ---------------------------------------------------------------------------
// Files

void write_checkpoint(const std::string& path, const ModelConfig& c, const Params& p) {
    BinaryWriter w(path);
    w.magic("LITC");
    w.u32(1);
    w.string(format_config(c));
    w.u32(static_cast<std::uint32_t>(p.size()));
    for (std::size_t i = 0; i < p.size(); ++i) {
        const Tensor& t = p.tensor(i);
        w.string(p.name(i));
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t dim : t.shape()) w.u64(dim);
        std::vector<float> f(t.data().begin(), t.data().end());
        w.f32s(f);
    }
    w.close();
}

std::pair<ModelConfig, Params> read_checkpoint(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("LITC");
    r.expect_version(1);
    ModelConfig c;
    {
        std::istringstream in(r.string());
        std::string line;
        while (std::getline(in, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos || !apply_config_key(c, line.substr(0, eq), line.substr(eq + 1)))
                throw FormatError(FormatError::Reason::malformed, path + ": bad config echo line \"" + line + "\"");
        }
    }
    try {
        c.validate();
    } catch (const Error& e) {
        throw FormatError(FormatError::Reason::malformed, path + ": " + e.what());
    }
    Params p;
    build(p, c, nullptr);
    const std::uint32_t n = r.u32();
    if (n != p.size()) throw FormatError(FormatError::Reason::malformed, path + ": parameter count mismatch");
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = r.string(4096);
        if (!p.contains(name)) throw FormatError(FormatError::Reason::malformed, path + ": unknown parameter " + name);
        Tensor& t = p.at(name);
        const std::uint32_t rank = r.u32();
        ad::Shape shape(rank);
        for (auto& dim : shape) dim = r.u64();
        if (shape != t.shape())
            throw FormatError(FormatError::Reason::malformed, path + ": shape mismatch for " + name);
        const auto f = r.f32s(t.size());
        std::copy(f.begin(), f.end(), t.mutable_data().begin());
    }
    return {c, std::move(p)};
}

void write_latent(const std::string& path, const LatentSet& latent) {
    const std::size_t k = latent.tokens.dim(0), d = latent.tokens.dim(1);
    BinaryWriter w(path);
    w.magic("LIT1");
    w.u32(static_cast<std::uint32_t>(k));
    w.u32(static_cast<std::uint32_t>(d));
    std::vector<float> pos;
    for (const Vec3& v : latent.positions) pos.insert(pos.end(), {float(v.x), float(v.y), float(v.z)});
    w.f32s(pos);
    w.f32s(std::vector<float>(latent.tokens.data().begin(), latent.tokens.data().end()));
    w.close();
}

LatentSet read_latent(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("LIT1");
    const std::uint32_t k = r.u32(), d = r.u32();
    if (k == 0 || d == 0 || k > (1u << 24) || d > 4096)
        throw FormatError(FormatError::Reason::malformed, path + ": bad latent dimensions");
    LatentSet out;
    const auto pos = r.f32s(std::size_t{k} * 3);
    for (std::uint32_t i = 0; i < k; ++i) out.positions.push_back({pos[i * 3], pos[i * 3 + 1], pos[i * 3 + 2]});
    const auto tok = r.f32s(std::size_t{k} * d);
    out.tokens = Tensor::from({k, d}, std::vector<double>(tok.begin(), tok.end()));
    return out;
}

} // namespace lito::nets
