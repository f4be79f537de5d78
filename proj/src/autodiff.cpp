// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lito::ad {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    if (s.size() == 1) os << ',';
    os << ')';
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return make_tensor({}, {value}, requires_grad); }

std::size_t Tensor::dim(int axis) const {
    const auto r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw std::out_of_range("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return shape()[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::detach() const { return make_tensor(shape(), impl_->data, false); }

// ---------------------------------------------------------------------------
// Graph

namespace {
thread_local Graph* t_active = nullptr;
} // namespace

Graph::Graph() : previous_(t_active) { t_active = this; }

Graph::~Graph() {
    if (t_active == this) t_active = previous_;
}

Graph* Graph::active() { return t_active; }

void Graph::record(const char* name, std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
    ops_.push_back(Op{name, std::move(inputs), std::move(output), std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (consumed_) throw std::logic_error("backward already ran on this graph");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        if (!it->output.impl()->grad.empty()) it->backward();
    }
}

Graph* recording_graph(std::initializer_list<const Tensor*> inputs) {
    Graph* g = Graph::active();
    if (!g) return nullptr;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return g;
    return nullptr;
}

NoGradScope::NoGradScope() : saved_(t_active) { t_active = nullptr; }
NoGradScope::~NoGradScope() { t_active = saved_; }

namespace {

using Impl = detail::TensorImpl;

Tensor new_tensor(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(n), false);
}

std::size_t norm_axis(int axis, std::size_t rank, const Shape& shape) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
    }
    return static_cast<std::size_t>(a);
}

// [outer, n, inner] view of a shape around one axis.
struct AxisView {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
    v.n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

// --- broadcasting -----------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument("shape mismatch: cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = da == 1 ? db : da;
    }
    return out;
}

// Maps linear output indices to linear input indices under broadcasting.
class Indexer {
public:
    Indexer(const Shape& in, const Shape& out) : in_size_(shape_numel(in)) {
        const std::size_t out_size = shape_numel(out);
        if (in_size_ == out_size) {
            kind_ = Kind::same;
        } else if (in_size_ == 1) {
            kind_ = Kind::scalar;
        } else if (is_suffix(in, out)) {
            kind_ = Kind::suffix;
        } else {
            kind_ = Kind::general;
            const std::size_t r = out.size();
            out_dims_ = out;
            strides_.assign(r, 0);
            std::size_t stride = 1;
            for (std::size_t k = 0; k < in.size(); ++k) {
                const std::size_t ii = in.size() - 1 - k;
                const std::size_t oi = r - 1 - k;
                strides_[oi] = in[ii] == 1 ? 0 : stride;
                stride *= in[ii];
            }
        }
    }

    bool same() const { return kind_ == Kind::same; }
    bool scalar() const { return kind_ == Kind::scalar; }
    bool suffix() const { return kind_ == Kind::suffix; }
    std::size_t in_size() const { return in_size_; }

    std::size_t operator()(std::size_t i) const {
        switch (kind_) {
        case Kind::same: return i;
        case Kind::scalar: return 0;
        case Kind::suffix: return i % in_size_;
        case Kind::general: break;
        }
        std::size_t off = 0;
        for (std::size_t k = out_dims_.size(); k-- > 0;) {
            const std::size_t d = out_dims_[k];
            off += (i % d) * strides_[k];
            i /= d;
        }
        return off;
    }

private:
    static bool is_suffix(const Shape& in, const Shape& out) {
        // in, stripped of leading ones, equals the trailing dims of out.
        std::size_t lead = 0;
        while (lead < in.size() && in[lead] == 1) ++lead;
        const std::size_t len = in.size() - lead;
        if (len > out.size()) return false;
        return std::equal(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end(),
                          out.end() - static_cast<std::ptrdiff_t>(len));
    }

    enum class Kind { same, scalar, suffix, general };
    Kind kind_ = Kind::same;
    std::size_t in_size_;
    Shape out_dims_;
    std::vector<std::size_t> strides_;
};

// Calls f(i, ia(i), ib(i)) for every output index, with tight loops for the
// common layouts.
template <class F>
void for_each_pair(const Indexer& ia, const Indexer& ib, std::size_t n, F f) {
    if (ia.same() && ib.same()) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    } else if (ia.same() && ib.scalar()) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
    } else if (ia.scalar() && ib.same()) {
        for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
    } else if (ia.same() && ib.suffix()) {
        const std::size_t m = ib.in_size();
        for (std::size_t o = 0; o < n; o += m)
            for (std::size_t j = 0; j < m; ++j) f(o + j, o + j, j);
    } else if (ia.suffix() && ib.same()) {
        const std::size_t m = ia.in_size();
        for (std::size_t o = 0; o < n; o += m)
            for (std::size_t j = 0; j < m; ++j) f(o + j, j, o + j);
    } else {
        for (std::size_t i = 0; i < n; ++i) f(i, ia(i), ib(i));
    }
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA dfa, DB dfb) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor out = new_tensor(out_shape);
    const Indexer ia(a.shape(), out_shape), ib(b.shape(), out_shape);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
    for_each_pair(ia, ib, out.size(), [&](std::size_t i, std::size_t ja, std::size_t jb) { po[i] = fwd(pa[ja], pb[jb]); });

    if (Graph* g = recording_graph({&a, &b})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record(name, {a, b}, out, [a, b, oi, out_shape, dfa, dfb] {
            const Indexer ia(a.shape(), out_shape), ib(b.shape(), out_shape);
            const double* pa = a.data().data();
            const double* pb = b.data().data();
            const double* go = oi->grad.data();
            const std::size_t n = oi->data.size();
            if (a.requires_grad()) {
                double* ga = a.impl()->grad_buffer().data();
                for_each_pair(ia, ib, n, [&](std::size_t i, std::size_t ja, std::size_t jb) {
                    ga[ja] += go[i] * dfa(pa[ja], pb[jb]);
                });
            }
            if (b.requires_grad()) {
                double* gb = b.impl()->grad_buffer().data();
                for_each_pair(ia, ib, n, [&](std::size_t i, std::size_t ja, std::size_t jb) {
                    gb[jb] += go[i] * dfb(pa[ja], pb[jb]);
                });
            }
        });
    }
    return out;
}

// dfx receives (x, y) where y is the forward output.
template <class Fwd, class D>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, D dfx) {
    Tensor out = new_tensor(a.shape());
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record(name, {a}, out, [a, oi, dfx] {
            auto& ga = a.impl()->grad_buffer();
            const double* pa = a.data().data();
            const double* po = oi->data.data();
            const double* go = oi->grad.data();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * dfx(pa[i], po[i]);
        });
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) { return affine(a, -1.0, 0.0); }

Tensor affine(const Tensor& a, double scale, double shift) {
    return unary_op(
        "affine", a, [scale, shift](double x) { return scale * x + shift; },
        [scale](double, double) { return scale; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
    return unary_op(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return unary_op(
        "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x, double) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary_op(
        "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor where(const Tensor& cond, const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shape(broadcast_shape(cond.shape(), a.shape()), b.shape());
    Tensor out = new_tensor(out_shape);
    const Indexer ic(cond.shape(), out_shape), ia(a.shape(), out_shape), ib(b.shape(), out_shape);
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = cond[ic(i)] != 0.0 ? a[ia(i)] : b[ib(i)];
    if (Graph* g = recording_graph({&a, &b})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("where", {cond, a, b}, out, [cond, a, b, oi, out_shape] {
            const Indexer ic(cond.shape(), out_shape), ia(a.shape(), out_shape), ib(b.shape(), out_shape);
            const double* go = oi->grad.data();
            const std::size_t n = oi->data.size();
            if (a.requires_grad()) {
                auto& ga = a.impl()->grad_buffer();
                for (std::size_t i = 0; i < n; ++i)
                    if (cond[ic(i)] != 0.0) ga[ia(i)] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.impl()->grad_buffer();
                for (std::size_t i = 0; i < n; ++i)
                    if (cond[ic(i)] == 0.0) gb[ib(i)] += go[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matmul

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

struct MatmulDims {
    std::size_t batch = 1, m = 0, k = 0, n = 0;
    bool shared_b = false; // b is rank 2 and reused for every batch entry
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
    auto fail = [&] {
        return std::invalid_argument("matmul shape mismatch: " + shape_str(a) + " x " + shape_str(b));
    };
    if (a.size() < 2 || b.size() < 2) throw fail();
    MatmulDims d;
    d.m = a[a.size() - 2];
    d.k = a[a.size() - 1];
    if (b[b.size() - 2] != d.k) throw fail();
    d.n = b[b.size() - 1];
    for (std::size_t i = 0; i + 2 < a.size(); ++i) d.batch *= a[i];
    if (b.size() == 2) {
        d.shared_b = true;
    } else if (b.size() != a.size() || !std::equal(a.begin(), a.end() - 2, b.begin())) {
        throw fail();
    }
    return d;
}

// c += op(a) * op(b) for one small or large block.
void gemm(const double* a, bool ta, const double* b, bool tb, double* c, std::size_t m, std::size_t k,
          std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    Map cm(c, M, N);
    if (!ta && !tb) {
        cm.noalias() += MapC(a, M, K) * MapC(b, K, N);
    } else if (ta && !tb) {
        cm.noalias() += MapC(a, K, M).transpose() * MapC(b, K, N);
    } else if (!ta && tb) {
        cm.noalias() += MapC(a, M, K) * MapC(b, N, K).transpose();
    } else {
        cm.noalias() += MapC(a, K, M).transpose() * MapC(b, N, K).transpose();
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const MatmulDims d = matmul_dims(a.shape(), b.shape());
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(d.n);
    Tensor out = new_tensor(out_shape);
    // Each output element is accumulated in a fixed k order by the same
    // arithmetic whatever the row count, so a row's value does not depend on
    // the other rows of the call. Rows go four at a time to reuse B.
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = out.mutable_data().data();
    const std::size_t K = d.k, N = d.n;
    for (std::size_t t = 0; t < d.batch; ++t) {
        const double* pb = B + (d.shared_b ? 0 : t * K * N);
        const double* pa = A + t * d.m * K;
        double* pc = C + t * d.m * N;
        std::size_t i = 0;
        for (; i + 4 <= d.m; i += 4) {
            double* c0 = pc + i * N;
            double* c1 = c0 + N;
            double* c2 = c1 + N;
            double* c3 = c2 + N;
            for (std::size_t kk = 0; kk < K; ++kk) {
                const double a0 = pa[i * K + kk], a1 = pa[(i + 1) * K + kk];
                const double a2 = pa[(i + 2) * K + kk], a3 = pa[(i + 3) * K + kk];
                const double* br = pb + kk * N;
                for (std::size_t j = 0; j < N; ++j) {
                    const double bj = br[j];
                    c0[j] += a0 * bj;
                    c1[j] += a1 * bj;
                    c2[j] += a2 * bj;
                    c3[j] += a3 * bj;
                }
            }
        }
        for (; i < d.m; ++i) {
            double* c0 = pc + i * N;
            for (std::size_t kk = 0; kk < K; ++kk) {
                const double a0 = pa[i * K + kk];
                const double* br = pb + kk * N;
                for (std::size_t j = 0; j < N; ++j) c0[j] += a0 * br[j];
            }
        }
    }
    if (Graph* g = recording_graph({&a, &b})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("matmul", {a, b}, out, [a, b, oi, d] {
            const double* go = oi->grad.data();
            if (a.requires_grad()) {
                double* ga = a.impl()->grad_buffer().data();
                // dA = dC * B^T
                if (d.shared_b) {
                    gemm(go, false, b.data().data(), true, ga, d.batch * d.m, d.n, d.k);
                } else {
                    for (std::size_t t = 0; t < d.batch; ++t)
                        gemm(go + t * d.m * d.n, false, b.data().data() + t * d.k * d.n, true, ga + t * d.m * d.k, d.m,
                             d.n, d.k);
                }
            }
            if (b.requires_grad()) {
                double* gb = b.impl()->grad_buffer().data();
                // dB = A^T * dC
                if (d.shared_b) {
                    gemm(a.data().data(), true, go, false, gb, d.k, d.batch * d.m, d.n);
                } else {
                    for (std::size_t t = 0; t < d.batch; ++t)
                        gemm(a.data().data() + t * d.m * d.k, true, go + t * d.m * d.n, false, gb + t * d.k * d.n, d.k,
                             d.m, d.n);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("sum", {a}, out, [a, oi] {
            auto& ga = a.impl()->grad_buffer();
            const double go = oi->grad[0];
            for (double& v : ga) v += go;
        });
    }
    return out;
}

Tensor mean(const Tensor& a) { return affine(sum(a), 1.0 / static_cast<double>(a.size()), 0.0); }

namespace {

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
    Shape out = s;
    if (keepdim)
        out[axis] = 1;
    else
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    return out;
}

} // namespace

Tensor sum(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(axis, a.rank(), a.shape());
    const AxisView v = axis_view(a.shape(), ax);
    Tensor out = new_tensor(reduced_shape(a.shape(), ax, keepdim));
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t j = 0; j < v.n; ++j) {
            const double* row = pa + (o * v.n + j) * v.inner;
            double* dst = po + o * v.inner;
            for (std::size_t i = 0; i < v.inner; ++i) dst[i] += row[i];
        }
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("sum_axis", {a}, out, [a, oi, v] {
            auto& ga = a.impl()->grad_buffer();
            const double* go = oi->grad.data();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t j = 0; j < v.n; ++j)
                    for (std::size_t i = 0; i < v.inner; ++i) ga[(o * v.n + j) * v.inner + i] += go[o * v.inner + i];
        });
    }
    return out;
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(axis, a.rank(), a.shape());
    return affine(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[ax]), 0.0);
}

Tensor max(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(axis, a.rank(), a.shape());
    const AxisView v = axis_view(a.shape(), ax);
    if (v.n == 0) throw std::invalid_argument("max over empty axis of shape " + shape_str(a.shape()));
    Tensor out = new_tensor(reduced_shape(a.shape(), ax, keepdim));
    std::vector<std::size_t> arg(v.outer * v.inner);
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            std::size_t best = 0;
            double bv = pa[o * v.n * v.inner + i];
            for (std::size_t j = 1; j < v.n; ++j) {
                const double x = pa[(o * v.n + j) * v.inner + i];
                if (x > bv) {
                    bv = x;
                    best = j;
                }
            }
            po[o * v.inner + i] = bv;
            arg[o * v.inner + i] = best;
        }
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("max", {a}, out, [a, oi, v, arg = std::move(arg)] {
            auto& ga = a.impl()->grad_buffer();
            const double* go = oi->grad.data();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t i = 0; i < v.inner; ++i)
                    ga[(o * v.n + arg[o * v.inner + i]) * v.inner + i] += go[o * v.inner + i];
        });
    }
    return out;
}

Tensor softmax(const Tensor& a, int axis) {
    const std::size_t ax = norm_axis(axis, a.rank(), a.shape());
    const AxisView v = axis_view(a.shape(), ax);
    Tensor out = new_tensor(a.shape());
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            const std::size_t base = o * v.n * v.inner + i;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < v.n; ++j) m = std::max(m, pa[base + j * v.inner]);
            double s = 0.0;
            for (std::size_t j = 0; j < v.n; ++j) {
                const double e = std::exp(pa[base + j * v.inner] - m);
                po[base + j * v.inner] = e;
                s += e;
            }
            for (std::size_t j = 0; j < v.n; ++j) po[base + j * v.inner] /= s;
        }
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("softmax", {a}, out, [a, oi, v] {
            auto& ga = a.impl()->grad_buffer();
            const double* y = oi->data.data();
            const double* go = oi->grad.data();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t i = 0; i < v.inner; ++i) {
                    const std::size_t base = o * v.n * v.inner + i;
                    double dotp = 0.0;
                    for (std::size_t j = 0; j < v.n; ++j) dotp += go[base + j * v.inner] * y[base + j * v.inner];
                    for (std::size_t j = 0; j < v.n; ++j) {
                        const std::size_t p = base + j * v.inner;
                        ga[p] += y[p] * (go[p] - dotp);
                    }
                }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& a, int axis, double eps) {
    const std::size_t ax = norm_axis(axis, a.rank(), a.shape());
    const AxisView v = axis_view(a.shape(), ax);
    Tensor out = new_tensor(a.shape());
    std::vector<double> inv_std(v.outer * v.inner);
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    const double n = static_cast<double>(v.n);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            const std::size_t base = o * v.n * v.inner + i;
            double mu = 0.0;
            for (std::size_t j = 0; j < v.n; ++j) mu += pa[base + j * v.inner];
            mu /= n;
            double var = 0.0;
            for (std::size_t j = 0; j < v.n; ++j) {
                const double dlt = pa[base + j * v.inner] - mu;
                var += dlt * dlt;
            }
            var /= n;
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[o * v.inner + i] = is;
            for (std::size_t j = 0; j < v.n; ++j) po[base + j * v.inner] = (pa[base + j * v.inner] - mu) * is;
        }
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("layer_norm", {a}, out, [a, oi, v, inv_std = std::move(inv_std)] {
            auto& ga = a.impl()->grad_buffer();
            const double* y = oi->data.data();
            const double* go = oi->grad.data();
            const double n = static_cast<double>(v.n);
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t i = 0; i < v.inner; ++i) {
                    const std::size_t base = o * v.n * v.inner + i;
                    double mg = 0.0, mgy = 0.0;
                    for (std::size_t j = 0; j < v.n; ++j) {
                        const std::size_t p = base + j * v.inner;
                        mg += go[p];
                        mgy += go[p] * y[p];
                    }
                    mg /= n;
                    mgy /= n;
                    const double is = inv_std[o * v.inner + i];
                    for (std::size_t j = 0; j < v.n; ++j) {
                        const std::size_t p = base + j * v.inner;
                        ga[p] += is * (go[p] - mg - y[p] * mgy);
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw std::invalid_argument("reshape shape mismatch: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    Tensor out = make_tensor(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), false);
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("reshape", {a}, out, [a, oi] {
            auto& ga = a.impl()->grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
        });
    }
    return out;
}

namespace {

// Offsets into the source for every destination index of a permutation.
std::vector<std::size_t> permute_offsets(const Shape& src, const std::vector<std::size_t>& order) {
    const std::size_t r = src.size();
    std::vector<std::size_t> src_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) src_strides[i - 1] = src_strides[i] * src[i];
    Shape dst(r);
    std::vector<std::size_t> strides(r);
    for (std::size_t i = 0; i < r; ++i) {
        dst[i] = src[order[i]];
        strides[i] = src_strides[order[i]];
    }
    const std::size_t n = shape_numel(src);
    std::vector<std::size_t> offsets(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        offsets[i] = off;
        for (std::size_t k = r; k-- > 0;) {
            ++idx[k];
            off += strides[k];
            if (idx[k] < dst[k]) break;
            off -= strides[k] * dst[k];
            idx[k] = 0;
        }
    }
    return offsets;
}

} // namespace

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
    const std::size_t r = a.rank();
    std::vector<bool> seen(r, false);
    bool ok = order.size() == r;
    for (std::size_t i = 0; ok && i < r; ++i) {
        ok = order[i] < r && !seen[order[i]];
        if (ok) seen[order[i]] = true;
    }
    if (!ok) throw std::invalid_argument("invalid permutation for shape " + shape_str(a.shape()));
    Shape dst(r);
    for (std::size_t i = 0; i < r; ++i) dst[i] = a.shape()[order[i]];
    auto offsets = permute_offsets(a.shape(), order);
    Tensor out = new_tensor(dst);
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < offsets.size(); ++i) po[i] = a[offsets[i]];
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("permute", {a}, out, [a, oi, offsets = std::move(offsets)] {
            auto& ga = a.impl()->grad_buffer();
            for (std::size_t i = 0; i < offsets.size(); ++i) ga[offsets[i]] += oi->grad[i];
        });
    }
    return out;
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
    const std::size_t x = norm_axis(axis0, a.rank(), a.shape());
    const std::size_t y = norm_axis(axis1, a.rank(), a.shape());
    std::vector<std::size_t> order(a.rank());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::swap(order[x], order[y]);
    return permute(a, order);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    const std::size_t ax = norm_axis(axis, s0.size(), s0);
    Shape out_shape = s0;
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == s0[i];
        if (!ok) throw std::invalid_argument("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
        out_shape[ax] += s[ax];
    }
    const AxisView ov = axis_view(out_shape, ax);
    Tensor out = new_tensor(out_shape);
    double* po = out.mutable_data().data();
    std::vector<std::size_t> starts;
    std::size_t start = 0;
    for (const auto& p : parts) {
        starts.push_back(start);
        const std::size_t len = p.shape()[ax];
        const double* pp = p.data().data();
        for (std::size_t o = 0; o < ov.outer; ++o)
            std::copy_n(pp + o * len * ov.inner, len * ov.inner, po + (o * ov.n + start) * ov.inner);
        start += len;
    }
    std::vector<const Tensor*> ptrs;
    Graph* g = Graph::active();
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (g && any) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("concat", parts, out, [parts, oi, ov, ax, starts] {
            for (std::size_t k = 0; k < parts.size(); ++k) {
                if (!parts[k].requires_grad()) continue;
                auto& gp = parts[k].impl()->grad_buffer();
                const std::size_t len = parts[k].shape()[ax];
                for (std::size_t o = 0; o < ov.outer; ++o) {
                    const double* src = oi->grad.data() + (o * ov.n + starts[k]) * ov.inner;
                    double* dst = gp.data() + o * len * ov.inner;
                    for (std::size_t i = 0; i < len * ov.inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = norm_axis(axis, a.rank(), a.shape());
    if (begin > end || end > a.shape()[ax]) {
        throw std::invalid_argument("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                                    ") out of range for shape " + shape_str(a.shape()));
    }
    const AxisView v = axis_view(a.shape(), ax);
    Shape out_shape = a.shape();
    out_shape[ax] = end - begin;
    const std::size_t len = end - begin;
    Tensor out = new_tensor(out_shape);
    double* po = out.mutable_data().data();
    for (std::size_t o = 0; o < v.outer; ++o)
        std::copy_n(a.data().data() + (o * v.n + begin) * v.inner, len * v.inner, po + o * len * v.inner);
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("slice", {a}, out, [a, oi, v, begin, len] {
            auto& ga = a.impl()->grad_buffer();
            for (std::size_t o = 0; o < v.outer; ++o) {
                const double* src = oi->grad.data() + o * len * v.inner;
                double* dst = ga.data() + (o * v.n + begin) * v.inner;
                for (std::size_t i = 0; i < len * v.inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor gather(const Tensor& a, const std::vector<std::size_t>& indices) {
    if (a.rank() == 0) throw std::invalid_argument("gather on a scalar");
    const std::size_t rows = a.shape()[0];
    const std::size_t row = rows ? a.size() / rows : 0;
    Shape out_shape = a.shape();
    out_shape[0] = indices.size();
    Tensor out = new_tensor(out_shape);
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows) {
            throw std::out_of_range("gather index " + std::to_string(indices[i]) + " out of range for shape " +
                                    shape_str(a.shape()));
        }
        std::copy_n(a.data().data() + indices[i] * row, row, po + i * row);
    }
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("gather", {a}, out, [a, oi, indices, row] {
            auto& ga = a.impl()->grad_buffer();
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < row; ++j) ga[indices[i] * row + j] += oi->grad[i * row + j];
        });
    }
    return out;
}

Tensor scatter_add(const Tensor& a, const std::vector<std::size_t>& indices, std::size_t rows) {
    if (a.rank() == 0 || a.shape()[0] != indices.size()) {
        throw std::invalid_argument("scatter_add: " + std::to_string(indices.size()) + " indices for shape " +
                                    shape_str(a.shape()));
    }
    const std::size_t row = indices.empty() ? 0 : a.size() / indices.size();
    Shape out_shape = a.shape();
    out_shape[0] = rows;
    Tensor out = new_tensor(out_shape);
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows) throw std::out_of_range("scatter_add index " + std::to_string(indices[i]) + " >= " + std::to_string(rows));
        for (std::size_t j = 0; j < row; ++j) po[indices[i] * row + j] += a[i * row + j];
    }
    if (Graph* g = recording_graph({&a})) {
        out.impl()->requires_grad = true;
        Impl* oi = out.impl();
        g->record("scatter_add", {a}, out, [a, oi, indices, row] {
            auto& ga = a.impl()->grad_buffer();
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < row; ++j) ga[i * row + j] += oi->grad[indices[i] * row + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

double central_difference(const std::function<double()>& f, Tensor& x, std::size_t i, double step) {
    auto d = x.mutable_data();
    const double orig = d[i];
    d[i] = orig + step;
    const double fp = f();
    d[i] = orig - step;
    const double fm = f();
    d[i] = orig;
    return (fp - fm) / (2.0 * step);
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step,
                         const std::vector<std::size_t>& coords) {
    Tensor leaf = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
    std::vector<double> analytic;
    {
        Graph g;
        Tensor y = f(leaf);
        g.backward(y);
        analytic = leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                   : std::vector<double>(leaf.size(), 0.0);
    }
    std::vector<std::size_t> idx = coords;
    if (idx.empty()) {
        idx.resize(leaf.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
    }
    NoGradScope no_grad;
    auto eval = [&] { return f(leaf).item(); };
    double worst = 0.0;
    auto d = leaf.mutable_data();
    for (std::size_t i : idx) {
        const double orig = d[i];
        d[i] = orig + 2 * step;
        const double f2p = eval();
        d[i] = orig + step;
        const double f1p = eval();
        d[i] = orig - step;
        const double f1m = eval();
        d[i] = orig - 2 * step;
        const double f2m = eval();
        d[i] = orig;
        const double numeric = (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * step);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8));
    }
    return worst;
}

} // namespace lito::ad
