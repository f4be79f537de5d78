// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Graph is a tape. While a Graph is alive it is the active tape of its
// thread, and every op whose inputs require gradients appends a record to it.
// Without an active Graph ops simply evaluate (inference mode).
//
// Broadcasting for elementwise ops aligns trailing dimensions: shapes are
// right-aligned, a missing leading dimension counts as 1, and a dimension of
// size 1 stretches to match the other operand. Anything else is a shape
// error naming both shapes.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lito::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until a gradient arrives
    bool requires_grad = false;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};
} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(int axis) const;
    std::size_t size() const { return impl_->data.size(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    std::span<const double> data() const { return impl_->data; }
    /// Mutable access is for leaves only (optimizer updates, test setup);
    /// tensors that are part of a live graph must not be mutated.
    std::span<double> mutable_data() { return impl_->data; }
    std::span<const double> grad() const { return impl_->grad; }
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad() { impl_->grad.clear(); }

    double item() const;
    double operator[](std::size_t i) const { return impl_->data[i]; }

    /// Same values, no graph history, no gradient requirement.
    Tensor detach() const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

/// Ordered record of the ops of one forward pass.
class Graph {
public:
    using BackwardFn = std::function<void()>;

    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Seeds d(loss)/d(loss) = 1 and runs every recorded VJP exactly once,
    /// newest first. Throws if loss is not a scalar.
    void backward(const Tensor& loss);

    std::size_t num_ops() const { return ops_.size(); }

    /// Active tape of the calling thread, or nullptr.
    static Graph* active();

    /// Appends a record. `output` must have been produced from `inputs`.
    void record(const char* name, std::vector<Tensor> inputs, Tensor output, BackwardFn backward);

private:
    struct Op {
        const char* name;
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };
    std::vector<Op> ops_;
    Graph* previous_ = nullptr;
    bool consumed_ = false;
};

/// Active tape when any of `inputs` requires a gradient, else nullptr. Custom
/// ops call this, mark their output as requiring grad and record a VJP.
Graph* recording_graph(std::initializer_list<const Tensor*> inputs);

/// Suspends recording on this thread for its lifetime.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Graph* saved_;
};

// Elementwise binary ops (broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Elementwise unary ops.
Tensor neg(const Tensor& a);
Tensor affine(const Tensor& a, double scale, double shift); // scale*a + shift
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a); // exact erf form
Tensor clamp(const Tensor& a, double lo, double hi);
/// cond is a constant mask (nonzero selects a); all three broadcast.
Tensor where(const Tensor& cond, const Tensor& a, const Tensor& b);

/// a [..., m, k] x b [..., k, n] with equal leading dims, or b rank 2
/// applied to every leading index of a.
Tensor matmul(const Tensor& a, const Tensor& b);

// Reductions. Negative axes count from the end.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
/// Gradient flows to the first maximal element along the axis.
Tensor max(const Tensor& a, int axis, bool keepdim = false);
Tensor softmax(const Tensor& a, int axis);
/// Normalizes to zero mean and unit variance along axis (no affine terms).
Tensor layer_norm(const Tensor& a, int axis, double eps = 1e-5);

// Layout ops.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
/// Rows a[indices[i]] along axis 0.
Tensor gather(const Tensor& a, const std::vector<std::size_t>& indices);
/// out[indices[i]] += a[i] along axis 0, out has `rows` rows.
Tensor scatter_add(const Tensor& a, const std::vector<std::size_t>& indices, std::size_t rows);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return affine(a, s, 0.0); }
inline Tensor operator*(double s, const Tensor& a) { return affine(a, s, 0.0); }
inline Tensor operator+(const Tensor& a, double s) { return affine(a, 1.0, s); }
inline Tensor operator+(double s, const Tensor& a) { return affine(a, 1.0, s); }
inline Tensor operator-(const Tensor& a, double s) { return affine(a, 1.0, -s); }
inline Tensor operator-(double s, const Tensor& a) { return affine(a, -1.0, s); }

/// Central-difference gradient check of a scalar function at x.
///
/// Uses the fourth-order central stencil
/// (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h and returns
/// max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8). When `coords` is
/// non-empty only those coordinates are checked.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step,
                         const std::vector<std::size_t>& coords = {});

/// Plain second-order central difference of a scalar function with respect
/// to coordinate i of x (x is restored afterwards).
double central_difference(const std::function<double()>& f, Tensor& x, std::size_t i, double step);

} // namespace lito::ad
