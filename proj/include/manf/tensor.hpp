#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "manf/errors.hpp"
#include "manf/rng.hpp"

namespace manf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
Shape broadcast_shapes(const Shape& a, const Shape& b);

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until backward touches this node
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backprop;  // reads this->grad, accumulates into parents

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major f64 tensor with tape-based reverse-mode autodiff. A Tensor
// is a cheap handle onto shared storage; ops record parent links and a
// backprop closure on the produced node. Copying shares storage.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

    static Tensor zeros(const Shape& shape);
    static Tensor ones(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor scalar(double value);
    static Tensor from_vector(const Shape& shape, std::vector<double> values);
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);
    static Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi);

    const Shape& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double item() const;
    double at(const std::vector<std::size_t>& index) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const { return impl_->grad; }
    std::vector<double>& grad_mut() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    // Reverse-mode sweep from a scalar; gradients accumulate into every
    // reachable requires_grad node (repeated calls keep accumulating).
    void backward() const;

    // Value copy detached from the tape.
    Tensor detach() const;

    bool defined() const { return !impl_->shape.empty() || !impl_->data.empty(); }
    bool all_finite() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    friend Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                          std::function<void(detail::TensorImpl&)> backprop);
    std::shared_ptr<detail::TensorImpl> impl_;
};

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(detail::TensorImpl&)> backprop);

// Suspends tape recording for its scope (inference paths skip graph building).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// --- elementwise / broadcasting ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // DomainError on non-positive input
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training);

// --- linear algebra ---
// a: [.., m, k] x b: [.., k, n] with numpy-style broadcast over batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// --- structure ---
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor index_select_last(const Tensor& a, const std::vector<std::size_t>& idx);
// Scatter columns of a [.., k] into zeros of [.., out_dim] at idx.
Tensor scatter_last(const Tensor& a, const std::vector<std::size_t>& idx, std::size_t out_dim);

// --- reductions ---
Tensor sum(const Tensor& a);                                        // all elements -> scalar
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor variance(const Tensor& a, std::size_t axis, bool keepdim = false);  // biased

// --- normalizations ---
Tensor softmax(const Tensor& a, std::size_t axis);
// Over the last axis: (x - mean) / sqrt(var + eps) * gamma + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace manf
