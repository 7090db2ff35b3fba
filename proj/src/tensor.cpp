#include "manf/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace manf {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// Strides of `shape` aligned to the right of `out_shape`; broadcast axes get
// stride zero.
std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out_shape) {
    const std::size_t pad = out_shape.size() - shape.size();
    auto own = row_major_strides(shape);
    std::vector<std::size_t> strides(out_shape.size(), 0);
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] != 1) strides[pad + i] = own[i];
    }
    return strides;
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    const std::size_t pad = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i) {
        if (small[i] != big[pad + i]) return false;
    }
    return true;
}

// Sum `grad` (shaped like out_shape) down to `target` under broadcasting.
std::vector<double> reduce_grad(const std::vector<double>& grad, const Shape& out_shape,
                                const Shape& target) {
    if (out_shape == target) return grad;
    const std::size_t target_n = shape_numel(target);
    std::vector<double> reduced(target_n, 0.0);
    if (is_suffix(target, out_shape)) {
        const std::size_t reps = grad.size() / std::max<std::size_t>(target_n, 1);
        for (std::size_t r = 0; r < reps; ++r) {
            const double* g = grad.data() + r * target_n;
            for (std::size_t i = 0; i < target_n; ++i) reduced[i] += g[i];
        }
        return reduced;
    }
    const auto strides = broadcast_strides(target, out_shape);
    const std::size_t nd = out_shape.size();
    std::vector<std::size_t> idx(nd, 0);
    for (std::size_t lin = 0; lin < grad.size(); ++lin) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < nd; ++d) off += idx[d] * strides[d];
        reduced[off] += grad[lin];
        for (std::size_t d = nd; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    return reduced;
}

void accumulate(detail::TensorImpl& node, const std::vector<double>& contribution) {
    node.ensure_grad();
    for (std::size_t i = 0; i < contribution.size(); ++i) node.grad[i] += contribution[i];
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::size_t eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(detail::TensorImpl&)> backprop) {
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    bool needs_grad = false;
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
    if (needs_grad && g_grad_enabled) {
        t.impl_->requires_grad = true;
        t.impl_->parents.reserve(parents.size());
        for (const auto& p : parents) t.impl_->parents.push_back(p.impl());
        t.impl_->backprop = std::move(backprop);
    }
    return t;
}

Tensor Tensor::zeros(const Shape& shape) {
    return make_op(shape, std::vector<double>(shape_numel(shape), 0.0), {}, nullptr);
}

Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
    return make_op(shape, std::vector<double>(shape_numel(shape), value), {}, nullptr);
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> values) {
    if (values.size() != shape_numel(shape)) {
        throw ShapeError("from_vector: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
    }
    return make_op(shape, std::move(values), {}, nullptr);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = stddev * rng.normal();
    return make_op(shape, std::move(values), {}, nullptr);
}

Tensor Tensor::rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = rng.uniform(lo, hi);
    return make_op(shape, std::move(values), {}, nullptr);
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(const std::vector<std::size_t>& index) const {
    if (index.size() != ndim()) throw IndexError("at(): rank mismatch");
    const auto strides = row_major_strides(impl_->shape);
    std::size_t off = 0;
    for (std::size_t d = 0; d < index.size(); ++d) {
        if (index[d] >= impl_->shape[d]) throw IndexError("at(): index out of range");
        off += index[d] * strides[d];
    }
    return impl_->data[off];
}

bool Tensor::all_finite() const {
    for (double v : impl_->data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::detach() const {
    return make_op(impl_->shape, impl_->data, {}, nullptr);
}

void Tensor::backward() const {
    if (size() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!impl_->requires_grad) return;

    // Iterative post-order DFS; reversal gives a valid execution order.
    std::vector<detail::TensorImpl*> topo;
    std::unordered_set<detail::TensorImpl*> visited;
    struct Frame {
        detail::TensorImpl* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorImpl* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    // Interior nodes get fresh gradients every sweep; only leaves accumulate
    // across repeated backward calls.
    for (auto* node : topo) {
        if (node->backprop && !node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
    }
    impl_->ensure_grad();
    impl_->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->backprop) {
            node->ensure_grad();
            node->backprop(*node);
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, F&& fn,
                        std::function<void(detail::TensorImpl&)> backprop,
                        std::vector<Tensor> parents) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    if (a.shape() == b.shape()) {
        const double* pa = a.data();
        const double* pb = b.data();
        for (std::size_t i = 0; i < n; ++i) out[i] = fn(pa[i], pb[i]);
    } else if (is_suffix(b.shape(), out_shape) && a.shape() == out_shape) {
        const std::size_t bn = std::max<std::size_t>(b.size(), 1);
        const double* pa = a.data();
        const double* pb = b.data();
        for (std::size_t i = 0; i < n; ++i) out[i] = fn(pa[i], pb[i % bn]);
    } else {
        const auto sa = broadcast_strides(a.shape(), out_shape);
        const auto sb = broadcast_strides(b.shape(), out_shape);
        const std::size_t nd = out_shape.size();
        std::vector<std::size_t> idx(nd, 0);
        const double* pa = a.data();
        const double* pb = b.data();
        for (std::size_t lin = 0; lin < n; ++lin) {
            std::size_t oa = 0;
            std::size_t ob = 0;
            for (std::size_t d = 0; d < nd; ++d) {
                oa += idx[d] * sa[d];
                ob += idx[d] * sb[d];
            }
            out[lin] = fn(pa[oa], pb[ob]);
            for (std::size_t d = nd; d-- > 0;) {
                if (++idx[d] < out_shape[d]) break;
                idx[d] = 0;
            }
        }
    }
    return make_op(out_shape, std::move(out), std::move(parents), std::move(backprop));
}

// Values of `t` expanded to out_shape (identity when shapes match).
std::vector<double> expand_to(const Tensor& t, const Shape& out_shape) {
    if (t.shape() == out_shape) return t.vec();
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    const auto st = broadcast_strides(t.shape(), out_shape);
    const std::size_t nd = out_shape.size();
    std::vector<std::size_t> idx(nd, 0);
    const double* p = t.data();
    for (std::size_t lin = 0; lin < n; ++lin) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < nd; ++d) off += idx[d] * st[d];
        out[lin] = p[off];
        for (std::size_t d = nd; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    auto ai = a.impl();
    auto bi = b.impl();
    return broadcast_binary(
        a, b, [](double x, double y) { return x + y; },
        [ai, bi, out_shape](detail::TensorImpl& self) {
            if (ai->requires_grad) accumulate(*ai, reduce_grad(self.grad, out_shape, ai->shape));
            if (bi->requires_grad) accumulate(*bi, reduce_grad(self.grad, out_shape, bi->shape));
        },
        {a, b});
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    auto ai = a.impl();
    auto bi = b.impl();
    return broadcast_binary(
        a, b, [](double x, double y) { return x - y; },
        [ai, bi, out_shape](detail::TensorImpl& self) {
            if (ai->requires_grad) accumulate(*ai, reduce_grad(self.grad, out_shape, ai->shape));
            if (bi->requires_grad) {
                auto g = self.grad;
                for (auto& v : g) v = -v;
                accumulate(*bi, reduce_grad(g, out_shape, bi->shape));
            }
        },
        {a, b});
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    auto ai = a.impl();
    auto bi = b.impl();
    Tensor av = a;
    Tensor bv = b;
    return broadcast_binary(
        a, b, [](double x, double y) { return x * y; },
        [ai, bi, av, bv, out_shape](detail::TensorImpl& self) {
            if (ai->requires_grad) {
                auto other = expand_to(bv, out_shape);
                for (std::size_t i = 0; i < other.size(); ++i) other[i] *= self.grad[i];
                accumulate(*ai, reduce_grad(other, out_shape, ai->shape));
            }
            if (bi->requires_grad) {
                auto other = expand_to(av, out_shape);
                for (std::size_t i = 0; i < other.size(); ++i) other[i] *= self.grad[i];
                accumulate(*bi, reduce_grad(other, out_shape, bi->shape));
            }
        },
        {a, b});
}

Tensor div(const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    auto ai = a.impl();
    auto bi = b.impl();
    Tensor av = a;
    Tensor bv = b;
    return broadcast_binary(
        a, b, [](double x, double y) { return x / y; },
        [ai, bi, av, bv, out_shape](detail::TensorImpl& self) {
            const auto bexp = expand_to(bv, out_shape);
            if (ai->requires_grad) {
                auto g = self.grad;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] /= bexp[i];
                accumulate(*ai, reduce_grad(g, out_shape, ai->shape));
            }
            if (bi->requires_grad) {
                auto aexp = expand_to(av, out_shape);
                for (std::size_t i = 0; i < aexp.size(); ++i) {
                    aexp[i] = -self.grad[i] * aexp[i] / (bexp[i] * bexp[i]);
                }
                accumulate(*bi, reduce_grad(aexp, out_shape, bi->shape));
            }
        },
        {a, b});
}

namespace {

template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F&& fn, DF&& dfn) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    const double* pa = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(pa[i]);
    auto ai = a.impl();
    Tensor av = a;
    Tensor result = make_op(
        a.shape(), std::move(out), {a},
        [ai, av, dfn](detail::TensorImpl& self) {
            if (!ai->requires_grad) return;
            std::vector<double> g(self.grad.size());
            const double* x = av.data();
            const double* y = self.data.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * dfn(x[i], y[i]);
            accumulate(*ai, g);
        });
    return result;
}

}  // namespace

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.vec()) {
        if (!(v > 0.0)) {
            throw DomainError("log of non-positive input " + std::to_string(v));
        }
    }
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
    return unary_op(a, [](double x) { return std::fabs(x); },
                    [](double x, double) { return x >= 0.0 ? 1.0 : -1.0; });
}

Tensor square(const Tensor& a) {
    return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor pow_scalar(const Tensor& a, double p) {
    return unary_op(a, [p](double x) { return std::pow(x, p); },
                    [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ContractError("dropout rate must be in [0,1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return add_scalar(a, 0.0);
    const double keep = 1.0 - rate;
    const std::size_t n = a.size();
    auto mask = std::make_shared<std::vector<double>>(n);
    std::vector<double> out(n);
    const double* pa = a.data();
    for (std::size_t i = 0; i < n; ++i) {
        (*mask)[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
        out[i] = pa[i] * (*mask)[i];
    }
    auto ai = a.impl();
    return make_op(a.shape(), std::move(out), {a}, [ai, mask](detail::TensorImpl& self) {
        if (!ai->requires_grad) return;
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * (*mask)[i];
        accumulate(*ai, g);
    });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

struct BatchedView {
    Shape batch_shape;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::size_t> strides;  // per batch axis, in units of rows*cols slices
};

// Offset (in slices) of batch index `idx` under broadcast strides.
std::size_t slice_offset(const std::vector<std::size_t>& idx,
                         const std::vector<std::size_t>& strides) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) off += idx[d] * strides[d];
    return off;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError("matmul needs rank >= 2: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.extent(a.ndim() - 2);
    const std::size_t k = a.extent(a.ndim() - 1);
    const std::size_t kb = b.extent(b.ndim() - 2);
    const std::size_t n = b.extent(b.ndim() - 1);
    if (k != kb) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    const Shape batch = broadcast_shapes(a_batch, b_batch);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    // Slice strides: broadcast strides over batch axes measured in slices.
    auto slice_strides = [](const Shape& own_batch, const Shape& full_batch) {
        std::vector<std::size_t> strides(full_batch.size(), 0);
        std::vector<std::size_t> own = row_major_strides(own_batch);
        const std::size_t pad = full_batch.size() - own_batch.size();
        for (std::size_t i = 0; i < own_batch.size(); ++i) {
            if (own_batch[i] != 1) strides[pad + i] = own[i];
        }
        return strides;
    };
    const auto sa = slice_strides(a_batch, batch);
    const auto sb = slice_strides(b_batch, batch);
    const std::size_t n_batches = shape_numel(batch);

    std::vector<double> out(n_batches * m * n);
    {
        std::vector<std::size_t> idx(batch.size(), 0);
        for (std::size_t bi = 0; bi < n_batches; ++bi) {
            CMapMat ma(a.data() + slice_offset(idx, sa) * m * k, m, k);
            CMapMat mb(b.data() + slice_offset(idx, sb) * k * n, k, n);
            MapMat mo(out.data() + bi * m * n, m, n);
            mo.noalias() = ma * mb;
            for (std::size_t d = batch.size(); d-- > 0;) {
                if (++idx[d] < batch[d]) break;
                idx[d] = 0;
            }
        }
    }

    auto ai = a.impl();
    auto bi_ = b.impl();
    Tensor av = a;
    Tensor bv = b;
    return make_op(out_shape, std::move(out), {a, b},
                   [ai, bi_, av, bv, batch, sa, sb, m, k, n](detail::TensorImpl& self) {
                       const std::size_t n_batches = shape_numel(batch);
                       std::vector<std::size_t> idx(batch.size(), 0);
                       std::vector<double> ga;
                       std::vector<double> gb;
                       if (ai->requires_grad) ga.assign(ai->data.size(), 0.0);
                       if (bi_->requires_grad) gb.assign(bi_->data.size(), 0.0);
                       for (std::size_t biter = 0; biter < n_batches; ++biter) {
                           CMapMat gout(self.grad.data() + biter * m * n, m, n);
                           if (ai->requires_grad) {
                               CMapMat mb(bv.data() + slice_offset(idx, sb) * k * n, k, n);
                               MapMat mga(ga.data() + slice_offset(idx, sa) * m * k, m, k);
                               mga.noalias() += gout * mb.transpose();
                           }
                           if (bi_->requires_grad) {
                               CMapMat ma(av.data() + slice_offset(idx, sa) * m * k, m, k);
                               MapMat mgb(gb.data() + slice_offset(idx, sb) * k * n, k, n);
                               mgb.noalias() += ma.transpose() * gout;
                           }
                           for (std::size_t d = batch.size(); d-- > 0;) {
                               if (++idx[d] < batch[d]) break;
                               idx[d] = 0;
                           }
                       }
                       if (ai->requires_grad) accumulate(*ai, ga);
                       if (bi_->requires_grad) accumulate(*bi_, gb);
                   });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.size()) {
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    auto ai = a.impl();
    return make_op(shape, a.vec(), {a}, [ai](detail::TensorImpl& self) {
        if (ai->requires_grad) accumulate(*ai, self.grad);
    });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    if (axes.size() != a.ndim()) throw ShapeError("permute: rank mismatch");
    Shape out_shape(a.ndim());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.extent(axes[i]);
    const auto in_strides = row_major_strides(a.shape());
    std::vector<std::size_t> gather_strides(a.ndim());
    for (std::size_t i = 0; i < axes.size(); ++i) gather_strides[i] = in_strides[axes[i]];

    const std::size_t n = a.size();
    std::vector<double> out(n);
    auto fill = [out_shape, gather_strides, n](const double* src, double* dst, bool scatter) {
        std::vector<std::size_t> idx(out_shape.size(), 0);
        for (std::size_t lin = 0; lin < n; ++lin) {
            std::size_t off = 0;
            for (std::size_t d = 0; d < idx.size(); ++d) off += idx[d] * gather_strides[d];
            if (scatter) {
                dst[off] += src[lin];
            } else {
                dst[lin] = src[off];
            }
            for (std::size_t d = idx.size(); d-- > 0;) {
                if (++idx[d] < out_shape[d]) break;
                idx[d] = 0;
            }
        }
    };
    fill(a.data(), out.data(), false);
    auto ai = a.impl();
    return make_op(out_shape, std::move(out), {a}, [ai, fill](detail::TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        fill(self.grad.data(), ai->grad.data(), true);
    });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.ndim()) throw IndexError("slice: axis out of range");
    if (start + len > a.extent(axis)) throw IndexError("slice: range out of bounds");
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.extent(d);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < a.ndim(); ++d) inner *= a.extent(d);
    const std::size_t in_axis = a.extent(axis);

    std::vector<double> out(outer * len * inner);
    const double* src = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        const double* s = src + (o * in_axis + start) * inner;
        double* d = out.data() + o * len * inner;
        std::copy(s, s + len * inner, d);
    }
    auto ai = a.impl();
    return make_op(out_shape, std::move(out), {a},
                   [ai, outer, inner, len, in_axis, start](detail::TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       ai->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                           const double* g = self.grad.data() + o * len * inner;
                           double* d = ai->grad.data() + (o * in_axis + start) * inner;
                           for (std::size_t i = 0; i < len * inner; ++i) d[i] += g[i];
                       }
                   });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    const Shape& base = parts[0].shape();
    if (axis >= base.size()) throw IndexError("concat: axis out of range");
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.ndim() != base.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < base.size(); ++d) {
            if (d != axis && p.extent(d) != base[d]) {
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(base));
            }
        }
        total_axis += p.extent(axis);
    }
    Shape out_shape = base;
    out_shape[axis] = total_axis;
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= base[d];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < base.size(); ++d) inner *= base[d];

    std::vector<double> out(outer * total_axis * inner);
    std::vector<std::size_t> offsets(parts.size(), 0);
    std::size_t running = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        offsets[pi] = running;
        const std::size_t la = parts[pi].extent(axis);
        const double* src = parts[pi].data();
        for (std::size_t o = 0; o < outer; ++o) {
            double* d = out.data() + (o * total_axis + running) * inner;
            std::copy(src + o * la * inner, src + (o + 1) * la * inner, d);
        }
        running += la;
    }
    std::vector<Tensor> parent_copies = parts;
    return make_op(out_shape, std::move(out), parts,
                   [parent_copies, offsets, outer, inner, total_axis,
                    axis](detail::TensorImpl& self) {
                       for (std::size_t pi = 0; pi < parent_copies.size(); ++pi) {
                           auto pimpl = parent_copies[pi].impl();
                           if (!pimpl->requires_grad) continue;
                           pimpl->ensure_grad();
                           const std::size_t la = parent_copies[pi].extent(axis);
                           for (std::size_t o = 0; o < outer; ++o) {
                               const double* g =
                                   self.grad.data() + (o * total_axis + offsets[pi]) * inner;
                               double* d = pimpl->grad.data() + o * la * inner;
                               for (std::size_t i = 0; i < la * inner; ++i) d[i] += g[i];
                           }
                       }
                   });
}

Tensor index_select_last(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.ndim() == 0) throw ShapeError("index_select_last on scalar");
    const std::size_t last = a.extent(a.ndim() - 1);
    for (auto i : idx) {
        if (i >= last) throw IndexError("index_select_last: index out of range");
    }
    Shape out_shape = a.shape();
    out_shape.back() = idx.size();
    const std::size_t rows = a.size() / last;
    std::vector<double> out(rows * idx.size());
    const double* src = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < idx.size(); ++j) out[r * idx.size() + j] = src[r * last + idx[j]];
    }
    auto ai = a.impl();
    const std::size_t k = idx.size();
    auto idx_copy = idx;
    return make_op(out_shape, std::move(out), {a},
                   [ai, idx_copy, rows, last, k](detail::TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       ai->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < k; ++j) {
                               ai->grad[r * last + idx_copy[j]] += self.grad[r * k + j];
                           }
                       }
                   });
}

Tensor scatter_last(const Tensor& a, const std::vector<std::size_t>& idx, std::size_t out_dim) {
    if (a.ndim() == 0 || a.extent(a.ndim() - 1) != idx.size()) {
        throw ShapeError("scatter_last: last extent must equal index count");
    }
    for (auto i : idx) {
        if (i >= out_dim) throw IndexError("scatter_last: index out of range");
    }
    Shape out_shape = a.shape();
    out_shape.back() = out_dim;
    const std::size_t k = idx.size();
    const std::size_t rows = a.size() / std::max<std::size_t>(k, 1);
    std::vector<double> out(rows * out_dim, 0.0);
    const double* src = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) out[r * out_dim + idx[j]] = src[r * k + j];
    }
    auto ai = a.impl();
    auto idx_copy = idx;
    return make_op(out_shape, std::move(out), {a},
                   [ai, idx_copy, rows, out_dim, k](detail::TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       ai->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < k; ++j) {
                               ai->grad[r * k + j] += self.grad[r * out_dim + idx_copy[j]];
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.vec()) total += v;
    auto ai = a.impl();
    return make_op({}, {total}, {a}, [ai](detail::TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        const double g = self.grad[0];
        for (auto& v : ai->grad) v += g;
    });
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
    if (axis >= a.ndim()) throw IndexError("sum: axis out of range");
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.extent(d);
    const std::size_t n_axis = a.extent(axis);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < a.ndim(); ++d) inner *= a.extent(d);

    Shape out_shape;
    for (std::size_t d = 0; d < a.ndim(); ++d) {
        if (d == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(a.extent(d));
        }
    }
    std::vector<double> out(outer * inner, 0.0);
    const double* src = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t x = 0; x < n_axis; ++x) {
            const double* s = src + (o * n_axis + x) * inner;
            double* d = out.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) d[i] += s[i];
        }
    }
    auto ai = a.impl();
    return make_op(out_shape, std::move(out), {a},
                   [ai, outer, n_axis, inner](detail::TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       ai->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                           const double* g = self.grad.data() + o * inner;
                           for (std::size_t x = 0; x < n_axis; ++x) {
                               double* d = ai->grad.data() + (o * n_axis + x) * inner;
                               for (std::size_t i = 0; i < inner; ++i) d[i] += g[i];
                           }
                       }
                   });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
    return mul_scalar(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.extent(axis)));
}

Tensor variance(const Tensor& a, std::size_t axis, bool keepdim) {
    Tensor mu = mean(a, axis, true);
    Tensor centered = sub(a, mu);
    Tensor v = mean(square(centered), axis, keepdim);
    return v;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.ndim()) throw IndexError("softmax: axis out of range");
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.extent(d);
    const std::size_t n_axis = a.extent(axis);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < a.ndim(); ++d) inner *= a.extent(d);

    std::vector<double> out(a.size());
    const double* src = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n_axis * inner + i;
            double mx = src[base];
            for (std::size_t x = 1; x < n_axis; ++x) mx = std::max(mx, src[base + x * inner]);
            double denom = 0.0;
            for (std::size_t x = 0; x < n_axis; ++x) {
                const double e = std::exp(src[base + x * inner] - mx);
                out[base + x * inner] = e;
                denom += e;
            }
            for (std::size_t x = 0; x < n_axis; ++x) out[base + x * inner] /= denom;
        }
    }
    auto ai = a.impl();
    return make_op(a.shape(), std::move(out), {a},
                   [ai, outer, n_axis, inner](detail::TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       ai->ensure_grad();
                       const double* y = self.data.data();
                       const double* gy = self.grad.data();
                       for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t i = 0; i < inner; ++i) {
                               const std::size_t base = o * n_axis * inner + i;
                               double dot = 0.0;
                               for (std::size_t x = 0; x < n_axis; ++x) {
                                   dot += gy[base + x * inner] * y[base + x * inner];
                               }
                               for (std::size_t x = 0; x < n_axis; ++x) {
                                   const std::size_t p = base + x * inner;
                                   ai->grad[p] += y[p] * (gy[p] - dot);
                               }
                           }
                       }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.ndim() == 0) throw ShapeError("layer_norm on scalar");
    const std::size_t n = x.extent(x.ndim() - 1);
    if (gamma.size() != n || beta.size() != n) {
        throw ShapeError("layer_norm: gamma/beta must match last extent " + std::to_string(n));
    }
    if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
    const std::size_t rows = x.size() / n;

    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * n;
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += row[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = row[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double r_ = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = r_;
        for (std::size_t i = 0; i < n; ++i) {
            const double xh = (row[i] - mu) * r_;
            (*xhat)[r * n + i] = xh;
            out[r * n + i] = xh * pg[i] + pb[i];
        }
    }
    auto xi = x.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [xi, gi, bi, xhat, rstd, rows, n](detail::TensorImpl& self) {
                       const double* gy = self.grad.data();
                       const double* xh = xhat->data();
                       const double* pg = gi->data.data();
                       if (gi->requires_grad) gi->ensure_grad();
                       if (bi->requires_grad) bi->ensure_grad();
                       if (xi->requires_grad) xi->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* gyr = gy + r * n;
                           const double* xhr = xh + r * n;
                           if (gi->requires_grad || bi->requires_grad) {
                               for (std::size_t i = 0; i < n; ++i) {
                                   if (gi->requires_grad) gi->grad[i] += gyr[i] * xhr[i];
                                   if (bi->requires_grad) bi->grad[i] += gyr[i];
                               }
                           }
                           if (xi->requires_grad) {
                               double mean_dyh = 0.0;
                               double mean_dyh_xh = 0.0;
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double dyh = gyr[i] * pg[i];
                                   mean_dyh += dyh;
                                   mean_dyh_xh += dyh * xhr[i];
                               }
                               mean_dyh /= static_cast<double>(n);
                               mean_dyh_xh /= static_cast<double>(n);
                               const double r_ = (*rstd)[r];
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double dyh = gyr[i] * pg[i];
                                   xi->grad[r * n + i] +=
                                       r_ * (dyh - mean_dyh - xhr[i] * mean_dyh_xh);
                               }
                           }
                       }
                   });
}

}  // namespace manf
