#include "manf/flow.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace manf {

namespace {

void check_finite(const Tensor& t, const char* what, std::size_t layer_index) {
    if (!t.all_finite()) {
        throw NumericError(std::string("coupling layer ") + std::to_string(layer_index) +
                           ": non-finite " + what + " output");
    }
}

Tensor broadcast_rows(const Tensor& logdet_scalar, std::size_t batch) {
    return add(Tensor::zeros({batch}), logdet_scalar);
}

}  // namespace

MlpNet MlpNet::init(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, Rng& rng,
                    bool zero_last) {
    if (in_dim == 0 || out_dim == 0) throw ContractError("MlpNet: zero-width layer");
    MlpNet net;
    const double s1 = std::sqrt(2.0 / static_cast<double>(in_dim + hidden));
    net.w1 = Tensor::randn({in_dim, hidden}, rng, s1).set_requires_grad(true);
    net.b1 = Tensor::zeros({hidden}).set_requires_grad(true);
    if (zero_last) {
        net.w2 = Tensor::zeros({hidden, out_dim}).set_requires_grad(true);
    } else {
        const double s2 = std::sqrt(2.0 / static_cast<double>(hidden + out_dim));
        net.w2 = Tensor::randn({hidden, out_dim}, rng, s2).set_requires_grad(true);
    }
    net.b2 = Tensor::zeros({out_dim}).set_requires_grad(true);
    return net;
}

Tensor MlpNet::forward(const Tensor& x) const {
    return matmul(relu(matmul(x, w1) + b1), w2) + b2;
}

std::vector<Tensor*> MlpNet::params() { return {&w1, &b1, &w2, &b2}; }

CouplingLayer CouplingLayer::init(std::size_t dim, std::size_t cond_dim, std::size_t layer_index,
                                  Conditioning mode, Rng& rng, std::size_t hidden,
                                  double scale_clamp) {
    if (dim == 0) throw ContractError("coupling: dim must be positive");
    CouplingLayer layer;
    layer.dim = dim;
    layer.cond_dim = cond_dim;
    layer.mode = mode;
    layer.scale_clamp = scale_clamp;
    if (dim == 1) {
        layer.trans_idx = {0};  // no half to keep; s/t read the conditioner only
    } else {
        for (std::size_t i = 0; i < dim; ++i) {
            if (i % 2 == layer_index % 2) {
                layer.kept_idx.push_back(i);
            } else {
                layer.trans_idx.push_back(i);
            }
        }
    }
    const std::size_t net_in =
        (mode == Conditioning::Coupling ? layer.kept_idx.size() : 0) + cond_dim;
    const std::size_t net_out = layer.trans_idx.size();
    layer.s_net = MlpNet::init(net_in, hidden, net_out, rng);
    layer.t_net = MlpNet::init(net_in, hidden, net_out, rng);
    return layer;
}

std::vector<Tensor*> CouplingLayer::params() {
    std::vector<Tensor*> out;
    for (Tensor* p : s_net.params()) out.push_back(p);
    for (Tensor* p : t_net.params()) out.push_back(p);
    return out;
}

namespace {

struct CouplingEval {
    Tensor s, t;
};

CouplingEval eval_coupling_nets(const Tensor& z, const Tensor& cond, const CouplingLayer& layer,
                                std::size_t layer_index = 0) {
    if (z.ndim() != 2 || z.extent(1) != layer.dim) {
        throw ShapeError("coupling: expected [B, " + std::to_string(layer.dim) + "] input, got " +
                         shape_str(z.shape()));
    }
    if (cond.ndim() != 2 || cond.extent(1) != layer.cond_dim || cond.extent(0) != z.extent(0)) {
        throw ShapeError("coupling: conditioner shape " + shape_str(cond.shape()) +
                         " does not match input " + shape_str(z.shape()));
    }
    Tensor net_in = cond;
    if (layer.mode == Conditioning::Coupling && !layer.kept_idx.empty()) {
        net_in = concat({index_select_last(z, layer.kept_idx), cond}, 1);
    }
    Tensor s_raw = layer.s_net.forward(net_in);
    Tensor s = layer.scale_clamp > 0.0 ? mul_scalar(tanh(s_raw), layer.scale_clamp) : s_raw;
    Tensor t = layer.t_net.forward(net_in);
    check_finite(s, "s", layer_index);
    check_finite(t, "t", layer_index);
    return {s, t};
}

}  // namespace

std::pair<Tensor, Tensor> coupling_forward(const Tensor& z, const Tensor& cond,
                                           const CouplingLayer& layer) {
    auto [s, t] = eval_coupling_nets(z, cond, layer);
    Tensor trans = index_select_last(z, layer.trans_idx);
    Tensor out_trans = trans * exp(s) + t;
    Tensor z_out = scatter_last(out_trans, layer.trans_idx, layer.dim);
    if (!layer.kept_idx.empty()) {
        z_out = z_out + scatter_last(index_select_last(z, layer.kept_idx), layer.kept_idx,
                                     layer.dim);
    }
    return {z_out, sum(s, 1)};
}

std::pair<Tensor, Tensor> coupling_inverse(const Tensor& z_out, const Tensor& cond,
                                           const CouplingLayer& layer) {
    auto [s, t] = eval_coupling_nets(z_out, cond, layer);  // kept half is shared, so s/t agree
    Tensor trans = (index_select_last(z_out, layer.trans_idx) - t) * exp(neg(s));
    Tensor z = scatter_last(trans, layer.trans_idx, layer.dim);
    if (!layer.kept_idx.empty()) {
        z = z + scatter_last(index_select_last(z_out, layer.kept_idx), layer.kept_idx, layer.dim);
    }
    return {z, neg(sum(s, 1))};
}

BNBijection BNBijection::init(std::size_t dim) {
    BNBijection bij;
    bij.gamma = Tensor::ones({dim}).set_requires_grad(true);
    bij.beta = Tensor::zeros({dim}).set_requires_grad(true);
    bij.running_mean.assign(dim, 0.0);
    bij.running_var.assign(dim, 1.0);
    return bij;
}

std::vector<Tensor*> BNBijection::params() { return {&gamma, &beta}; }

namespace {

void check_gamma(const BNBijection& bij) {
    for (std::size_t i = 0; i < bij.gamma.size(); ++i) {
        if (bij.gamma.data()[i] == 0.0) {
            throw NumericError("BN bijection: gamma[" + std::to_string(i) +
                               "] = 0 makes the map singular");
        }
    }
}

Tensor bn_logdet(const Tensor& gamma, const Tensor& var_plus_eps) {
    return sum(log(abs(gamma))) - 0.5 * sum(log(var_plus_eps));
}

}  // namespace

std::pair<Tensor, Tensor> bn_forward(const Tensor& x, BNBijection& bij, bool training) {
    const std::size_t d = bij.gamma.size();
    if (x.ndim() != 2 || x.extent(1) != d) {
        throw ShapeError("bn_forward: expected [B, " + std::to_string(d) + "], got " +
                         shape_str(x.shape()));
    }
    check_gamma(bij);
    const std::size_t b = x.extent(0);
    Tensor mu, var;
    if (training) {
        if (b < 2) throw ContractError("bn_forward: training mode needs batch size >= 2");
        mu = mean(x, 0);
        var = variance(x, 0);
        bij.batch_mean.assign(mu.data(), mu.data() + d);
        bij.batch_var.assign(var.data(), var.data() + d);
        for (std::size_t i = 0; i < d; ++i) {
            bij.running_mean[i] =
                bij.momentum * bij.running_mean[i] + (1.0 - bij.momentum) * bij.batch_mean[i];
            bij.running_var[i] =
                bij.momentum * bij.running_var[i] + (1.0 - bij.momentum) * bij.batch_var[i];
        }
    } else {
        mu = Tensor::from_vector({d}, bij.running_mean);
        var = Tensor::from_vector({d}, bij.running_var);
    }
    Tensor var_eps = var + bij.eps;
    Tensor y = (x - mu) * pow_scalar(var_eps, -0.5) * bij.gamma + bij.beta;
    return {y, broadcast_rows(bn_logdet(bij.gamma, var_eps), b)};
}

std::pair<Tensor, Tensor> bn_inverse(const Tensor& y, BNBijection& bij, bool training) {
    const std::size_t d = bij.gamma.size();
    if (y.ndim() != 2 || y.extent(1) != d) {
        throw ShapeError("bn_inverse: expected [B, " + std::to_string(d) + "], got " +
                         shape_str(y.shape()));
    }
    check_gamma(bij);
    const std::vector<double>* mu_v = &bij.running_mean;
    const std::vector<double>* var_v = &bij.running_var;
    if (training) {
        if (bij.batch_mean.empty()) {
            throw ContractError("bn_inverse: no training-mode forward statistics available");
        }
        mu_v = &bij.batch_mean;
        var_v = &bij.batch_var;
    }
    Tensor mu = Tensor::from_vector({d}, *mu_v);
    Tensor var_eps = Tensor::from_vector({d}, *var_v) + bij.eps;
    Tensor x = (y - bij.beta) / bij.gamma * pow_scalar(var_eps, 0.5) + mu;
    return {x, broadcast_rows(neg(bn_logdet(bij.gamma, var_eps)), y.extent(0))};
}

FlowStack FlowStack::init(std::size_t dim, std::size_t cond_dim, std::size_t n_couplings,
                          Conditioning mode, Rng& rng, bool use_bn, std::size_t hidden,
                          double scale_clamp) {
    FlowStack stack;
    stack.dim = dim;
    stack.use_bn = use_bn;
    for (std::size_t i = 0; i < n_couplings; ++i) {
        stack.couplings.push_back(
            CouplingLayer::init(dim, cond_dim, i, mode, rng, hidden, scale_clamp));
        if (use_bn) stack.bns.push_back(BNBijection::init(dim));
    }
    return stack;
}

std::vector<Tensor*> FlowStack::params() {
    std::vector<Tensor*> out;
    for (auto& c : couplings) {
        for (Tensor* p : c.params()) out.push_back(p);
    }
    for (auto& b : bns) {
        for (Tensor* p : b.params()) out.push_back(p);
    }
    return out;
}

Tensor flow_log_prob(const Tensor& x, const std::vector<Tensor>& conds, FlowStack& stack,
                     bool training) {
    if (conds.size() != stack.couplings.size()) {
        throw ContractError("flow_log_prob: " + std::to_string(conds.size()) +
                            " conditioners for " + std::to_string(stack.couplings.size()) +
                            " couplings");
    }
    const std::size_t b = x.extent(0);
    Tensor z = x;
    Tensor total = Tensor::zeros({b});
    for (std::size_t i = stack.couplings.size(); i-- > 0;) {
        if (stack.use_bn) {
            auto [zn, ld] = bn_forward(z, stack.bns[i], training);
            z = zn;
            total = total + ld;
        }
        auto [zc, ld] = coupling_inverse(z, conds[i], stack.couplings[i]);
        z = zc;
        total = total + ld;
    }
    const double base_const =
        -0.5 * static_cast<double>(stack.dim) * std::log(2.0 * std::numbers::pi);
    Tensor log_p = total + (sum(square(z), 1) * -0.5) + base_const;
    if (!log_p.all_finite()) throw NumericError("flow_log_prob: non-finite log density");
    return log_p;
}

Tensor flow_sample(Rng& rng, const std::vector<Tensor>& conds, FlowStack& stack, std::size_t n) {
    if (conds.size() != stack.couplings.size()) {
        throw ContractError("flow_sample: conditioner count mismatch");
    }
    NoGradGuard guard;
    Tensor z = Tensor::randn({n, stack.dim}, rng);
    for (std::size_t i = 0; i < stack.couplings.size(); ++i) {
        Tensor cond = conds[i];
        if (cond.extent(0) == 1 && n > 1) {
            std::vector<double> tiled;
            tiled.reserve(n * cond.size());
            for (std::size_t r = 0; r < n; ++r) {
                tiled.insert(tiled.end(), cond.data(), cond.data() + cond.size());
            }
            cond = Tensor::from_vector({n, cond.extent(1)}, std::move(tiled));
        }
        z = coupling_forward(z, cond, stack.couplings[i]).first;
        if (stack.use_bn) z = bn_inverse(z, stack.bns[i], false).first;
    }
    return z;
}

}  // namespace manf
