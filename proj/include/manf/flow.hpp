#pragma once

#include <cstddef>
#include <vector>

#include "manf/tensor.hpp"

namespace manf {

// How coupling s/t nets see their input: Coupling feeds [z_kept; cond],
// Elementwise feeds cond alone (a per-dim conditional affine map).
enum class Conditioning { Coupling, Elementwise };

struct MlpNet {
    Tensor w1, b1, w2, b2;

    static MlpNet init(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, Rng& rng,
                       bool zero_last = true);
    Tensor forward(const Tensor& x) const;
    std::vector<Tensor*> params();
};

struct CouplingLayer {
    std::size_t dim = 0;
    std::size_t cond_dim = 0;
    Conditioning mode = Conditioning::Coupling;
    double scale_clamp = 2.0;
    std::vector<std::size_t> kept_idx;   // parity mask: even layers keep even dims
    std::vector<std::size_t> trans_idx;
    MlpNet s_net, t_net;

    static CouplingLayer init(std::size_t dim, std::size_t cond_dim, std::size_t layer_index,
                              Conditioning mode, Rng& rng, std::size_t hidden = 100,
                              double scale_clamp = 2.0);
    std::vector<Tensor*> params();
};

struct BNBijection {
    Tensor gamma, beta;                 // [D] learnable
    std::vector<double> running_mean;   // per-dim statistics
    std::vector<double> running_var;
    std::vector<double> batch_mean;     // stats used by the most recent training forward
    std::vector<double> batch_var;
    double momentum = 0.9;
    double eps = 1e-5;

    static BNBijection init(std::size_t dim);
    std::vector<Tensor*> params();
};

struct FlowStack {
    std::vector<CouplingLayer> couplings;
    std::vector<BNBijection> bns;   // one per coupling when use_bn
    bool use_bn = true;
    std::size_t dim = 0;

    static FlowStack init(std::size_t dim, std::size_t cond_dim, std::size_t n_couplings,
                          Conditioning mode, Rng& rng, bool use_bn = true,
                          std::size_t hidden = 100, double scale_clamp = 2.0);
    std::vector<Tensor*> params();
};

// Generative direction: kept half copied, transformed half z*exp(s)+t.
// Returns (z_out [B,D], logdet [B]).
std::pair<Tensor, Tensor> coupling_forward(const Tensor& z, const Tensor& cond,
                                           const CouplingLayer& layer);
// Analytic inverse; logdet negated.
std::pair<Tensor, Tensor> coupling_inverse(const Tensor& z_out, const Tensor& cond,
                                           const CouplingLayer& layer);

// Normalizing direction y = gamma*(x-mu)/sqrt(var+eps) + beta; batch stats in
// training (updates running averages), running stats in eval.
std::pair<Tensor, Tensor> bn_forward(const Tensor& x, BNBijection& bij, bool training);
// Un-normalizes with the same statistics forward used.
std::pair<Tensor, Tensor> bn_inverse(const Tensor& y, BNBijection& bij, bool training);

// Exact log-density via the inverse (normalizing) pass x -> z0. conds holds
// one [B, C] tensor per coupling. Returns [B].
Tensor flow_log_prob(const Tensor& x, const std::vector<Tensor>& conds, FlowStack& stack,
                     bool training);

// n samples pushed through the generative direction; conds rows must be 1
// (tiled) or n. Tape-free.
Tensor flow_sample(Rng& rng, const std::vector<Tensor>& conds, FlowStack& stack, std::size_t n);

}  // namespace manf
