#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "manf/tensor.hpp"

namespace manf {

// Per-encoder-layer half-window sizes, nondecreasing with depth.
struct ScaleSet {
    std::vector<std::size_t> half_windows;

    // Default scale set for a context of length L: [ceil(L/3), ceil(L/2), L].
    static ScaleSet defaults(std::size_t context_len, std::size_t layers = 3);
    void validate() const;
};

// Relative position machinery for one encoder layer: fixed sinusoidal base
// table over signed offsets, a learnable projection, and per-scale per-head
// content/position biases.
struct RelPosEncoding {
    Tensor base_table;       // [P, d], row p encodes offset p - max_offset
    Tensor w_r;              // [d, d] learnable
    Tensor u;                // [H, m] learnable content bias
    Tensor v;                // [H, m] learnable position bias
    std::size_t max_offset = 0;

    static RelPosEncoding init(std::size_t d, std::size_t heads, std::size_t max_offset, Rng& rng);
    std::vector<Tensor*> params();
};

struct AttentionLayerParams {
    Tensor w_q, w_k, w_v, w_o;                  // [d, d], heads packed along columns
    Tensor w_pos;                               // [H, m, m], shared key/position transform;
                                                // empty for layers without relative positions
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;      // position-wise feed-forward
    Tensor ln_gamma, ln_beta;                   // [d]
    std::size_t heads = 1;

    static AttentionLayerParams init(std::size_t d, std::size_t heads, std::size_t ffn_dim,
                                     Rng& rng, bool with_pos = true);
    std::vector<Tensor*> params();
};

struct AttnOptions {
    bool softmax_normalize = true;  // raw_scores=false: per-window softmax per head
    bool scale_scores = true;       // divide scores by sqrt(m)
    double dropout = 0.0;
    Rng* rng = nullptr;
    bool training = false;
};

// Boundary-clamped window [max(0, i-theta), min(T-1, i+theta)] as inclusive
// index bounds.
std::pair<std::size_t, std::size_t> window_bounds(std::size_t seq_len, std::size_t i,
                                                  std::size_t theta);
// Window slice of a [T, d] sequence.
Tensor window(const Tensor& x, std::size_t i, std::size_t theta);

// Reference score computation for one query against its window:
// score_j = (q + u)^T W_k k_j + (q + v)^T W_k R_{offset_j}, optionally / sqrt(m).
// k_rows/r_rows are row-major [n, m]; w_k is row-major [m, m].
std::vector<double> rel_scores(const std::vector<double>& q, const std::vector<double>& k_rows,
                               const std::vector<double>& r_rows, const std::vector<double>& u,
                               const std::vector<double>& v, const std::vector<double>& w_k,
                               std::size_t m, bool scale);

// Fused windowed attention core. q, k: [B, H, T, m] (k already carries the
// W_k transform), values: [B, H, T, mv], rel: [H, P, m] (already projected),
// u/v: [H, m]. Output [B, H, T, mv].
Tensor rel_window_attention(const Tensor& q, const Tensor& k, const Tensor& values,
                            const Tensor& rel, const Tensor& u, const Tensor& v,
                            std::size_t theta, bool scale, bool softmax_normalize);

// Eq.-6-style multi-scale attention over a [T, d] or [B, T, d] sequence,
// heads concatenated and output-projected.
Tensor multi_scale_attention(const Tensor& h_in, std::size_t theta,
                             AttentionLayerParams& params, RelPosEncoding& relpos,
                             const AttnOptions& opts = {});

// O = LayerNorm(H + ReLU(A(H, theta))); out = FFN(O).
Tensor ms_transformer_layer(const Tensor& h_in, std::size_t theta, AttentionLayerParams& params,
                            RelPosEncoding& relpos, const AttnOptions& opts = {});

// Stacked multi-scale layers with increasing scales.
Tensor encoder_forward(const Tensor& s, const ScaleSet& scales,
                       std::vector<AttentionLayerParams>& layers,
                       std::vector<RelPosEncoding>& relpos, const AttnOptions& opts = {});

// Vanilla sinusoidal position encoding, [len, d].
Tensor sinusoidal_pe(std::size_t len, std::size_t d);

// Cross-attention decoder layer: queries = h_dec (+ pe when given), keys and
// values from h_enc; residual/LayerNorm/FFN in the Eq.-7 arrangement.
Tensor cross_attention_layer(const Tensor& h_dec, const Tensor& h_enc, const Tensor& pe,
                             bool use_pe, AttentionLayerParams& params,
                             const AttnOptions& opts = {});

}  // namespace manf
