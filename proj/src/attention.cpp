#include "manf/attention.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace manf {

namespace {

// Xavier-uniform weight init.
Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng, Shape shape) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t = Tensor::rand_uniform(shape, rng, -limit, limit);
    t.set_requires_grad(true);
    return t;
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    // [B, T, d] -> [B, H, T, m]
    const std::size_t b = x.extent(0);
    const std::size_t t = x.extent(1);
    const std::size_t d = x.extent(2);
    return permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
    // [B, H, T, m] -> [B, T, d]
    const std::size_t b = x.extent(0);
    const std::size_t h = x.extent(1);
    const std::size_t t = x.extent(2);
    const std::size_t m = x.extent(3);
    return reshape(permute(x, {0, 2, 1, 3}), {b, t, h * m});
}

Tensor ffn(const Tensor& x, AttentionLayerParams& p, const AttnOptions& opts) {
    Tensor hidden = relu(add(matmul(x, p.ffn_w1), p.ffn_b1));
    if (opts.dropout > 0.0 && opts.rng) {
        hidden = dropout(hidden, opts.dropout, *opts.rng, opts.training);
    }
    return add(matmul(hidden, p.ffn_w2), p.ffn_b2);
}

}  // namespace

ScaleSet ScaleSet::defaults(std::size_t context_len, std::size_t layers) {
    ScaleSet s;
    if (layers == 3) {
        s.half_windows = {(context_len + 2) / 3, (context_len + 1) / 2, context_len};
    } else {
        // Evenly interpolate from L/3 to L for other depths.
        for (std::size_t i = 0; i < layers; ++i) {
            const double frac = layers == 1 ? 1.0
                                            : 1.0 / 3.0 + (2.0 / 3.0) * static_cast<double>(i) /
                                                              static_cast<double>(layers - 1);
            s.half_windows.push_back(static_cast<std::size_t>(
                std::ceil(frac * static_cast<double>(context_len))));
        }
    }
    return s;
}

void ScaleSet::validate() const {
    if (half_windows.empty()) throw ContractError("scale set is empty");
    for (std::size_t i = 0; i + 1 < half_windows.size(); ++i) {
        if (half_windows[i] > half_windows[i + 1]) {
            throw ContractError("scale set must be nondecreasing");
        }
    }
    for (auto w : half_windows) {
        if (w == 0) throw ContractError("scale must be positive");
    }
}

RelPosEncoding RelPosEncoding::init(std::size_t d, std::size_t heads, std::size_t max_offset,
                                    Rng& rng) {
    RelPosEncoding r;
    r.max_offset = max_offset;
    const std::size_t p = 2 * max_offset + 1;
    std::vector<double> table(p * d);
    for (std::size_t row = 0; row < p; ++row) {
        const double offset =
            static_cast<double>(row) - static_cast<double>(max_offset);  // signed offset
        for (std::size_t j = 0; j < d; ++j) {
            const double rate = std::pow(10000.0, -2.0 * std::floor(j / 2.0) / d);
            table[row * d + j] = (j % 2 == 0) ? std::sin(offset * rate) : std::cos(offset * rate);
        }
    }
    r.base_table = Tensor::from_vector({p, d}, std::move(table));
    r.w_r = glorot(d, d, rng, {d, d});
    const std::size_t m = d / heads;
    r.u = Tensor::zeros({heads, m}).set_requires_grad(true);
    r.v = Tensor::zeros({heads, m}).set_requires_grad(true);
    return r;
}

std::vector<Tensor*> RelPosEncoding::params() { return {&w_r, &u, &v}; }

AttentionLayerParams AttentionLayerParams::init(std::size_t d, std::size_t heads,
                                                std::size_t ffn_dim, Rng& rng, bool with_pos) {
    if (d % heads != 0) throw ContractError("hidden_dim must be divisible by heads");
    if (ffn_dim < d) throw ContractError("ffn inner dim must be >= hidden_dim");
    AttentionLayerParams p;
    p.heads = heads;
    const std::size_t m = d / heads;
    p.w_q = glorot(d, d, rng, {d, d});
    p.w_k = glorot(d, d, rng, {d, d});
    p.w_v = glorot(d, d, rng, {d, d});
    p.w_o = glorot(d, d, rng, {d, d});
    if (with_pos) p.w_pos = glorot(m, m, rng, {heads, m, m});
    p.ffn_w1 = glorot(d, ffn_dim, rng, {d, ffn_dim});
    p.ffn_b1 = Tensor::zeros({ffn_dim}).set_requires_grad(true);
    p.ffn_w2 = glorot(ffn_dim, d, rng, {ffn_dim, d});
    p.ffn_b2 = Tensor::zeros({d}).set_requires_grad(true);
    p.ln_gamma = Tensor::ones({d}).set_requires_grad(true);
    p.ln_beta = Tensor::zeros({d}).set_requires_grad(true);
    return p;
}

std::vector<Tensor*> AttentionLayerParams::params() {
    std::vector<Tensor*> out{&w_q, &w_k, &w_v, &w_o};
    if (w_pos.defined()) out.push_back(&w_pos);
    out.insert(out.end(), {&ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2, &ln_gamma, &ln_beta});
    return out;
}

std::pair<std::size_t, std::size_t> window_bounds(std::size_t seq_len, std::size_t i,
                                                  std::size_t theta) {
    if (i >= seq_len) {
        throw IndexError("window index " + std::to_string(i) + " out of range for length " +
                         std::to_string(seq_len));
    }
    const std::size_t lo = i > theta ? i - theta : 0;
    const std::size_t hi = std::min(seq_len - 1, i + theta);
    return {lo, hi};
}

Tensor window(const Tensor& x, std::size_t i, std::size_t theta) {
    if (x.ndim() != 2) throw ShapeError("window expects a [T, d] sequence");
    auto [lo, hi] = window_bounds(x.extent(0), i, theta);
    return slice(x, 0, lo, hi - lo + 1);
}

std::vector<double> rel_scores(const std::vector<double>& q, const std::vector<double>& k_rows,
                               const std::vector<double>& r_rows, const std::vector<double>& u,
                               const std::vector<double>& v, const std::vector<double>& w_k,
                               std::size_t m, bool scale) {
    const std::size_t n = k_rows.size() / m;
    std::vector<double> scores(n, 0.0);
    const double denom = scale ? 1.0 / std::sqrt(static_cast<double>(m)) : 1.0;
    for (std::size_t j = 0; j < n; ++j) {
        double content = 0.0;
        double position = 0.0;
        for (std::size_t a = 0; a < m; ++a) {
            double wk_kj = 0.0;
            double wk_rj = 0.0;
            for (std::size_t b = 0; b < m; ++b) {
                wk_kj += w_k[a * m + b] * k_rows[j * m + b];
                wk_rj += w_k[a * m + b] * r_rows[j * m + b];
            }
            content += (q[a] + u[a]) * wk_kj;
            position += (q[a] + v[a]) * wk_rj;
        }
        scores[j] = (content + position) * denom;
    }
    return scores;
}

Tensor rel_window_attention(const Tensor& q, const Tensor& k, const Tensor& values,
                            const Tensor& rel, const Tensor& u, const Tensor& v,
                            std::size_t theta, bool scale, bool softmax_normalize) {
    if (q.ndim() != 4 || k.ndim() != 4 || values.ndim() != 4 || rel.ndim() != 3) {
        throw ShapeError("rel_window_attention: rank mismatch");
    }
    const std::size_t nb = q.extent(0);
    const std::size_t nh = q.extent(1);
    const std::size_t t = q.extent(2);
    const std::size_t m = q.extent(3);
    const std::size_t mv = values.extent(3);
    const std::size_t p = rel.extent(1);
    if (k.extent(2) != t || values.extent(2) != t) {
        throw ShapeError("rel_window_attention: sequence length mismatch");
    }
    const std::size_t max_off = (p - 1) / 2;
    if (t > 0 && t - 1 > max_off) {
        throw IndexError("relative offset " + std::to_string(t - 1) +
                         " exceeds position table of half-size " + std::to_string(max_off));
    }
    const double denom = scale ? 1.0 / std::sqrt(static_cast<double>(m)) : 1.0;

    // Dense weights [B, H, T, T], zero outside the window; reused by backward.
    auto weights = std::make_shared<std::vector<double>>(nb * nh * t * t, 0.0);
    std::vector<double> out(nb * nh * t * mv, 0.0);

    const double* pq = q.data();
    const double* pk = k.data();
    const double* pv = values.data();
    const double* pr = rel.data();
    const double* pu = u.data();
    const double* pvv = v.data();

    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t h = 0; h < nh; ++h) {
            const double* qm = pq + (b * nh + h) * t * m;
            const double* km = pk + (b * nh + h) * t * m;
            const double* vm = pv + (b * nh + h) * t * mv;
            const double* rm = pr + h * p * m;
            const double* uh = pu + h * m;
            const double* vh = pvv + h * m;
            double* wm = weights->data() + (b * nh + h) * t * t;
            double* om = out.data() + (b * nh + h) * t * mv;
            for (std::size_t i = 0; i < t; ++i) {
                auto [lo, hi] = window_bounds(t, i, theta);
                double* wrow = wm + i * t;
                double mx = -1e300;
                for (std::size_t j = lo; j <= hi; ++j) {
                    const double* kj = km + j * m;
                    const double* rj = rm + (max_off + i - j) * m;
                    const double* qi = qm + i * m;
                    double s = 0.0;
                    for (std::size_t a = 0; a < m; ++a) {
                        s += (qi[a] + uh[a]) * kj[a] + (qi[a] + vh[a]) * rj[a];
                    }
                    s *= denom;
                    wrow[j] = s;
                    mx = std::max(mx, s);
                }
                if (softmax_normalize) {
                    double z = 0.0;
                    for (std::size_t j = lo; j <= hi; ++j) {
                        wrow[j] = std::exp(wrow[j] - mx);
                        z += wrow[j];
                    }
                    for (std::size_t j = lo; j <= hi; ++j) wrow[j] /= z;
                }
                double* orow = om + i * mv;
                for (std::size_t j = lo; j <= hi; ++j) {
                    const double w = wrow[j];
                    const double* vj = vm + j * mv;
                    for (std::size_t c = 0; c < mv; ++c) orow[c] += w * vj[c];
                }
            }
        }
    }

    auto qi_ = q.impl();
    auto ki_ = k.impl();
    auto vi_ = values.impl();
    auto ri_ = rel.impl();
    auto ui_ = u.impl();
    auto bi_ = v.impl();
    Tensor qv = q;
    Tensor kv = k;
    Tensor vv = values;
    Tensor rv = rel;
    Tensor uv = u;
    Tensor vbv = v;
    return make_op(
        {nb, nh, t, mv}, std::move(out), {q, k, values, rel, u, v},
        [=](detail::TensorImpl& self) {
            auto ensure = [](const std::shared_ptr<detail::TensorImpl>& node) {
                if (node->requires_grad) node->ensure_grad();
            };
            ensure(qi_);
            ensure(ki_);
            ensure(vi_);
            ensure(ri_);
            ensure(ui_);
            ensure(bi_);
            std::vector<double> ds(t);  // score grads for one (b, h, i)
            for (std::size_t b = 0; b < nb; ++b) {
                for (std::size_t h = 0; h < nh; ++h) {
                    const double* qm = qv.data() + (b * nh + h) * t * m;
                    const double* km = kv.data() + (b * nh + h) * t * m;
                    const double* vm = vv.data() + (b * nh + h) * t * mv;
                    const double* rm = rv.data() + h * p * m;
                    const double* uh = uv.data() + h * m;
                    const double* vh = vbv.data() + h * m;
                    const double* wm = weights->data() + (b * nh + h) * t * t;
                    const double* gm = self.grad.data() + (b * nh + h) * t * mv;
                    double* gq = qi_->requires_grad ? qi_->grad.data() + (b * nh + h) * t * m
                                                    : nullptr;
                    double* gk = ki_->requires_grad ? ki_->grad.data() + (b * nh + h) * t * m
                                                    : nullptr;
                    double* gv = vi_->requires_grad ? vi_->grad.data() + (b * nh + h) * t * mv
                                                    : nullptr;
                    double* gr = ri_->requires_grad ? ri_->grad.data() + h * p * m : nullptr;
                    double* gu = ui_->requires_grad ? ui_->grad.data() + h * m : nullptr;
                    double* gvb = bi_->requires_grad ? bi_->grad.data() + h * m : nullptr;
                    for (std::size_t i = 0; i < t; ++i) {
                        auto [lo, hi] = window_bounds(t, i, theta);
                        const double* wrow = wm + i * t;
                        const double* grow = gm + i * mv;
                        // dL/dw_ij and value grads
                        double wdot = 0.0;
                        for (std::size_t j = lo; j <= hi; ++j) {
                            const double* vj = vm + j * mv;
                            double dw = 0.0;
                            for (std::size_t c = 0; c < mv; ++c) dw += grow[c] * vj[c];
                            ds[j] = dw;
                            wdot += wrow[j] * dw;
                            if (gv) {
                                double* gvj = gv + j * mv;
                                const double w = wrow[j];
                                for (std::size_t c = 0; c < mv; ++c) gvj[c] += w * grow[c];
                            }
                        }
                        for (std::size_t j = lo; j <= hi; ++j) {
                            const double d = softmax_normalize ? wrow[j] * (ds[j] - wdot) : ds[j];
                            ds[j] = d * denom;
                        }
                        const double* qi_row = qm + i * m;
                        for (std::size_t j = lo; j <= hi; ++j) {
                            const double d = ds[j];
                            if (d == 0.0) continue;
                            const double* kj = km + j * m;
                            const double* rj = rm + (max_off + i - j) * m;
                            if (gq) {
                                double* gqi = gq + i * m;
                                for (std::size_t a = 0; a < m; ++a) gqi[a] += d * (kj[a] + rj[a]);
                            }
                            if (gk) {
                                double* gkj = gk + j * m;
                                for (std::size_t a = 0; a < m; ++a) {
                                    gkj[a] += d * (qi_row[a] + uh[a]);
                                }
                            }
                            if (gr) {
                                double* grj = gr + (max_off + i - j) * m;
                                for (std::size_t a = 0; a < m; ++a) {
                                    grj[a] += d * (qi_row[a] + vh[a]);
                                }
                            }
                            if (gu) {
                                for (std::size_t a = 0; a < m; ++a) gu[a] += d * kj[a];
                            }
                            if (gvb) {
                                for (std::size_t a = 0; a < m; ++a) gvb[a] += d * rj[a];
                            }
                        }
                    }
                }
            }
        });
}

Tensor multi_scale_attention(const Tensor& h_in, std::size_t theta,
                             AttentionLayerParams& params, RelPosEncoding& relpos,
                             const AttnOptions& opts) {
    const bool batched = h_in.ndim() == 3;
    Tensor x = batched ? h_in : reshape(h_in, {1, h_in.extent(0), h_in.extent(1)});
    const std::size_t d = x.extent(2);
    const std::size_t heads = params.heads;
    if (d % heads != 0) throw ShapeError("head count must divide hidden dim");
    const std::size_t m = d / heads;

    Tensor q = split_heads(matmul(x, params.w_q), heads);
    Tensor k = split_heads(matmul(x, params.w_k), heads);
    Tensor v = split_heads(matmul(x, params.w_v), heads);
    Tensor kp = matmul(k, params.w_pos);  // [B,H,T,m] x [H,m,m]

    const std::size_t p = relpos.base_table.extent(0);
    Tensor r = matmul(relpos.base_table, relpos.w_r);            // [P, d]
    r = permute(reshape(r, {p, heads, m}), {1, 0, 2});           // [H, P, m]
    Tensor rp = matmul(r, params.w_pos);                         // [H, P, m]

    Tensor ctx = rel_window_attention(q, kp, v, rp, relpos.u, relpos.v, theta,
                                      opts.scale_scores, opts.softmax_normalize);
    Tensor out = matmul(merge_heads(ctx), params.w_o);
    return batched ? out : reshape(out, {out.extent(1), out.extent(2)});
}

Tensor ms_transformer_layer(const Tensor& h_in, std::size_t theta, AttentionLayerParams& params,
                            RelPosEncoding& relpos, const AttnOptions& opts) {
    Tensor a = multi_scale_attention(h_in, theta, params, relpos, opts);
    if (opts.dropout > 0.0 && opts.rng) a = dropout(a, opts.dropout, *opts.rng, opts.training);
    Tensor o = layer_norm(add(h_in, relu(a)), params.ln_gamma, params.ln_beta);
    return ffn(o, params, opts);
}

Tensor encoder_forward(const Tensor& s, const ScaleSet& scales,
                       std::vector<AttentionLayerParams>& layers,
                       std::vector<RelPosEncoding>& relpos, const AttnOptions& opts) {
    scales.validate();
    if (layers.size() != scales.half_windows.size() || relpos.size() != layers.size()) {
        throw ContractError("encoder depth must match scale set length");
    }
    Tensor h = s;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = ms_transformer_layer(h, scales.half_windows[i], layers[i], relpos[i], opts);
    }
    return h;
}

Tensor sinusoidal_pe(std::size_t len, std::size_t d) {
    std::vector<double> table(len * d);
    for (std::size_t pos = 0; pos < len; ++pos) {
        for (std::size_t j = 0; j < d; ++j) {
            const double rate = std::pow(10000.0, -2.0 * std::floor(j / 2.0) / d);
            table[pos * d + j] = (j % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
        }
    }
    return Tensor::from_vector({len, d}, std::move(table));
}

Tensor cross_attention_layer(const Tensor& h_dec, const Tensor& h_enc, const Tensor& pe,
                             bool use_pe, AttentionLayerParams& params, const AttnOptions& opts) {
    const bool batched = h_dec.ndim() == 3;
    Tensor xq = batched ? h_dec : reshape(h_dec, {1, h_dec.extent(0), h_dec.extent(1)});
    Tensor xm = h_enc.ndim() == 3 ? h_enc : reshape(h_enc, {1, h_enc.extent(0), h_enc.extent(1)});
    if (use_pe) xq = add(xq, pe);  // pe broadcasts over the batch dim
    const std::size_t d = xq.extent(2);
    const std::size_t heads = params.heads;
    const std::size_t m = d / heads;

    Tensor q = split_heads(matmul(xq, params.w_q), heads);
    Tensor k = split_heads(matmul(xm, params.w_k), heads);
    Tensor v = split_heads(matmul(xm, params.w_v), heads);
    Tensor scores = mul_scalar(matmul(q, permute(k, {0, 1, 3, 2})),
                               1.0 / std::sqrt(static_cast<double>(m)));
    Tensor w = softmax(scores, 3);
    Tensor ctx = matmul(w, v);
    Tensor a = matmul(merge_heads(ctx), params.w_o);
    if (opts.dropout > 0.0 && opts.rng) a = dropout(a, opts.dropout, *opts.rng, opts.training);
    Tensor o = layer_norm(add(xq, relu(a)), params.ln_gamma, params.ln_beta);
    Tensor out = ffn(o, params, opts);
    return batched ? out : reshape(out, {out.extent(1), out.extent(2)});
}

}  // namespace manf
