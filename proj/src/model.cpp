#include "manf/model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace manf {

std::vector<std::size_t> ManfConfig::resolved_scales() const {
    if (!scales.empty()) return scales;
    return ScaleSet::defaults(context_len, enc_layers).half_windows;
}

void ManfConfig::validate() const {
    if (dims == 0) throw ContractError("config: dims must be >= 1");
    if (horizon == 0) throw ContractError("config: horizon must be >= 1");
    if (context_len == 0) throw ContractError("config: context_len must be >= 1");
    if (cov_dim == 0) throw ContractError("config: cov_dim must be >= 1");
    if (heads == 0 || hidden_dim % heads != 0) {
        throw ContractError("config: hidden_dim must be divisible by heads");
    }
    if (enc_layers == 0 || dec_layers == 0) throw ContractError("config: need >= 1 layer");
    if (!scales.empty() && scales.size() != enc_layers) {
        throw ContractError("config: scale set length must equal enc_layers");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ContractError("config: dropout must lie in [0, 1)");
    if (scale_clamp < 0.0) throw ContractError("config: scale_clamp must be >= 0");
    if (flow_hidden == 0) throw ContractError("config: flow_hidden must be >= 1");
}

std::string ManfConfig::to_json() const {
    nlohmann::ordered_json j;
    j["dims"] = dims;
    j["horizon"] = horizon;
    j["context_len"] = context_len;
    j["cov_dim"] = cov_dim;
    j["hidden_dim"] = hidden_dim;
    j["heads"] = heads;
    j["enc_layers"] = enc_layers;
    j["dec_layers"] = dec_layers;
    j["cond_dim"] = cond_dim;
    j["flow_hidden"] = flow_hidden;
    j["ffn_dim"] = ffn_dim;
    j["dropout"] = dropout;
    j["scale_clamp"] = scale_clamp;
    j["conditioning"] = conditioning == Conditioning::Coupling ? "coupling" : "elementwise";
    j["scales"] = scales;
    j["seed"] = seed;
    return j.dump(2);
}

ManfConfig ManfConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    static const char* known[] = {"dims",      "horizon",  "context_len", "cov_dim",
                                  "hidden_dim", "heads",    "enc_layers",  "dec_layers",
                                  "cond_dim",   "flow_hidden", "ffn_dim",  "dropout",
                                  "scale_clamp", "conditioning", "scales", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return it.key() == k; }) == std::end(known)) {
            throw FormatError("model config: unknown key '" + it.key() + "'");
        }
    }
    ManfConfig cfg;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("dims", cfg.dims);
    get("horizon", cfg.horizon);
    get("context_len", cfg.context_len);
    get("cov_dim", cfg.cov_dim);
    get("hidden_dim", cfg.hidden_dim);
    get("heads", cfg.heads);
    get("enc_layers", cfg.enc_layers);
    get("dec_layers", cfg.dec_layers);
    get("cond_dim", cfg.cond_dim);
    get("flow_hidden", cfg.flow_hidden);
    get("ffn_dim", cfg.ffn_dim);
    get("dropout", cfg.dropout);
    get("scale_clamp", cfg.scale_clamp);
    get("scales", cfg.scales);
    get("seed", cfg.seed);
    if (j.contains("conditioning")) {
        const std::string mode = j.at("conditioning").get<std::string>();
        if (mode == "coupling") {
            cfg.conditioning = Conditioning::Coupling;
        } else if (mode == "elementwise") {
            cfg.conditioning = Conditioning::Elementwise;
        } else {
            throw FormatError("model config: conditioning must be coupling|elementwise");
        }
    }
    cfg.validate();
    return cfg;
}

namespace {

Tensor glorot_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double s = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    return Tensor::randn({fan_in, fan_out}, rng, s).set_requires_grad(true);
}

}  // namespace

ManfModel ManfModel::init(const ManfConfig& cfg) {
    cfg.validate();
    ManfModel m;
    m.cfg = cfg;
    m.scales.half_windows = cfg.resolved_scales();
    m.scales.validate();

    Rng rng(cfg.seed);
    const std::size_t h = cfg.hidden_dim;
    m.embed_w = glorot_init(cfg.dims + cfg.cov_dim, h, rng);
    m.embed_b = Tensor::zeros({h}).set_requires_grad(true);
    m.dec_embed_w = glorot_init(cfg.cov_dim, h, rng);
    m.dec_embed_b = Tensor::zeros({h}).set_requires_grad(true);
    for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
        m.enc_layers.push_back(
            AttentionLayerParams::init(h, cfg.heads, cfg.resolved_ffn_dim(), rng));
        m.enc_relpos.push_back(RelPosEncoding::init(h, cfg.heads, cfg.context_len, rng));
    }
    for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
        m.dec_layers.push_back(
            AttentionLayerParams::init(h, cfg.heads, cfg.resolved_ffn_dim(), rng, false));
        m.cond_w.push_back(glorot_init(h, cfg.resolved_cond_dim(), rng));
        m.cond_b.push_back(Tensor::zeros({cfg.resolved_cond_dim()}).set_requires_grad(true));
    }
    m.flow = FlowStack::init(cfg.dims, cfg.resolved_cond_dim(), cfg.dec_layers,
                             cfg.conditioning, rng, true, cfg.flow_hidden, cfg.scale_clamp);
    return m;
}

std::vector<Tensor*> ManfModel::params() {
    std::vector<Tensor*> out;
    for (auto& [name, p] : named_params()) out.push_back(p);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> ManfModel::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("embed.w", &embed_w);
    out.emplace_back("embed.b", &embed_b);
    out.emplace_back("dec_embed.w", &dec_embed_w);
    out.emplace_back("dec_embed.b", &dec_embed_b);
    static const char* attn_names[] = {"w_q",    "w_k",    "w_v",    "w_o",    "w_pos", "ffn_w1",
                                       "ffn_b1", "ffn_w2", "ffn_b2", "ln_gamma", "ln_beta"};
    static const char* dec_names[] = {"w_q",    "w_k",    "w_v",    "w_o",      "ffn_w1",
                                      "ffn_b1", "ffn_w2", "ffn_b2", "ln_gamma", "ln_beta"};
    static const char* rel_names[] = {"w_r", "u", "v"};
    static const char* net_names[] = {"w1", "b1", "w2", "b2"};
    for (std::size_t i = 0; i < enc_layers.size(); ++i) {
        auto ps = enc_layers[i].params();
        for (std::size_t j = 0; j < ps.size(); ++j) {
            out.emplace_back("enc." + std::to_string(i) + "." + attn_names[j], ps[j]);
        }
        auto rs = enc_relpos[i].params();
        for (std::size_t j = 0; j < rs.size(); ++j) {
            out.emplace_back("enc." + std::to_string(i) + ".rel." + rel_names[j], rs[j]);
        }
    }
    for (std::size_t i = 0; i < dec_layers.size(); ++i) {
        auto ps = dec_layers[i].params();
        for (std::size_t j = 0; j < ps.size(); ++j) {
            out.emplace_back("dec." + std::to_string(i) + "." + dec_names[j], ps[j]);
        }
        out.emplace_back("cond." + std::to_string(i) + ".w", &cond_w[i]);
        out.emplace_back("cond." + std::to_string(i) + ".b", &cond_b[i]);
    }
    for (std::size_t i = 0; i < flow.couplings.size(); ++i) {
        auto& c = flow.couplings[i];
        MlpNet* nets[] = {&c.s_net, &c.t_net};
        const char* net_tag[] = {"s", "t"};
        for (int k = 0; k < 2; ++k) {
            auto ps = nets[k]->params();
            for (std::size_t j = 0; j < ps.size(); ++j) {
                out.emplace_back("flow." + std::to_string(i) + "." + net_tag[k] + "." +
                                     net_names[j],
                                 ps[j]);
            }
        }
    }
    for (std::size_t i = 0; i < flow.bns.size(); ++i) {
        out.emplace_back("flow.bn." + std::to_string(i) + ".gamma", &flow.bns[i].gamma);
        out.emplace_back("flow.bn." + std::to_string(i) + ".beta", &flow.bns[i].beta);
    }
    return out;
}

std::vector<std::pair<std::string, std::vector<double>*>> ManfModel::named_state() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    for (std::size_t i = 0; i < flow.bns.size(); ++i) {
        const std::string base = "flow.bn." + std::to_string(i) + ".";
        out.emplace_back(base + "running_mean", &flow.bns[i].running_mean);
        out.emplace_back(base + "running_var", &flow.bns[i].running_var);
        out.emplace_back(base + "batch_mean", &flow.bns[i].batch_mean);
        out.emplace_back(base + "batch_var", &flow.bns[i].batch_var);
    }
    return out;
}

Tensor ManfModel::embed_inputs(const Tensor& values, const Tensor& covs) const {
    if (values.ndim() != covs.ndim() ||
        values.extent(values.ndim() - 1) != cfg.dims ||
        covs.extent(covs.ndim() - 1) != cfg.cov_dim) {
        throw ShapeError("embed_inputs: values " + shape_str(values.shape()) + " covariates " +
                         shape_str(covs.shape()) + " incompatible with D=" +
                         std::to_string(cfg.dims) + ", C=" + std::to_string(cfg.cov_dim));
    }
    Tensor joined = concat({values, covs}, values.ndim() - 1);
    return matmul(joined, embed_w) + embed_b;
}

Tensor ManfModel::encode(const Tensor& values, const Tensor& covs, const AttnOptions& opts) {
    ++encoder_calls;
    Tensor h = embed_inputs(values, covs);
    return encoder_forward(h, scales, enc_layers, enc_relpos, opts);
}

std::vector<Tensor> ManfModel::decode(const Tensor& future_covs, const Tensor& h_enc,
                                      const AttnOptions& opts, const Tensor* pe_override) {
    ++decoder_calls;
    Tensor q = matmul(future_covs, dec_embed_w) + dec_embed_b;
    const std::size_t k = q.extent(q.ndim() - 2);
    Tensor pe = pe_override ? *pe_override : sinusoidal_pe(k, cfg.hidden_dim);
    std::vector<Tensor> states;
    Tensor h = cross_attention_layer(q, h_enc, pe, true, dec_layers[0], opts);
    states.push_back(h);
    for (std::size_t i = 1; i < dec_layers.size(); ++i) {
        h = cross_attention_layer(h, h_enc, pe, false, dec_layers[i], opts);
        states.push_back(h);
    }
    return states;
}

Tensor ManfModel::nll(const WindowBatch& batch, bool training, Rng* rng) {
    if (batch.dims != cfg.dims || batch.cov_dim != cfg.cov_dim ||
        batch.context_len != cfg.context_len || batch.horizon != cfg.horizon) {
        throw DataMismatchError("batch geometry does not match the model config");
    }
    AttnOptions opts;
    opts.training = training;
    opts.dropout = training ? cfg.dropout : 0.0;
    opts.rng = rng;
    if (training && cfg.dropout > 0.0 && !rng) {
        throw ContractError("nll: training with dropout needs an rng");
    }
    Tensor h_enc = encode(batch.context, batch.context_covs, opts);
    auto states = decode(batch.future_covs, h_enc, opts);
    const std::size_t b = batch.batch;
    const std::size_t k = cfg.horizon;
    std::vector<Tensor> conds;
    for (std::size_t i = 0; i < states.size(); ++i) {
        Tensor c = matmul(states[i], cond_w[i]) + cond_b[i];
        conds.push_back(reshape(c, {b * k, cfg.resolved_cond_dim()}));
    }
    Tensor x = reshape(batch.future, {b * k, cfg.dims});
    Tensor lp = flow_log_prob(x, conds, flow, training);
    return mul_scalar(neg(sum(lp)), 1.0 / static_cast<double>(b));
}

namespace {

Tensor tile_rows(const Tensor& rows, std::size_t reps) {
    // [k, c] -> [reps * k, c], the k rows repeated reps times in order
    const std::size_t k = rows.extent(0);
    const std::size_t c = rows.extent(1);
    std::vector<double> out;
    out.reserve(reps * k * c);
    for (std::size_t r = 0; r < reps; ++r) {
        out.insert(out.end(), rows.data(), rows.data() + rows.size());
    }
    return Tensor::from_vector({reps * k, c}, std::move(out));
}

}  // namespace

ForecastSamples ManfModel::forecast_window(const WindowBatch& batch, std::size_t index,
                                           std::size_t n, Rng& rng) {
    if (n == 0) throw ContractError("forecast: need n >= 1 samples");
    if (index >= batch.batch) throw IndexError("forecast: window index out of range");
    NoGradGuard guard;
    Tensor ctx = slice(batch.context, 0, index, 1);
    Tensor ctx_cov = slice(batch.context_covs, 0, index, 1);
    Tensor fut_cov = slice(batch.future_covs, 0, index, 1);

    Tensor h_enc = encode(ctx, ctx_cov, {});
    auto states = decode(fut_cov, h_enc, {});
    const std::size_t k = batch.horizon;
    std::vector<Tensor> conds;
    for (std::size_t i = 0; i < states.size(); ++i) {
        Tensor c = matmul(states[i], cond_w[i]) + cond_b[i];
        conds.push_back(tile_rows(reshape(c, {k, cfg.resolved_cond_dim()}), n));
    }
    Tensor flat = flow_sample(rng, conds, flow, n * k);
    flow_draws += n;
    Tensor samples = reshape(flat, {n, k, cfg.dims});

    ForecastSamples out;
    out.means.assign(batch.means.data() + index * cfg.dims,
                     batch.means.data() + (index + 1) * cfg.dims);
    std::vector<double> scaled(samples.data(), samples.data() + samples.size());
    unscale_by_means(scaled.data(), n * k, cfg.dims, out.means);
    out.samples = Tensor::from_vector({n, k, cfg.dims}, std::move(scaled));
    if (!out.samples.all_finite()) throw NumericError("forecast produced non-finite samples");
    return out;
}

ForecastSamples ManfModel::forecast(const SeriesFrame& history, std::size_t n, Rng& rng) {
    if (history.steps < cfg.context_len) {
        throw CoverageError("history of " + std::to_string(history.steps) +
                            " steps is shorter than the context length");
    }
    if (history.dims != cfg.dims) {
        throw DataMismatchError("history has " + std::to_string(history.dims) +
                                " series, model expects " + std::to_string(cfg.dims));
    }
    // synthesize a window whose future lies beyond the end of the frame
    const std::size_t s = history.steps - cfg.context_len;
    const std::size_t d = cfg.dims;
    const std::size_t nf = freq_feature_count(history.freq);
    if (nf + 1 != cfg.cov_dim) {
        throw DataMismatchError("frame frequency implies " + std::to_string(nf + 1) +
                                " covariate channels, model expects " +
                                std::to_string(cfg.cov_dim));
    }
    WindowBatch w;
    w.batch = 1;
    w.context_len = cfg.context_len;
    w.horizon = cfg.horizon;
    w.dims = d;
    w.cov_dim = cfg.cov_dim;
    w.starts = {s};

    std::vector<double> cvals(history.values.begin() + s * d, history.values.end());
    const std::uint8_t* cmask = history.observed.data() + s * d;
    auto means = observed_means(cvals.data(), cmask, cfg.context_len, d);
    scale_by_means(cvals.data(), cfg.context_len, d, means);
    for (std::size_t t = 0; t < cfg.context_len; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            if (!cmask[t * d + j]) cvals[t * d + j] = 0.0;
        }
    }
    auto cf = time_features(history, s, cfg.context_len);
    auto ff = time_features(history, history.steps, cfg.horizon);
    std::vector<double> ctx_cov(cfg.context_len * cfg.cov_dim), fut_cov(cfg.horizon * cfg.cov_dim);
    for (std::size_t t = 0; t < cfg.context_len; ++t) {
        std::copy(cf.begin() + t * nf, cf.begin() + (t + 1) * nf,
                  ctx_cov.begin() + t * cfg.cov_dim);
        std::size_t seen = 0;
        for (std::size_t j = 0; j < d; ++j) seen += cmask[t * d + j] ? 1 : 0;
        ctx_cov[t * cfg.cov_dim + nf] = static_cast<double>(seen) / static_cast<double>(d) - 0.5;
    }
    for (std::size_t t = 0; t < cfg.horizon; ++t) {
        std::copy(ff.begin() + t * nf, ff.begin() + (t + 1) * nf,
                  fut_cov.begin() + t * cfg.cov_dim);
        fut_cov[t * cfg.cov_dim + nf] = 0.5;
    }
    w.context = Tensor::from_vector({1, cfg.context_len, d}, std::move(cvals));
    w.context_covs = Tensor::from_vector({1, cfg.context_len, cfg.cov_dim}, std::move(ctx_cov));
    w.future_covs = Tensor::from_vector({1, cfg.horizon, cfg.cov_dim}, std::move(fut_cov));
    w.future = Tensor::zeros({1, cfg.horizon, d});
    w.means = Tensor::from_vector({1, d}, means);

    ForecastSamples out = forecast_window(w, 0, n, rng);
    out.freq = history.freq;
    out.start = history.start +
                static_cast<std::int64_t>(history.steps) * freq_seconds(history.freq);
    return out;
}

std::vector<double> sample_quantiles(std::vector<double> values,
                                     const std::vector<double>& probs) {
    if (values.empty()) throw ContractError("quantiles: empty sample set");
    std::sort(values.begin(), values.end());
    std::vector<double> out;
    out.reserve(probs.size());
    const double n = static_cast<double>(values.size());
    for (double p : probs) {
        if (p < 0.0 || p > 1.0) throw ContractError("quantiles: probability out of [0, 1]");
        const double pos = p * (n - 1.0);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, values.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        out.push_back(values[lo] * (1.0 - frac) + values[hi] * frac);
    }
    return out;
}

}  // namespace manf
