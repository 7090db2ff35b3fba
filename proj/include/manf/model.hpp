#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "manf/attention.hpp"
#include "manf/data.hpp"
#include "manf/flow.hpp"
#include "manf/tensor.hpp"

namespace manf {

struct ManfConfig {
    std::size_t dims = 1;          // D, series count
    std::size_t horizon = 24;      // k
    std::size_t context_len = 96;  // T-1 = 4 * horizon
    std::size_t cov_dim = 4;       // covariate channels (calendar + indicator)
    std::size_t hidden_dim = 32;
    std::size_t heads = 4;
    std::size_t enc_layers = 3;
    std::size_t dec_layers = 3;  // also the number of flow couplings
    std::size_t cond_dim = 0;    // 0 -> hidden_dim
    std::size_t flow_hidden = 100;
    std::size_t ffn_dim = 0;  // 0 -> 2 * hidden_dim
    double dropout = 0.1;
    double scale_clamp = 2.0;
    Conditioning conditioning = Conditioning::Coupling;
    std::vector<std::size_t> scales;  // empty -> ScaleSet::defaults(context_len)
    std::uint64_t seed = 1;

    std::size_t resolved_cond_dim() const { return cond_dim ? cond_dim : hidden_dim; }
    std::size_t resolved_ffn_dim() const { return ffn_dim ? ffn_dim : 2 * hidden_dim; }
    std::vector<std::size_t> resolved_scales() const;
    void validate() const;
    std::string to_json() const;
    static ManfConfig from_json(const std::string& text);
};

struct ForecastSamples {
    Tensor samples;  // [n, horizon, D], original units
    std::vector<double> means;
    std::int64_t start = 0;  // epoch seconds of the first forecast step
    Freq freq = Freq::Hourly;
};

struct ManfModel {
    ManfConfig cfg;
    ScaleSet scales;
    Tensor embed_w, embed_b;          // [D + C, hidden]
    Tensor dec_embed_w, dec_embed_b;  // [C, hidden]
    std::vector<AttentionLayerParams> enc_layers;
    std::vector<RelPosEncoding> enc_relpos;
    std::vector<AttentionLayerParams> dec_layers;
    std::vector<Tensor> cond_w, cond_b;  // hidden -> cond_dim, one per decoder layer
    FlowStack flow;

    // instrumentation for the non-autoregressive contract
    std::size_t encoder_calls = 0;
    std::size_t decoder_calls = 0;
    std::size_t flow_draws = 0;

    static ManfModel init(const ManfConfig& cfg);

    std::vector<Tensor*> params();
    std::vector<std::pair<std::string, Tensor*>> named_params();
    // BN running/batch statistics and other non-gradient state, by name.
    std::vector<std::pair<std::string, std::vector<double>*>> named_state();

    // values [.., T, D] + covariates [.., T, C] -> [.., T, hidden]
    Tensor embed_inputs(const Tensor& values, const Tensor& covs) const;

    Tensor encode(const Tensor& values, const Tensor& covs, const AttnOptions& opts = {});

    // Returns one hidden state per decoder layer, each [.., k, hidden]. PE is
    // applied at the first layer only; pass pe_override to force a PE.
    std::vector<Tensor> decode(const Tensor& future_covs, const Tensor& h_enc,
                               const AttnOptions& opts = {}, const Tensor* pe_override = nullptr);

    // Mean over windows of the summed-over-time negative log-likelihood.
    Tensor nll(const WindowBatch& batch, bool training, Rng* rng = nullptr);

    // Forecast one window of a batch; samples are unscaled to original units.
    ForecastSamples forecast_window(const WindowBatch& batch, std::size_t index, std::size_t n,
                                    Rng& rng);
    // Forecast the next horizon steps after the end of `history` using its
    // last context_len rows.
    ForecastSamples forecast(const SeriesFrame& history, std::size_t n, Rng& rng);
};

// Linear-interpolation quantiles of an unsorted sample vector.
std::vector<double> sample_quantiles(std::vector<double> values, const std::vector<double>& probs);

}  // namespace manf
