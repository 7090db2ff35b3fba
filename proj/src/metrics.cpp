#include "manf/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace manf {

double crps_piecewise(std::vector<double> samples, double x) {
    if (samples.empty()) throw ContractError("crps: need at least one sample");
    std::sort(samples.begin(), samples.end());
    const double n = static_cast<double>(samples.size());
    // breakpoints = sorted samples with x merged in; between breakpoints both
    // the empirical CDF and the indicator are constant
    std::vector<double> pts = samples;
    pts.insert(std::lower_bound(pts.begin(), pts.end(), x), x);
    double acc = 0.0;
    std::size_t below = 0;  // samples <= segment start
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const double a = pts[i];
        const double b = pts[i + 1];
        while (below < samples.size() && samples[below] <= a) ++below;
        if (b <= a) continue;
        const double f = static_cast<double>(below) / n;
        const double ind = a >= x ? 1.0 : 0.0;
        acc += (f - ind) * (f - ind) * (b - a);
    }
    return acc;
}

double crps_energy(std::vector<double> samples, double x) {
    if (samples.empty()) throw ContractError("crps: need at least one sample");
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    double term1 = 0.0;
    double pairs = 0.0;  // sum over i of (2i+1-n) * s_i  ==  sum_{i<j} (s_j - s_i)
    for (std::size_t i = 0; i < n; ++i) {
        term1 += std::fabs(samples[i] - x);
        pairs += (2.0 * static_cast<double>(i) + 1.0 - static_cast<double>(n)) * samples[i];
    }
    const double dn = static_cast<double>(n);
    return term1 / dn - pairs / (dn * dn);
}

namespace {

void check_sample_shapes(const Tensor& samples, const Tensor& obs) {
    if (samples.ndim() != 3 || obs.ndim() != 2 || samples.extent(1) != obs.extent(0) ||
        samples.extent(2) != obs.extent(1)) {
        throw ShapeError("samples " + shape_str(samples.shape()) + " vs observations " +
                         shape_str(obs.shape()));
    }
}

}  // namespace

double crps_sum(const Tensor& samples, const Tensor& obs, bool normalized) {
    check_sample_shapes(samples, obs);
    const std::size_t n = samples.extent(0);
    const std::size_t k = samples.extent(1);
    const std::size_t d = samples.extent(2);
    double acc = 0.0;
    double denom = 0.0;
    std::vector<double> summed(n);
    for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += samples.at({i, t, j});
            summed[i] = s;
        }
        double o = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            o += obs.at({t, j});
            denom += std::fabs(obs.at({t, j}));
        }
        acc += crps_piecewise(summed, o);
    }
    acc /= static_cast<double>(k);
    if (normalized) {
        denom /= static_cast<double>(k);
        if (denom > 1e-12) acc /= denom;
    }
    return acc;
}

std::vector<double> per_series_crps(const Tensor& samples, const Tensor& obs) {
    check_sample_shapes(samples, obs);
    const std::size_t n = samples.extent(0);
    const std::size_t k = samples.extent(1);
    const std::size_t d = samples.extent(2);
    std::vector<double> out(d, 0.0);
    std::vector<double> column(n);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t t = 0; t < k; ++t) {
            for (std::size_t i = 0; i < n; ++i) column[i] = samples.at({i, t, j});
            out[j] += crps_piecewise(column, obs.at({t, j}));
        }
        out[j] /= static_cast<double>(k);
    }
    return out;
}

double mse(const Tensor& samples, const Tensor& obs) {
    check_sample_shapes(samples, obs);
    const std::size_t n = samples.extent(0);
    const std::size_t k = samples.extent(1);
    const std::size_t d = samples.extent(2);
    double acc = 0.0;
    for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i) m += samples.at({i, t, j});
            m /= static_cast<double>(n);
            const double e = m - obs.at({t, j});
            acc += e * e;
        }
    }
    return acc / static_cast<double>(k * d);
}

void ScoreReport::validate() const {
    auto ok = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!ok(crps_sum) || !ok(mse)) throw NumericError("score report: invalid aggregate score");
    for (double v : per_series_crps) {
        if (!ok(v)) throw NumericError("score report: invalid per-series CRPS");
    }
}

std::string ScoreReport::to_json() const {
    nlohmann::ordered_json j;
    j["crps_sum"] = crps_sum;
    j["mse"] = mse;
    j["per_series_crps"] = per_series_crps;
    j["n_samples"] = n_samples;
    j["windows"] = windows;
    return j.dump(2);
}

ScoreReport ScoreReport::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("score report: ") + e.what());
    }
    ScoreReport r;
    r.crps_sum = j.at("crps_sum").get<double>();
    r.mse = j.at("mse").get<double>();
    r.per_series_crps = j.at("per_series_crps").get<std::vector<double>>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.windows = j.at("windows").get<std::size_t>();
    return r;
}

ScoreReport score_windows(const std::vector<Tensor>& sample_sets,
                          const std::vector<Tensor>& observations, bool normalized) {
    if (sample_sets.empty() || sample_sets.size() != observations.size()) {
        throw ContractError("score_windows: need matching, non-empty window lists");
    }
    ScoreReport report;
    report.windows = sample_sets.size();
    report.n_samples = sample_sets[0].extent(0);
    report.per_series_crps.assign(sample_sets[0].extent(2), 0.0);
    for (std::size_t w = 0; w < sample_sets.size(); ++w) {
        report.crps_sum += crps_sum(sample_sets[w], observations[w], normalized);
        report.mse += mse(sample_sets[w], observations[w]);
        auto per = per_series_crps(sample_sets[w], observations[w]);
        if (per.size() != report.per_series_crps.size()) {
            throw ShapeError("score_windows: inconsistent series counts across windows");
        }
        for (std::size_t j = 0; j < per.size(); ++j) report.per_series_crps[j] += per[j];
    }
    const double nw = static_cast<double>(report.windows);
    report.crps_sum /= nw;
    report.mse /= nw;
    for (double& v : report.per_series_crps) v /= nw;
    report.validate();
    return report;
}

BaselineKind parse_baseline_kind(const std::string& name) {
    if (name == "persistence") return BaselineKind::Persistence;
    if (name == "climatology") return BaselineKind::Climatology;
    throw ContractError("unknown baseline '" + name + "'");
}

Tensor baseline_forecast(BaselineKind kind, const Tensor& context, std::size_t horizon,
                         std::size_t n, Rng& rng) {
    if (context.ndim() != 2 || context.extent(0) == 0) {
        throw ShapeError("baseline: context must be [T, D]");
    }
    if (horizon == 0 || n == 0) throw ContractError("baseline: need horizon >= 1 and n >= 1");
    const std::size_t t = context.extent(0);
    const std::size_t d = context.extent(1);
    std::vector<double> out(n * horizon * d);
    for (std::size_t j = 0; j < d; ++j) {
        if (kind == BaselineKind::Persistence) {
            const double last = context.at({t - 1, j});
            std::vector<double> resid;
            for (std::size_t r = 0; r + 1 < t; ++r) {
                resid.push_back(context.at({r + 1, j}) - context.at({r, j}));
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t h = 0; h < horizon; ++h) {
                    const double noise = resid.empty() ? 0.0 : resid[rng.uniform_index(resid.size())];
                    out[(i * horizon + h) * d + j] = last + noise;
                }
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t h = 0; h < horizon; ++h) {
                    out[(i * horizon + h) * d + j] = context.at({rng.uniform_index(t), j});
                }
            }
        }
    }
    return Tensor::from_vector({n, horizon, d}, std::move(out));
}

}  // namespace manf
