#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "manf/tensor.hpp"

namespace manf {

// Exact CRPS of an empirical sample distribution against a scalar
// observation. Both estimators are closed-form and must agree.
double crps_piecewise(std::vector<double> samples, double x);
double crps_energy(std::vector<double> samples, double x);
inline double crps_samples(std::vector<double> samples, double x) {
    return crps_piecewise(std::move(samples), x);
}

// samples: [n, k, D], obs: [k, D]. Sums across D per timestep, scores the
// summed distribution, averages over timesteps. normalized divides by the
// mean of sum_d |obs|.
double crps_sum(const Tensor& samples, const Tensor& obs, bool normalized = false);

// Per-series CRPS averaged over timesteps, [D].
std::vector<double> per_series_crps(const Tensor& samples, const Tensor& obs);

// Mean over (t, d) of (sample mean - obs)^2.
double mse(const Tensor& samples, const Tensor& obs);

struct ScoreReport {
    double crps_sum = 0.0;
    double mse = 0.0;
    std::vector<double> per_series_crps;
    std::size_t n_samples = 0;
    std::size_t windows = 0;

    void validate() const;
    std::string to_json() const;
    static ScoreReport from_json(const std::string& text);
};

// Scores a set of evaluation windows: crps_sum/mse averaged over windows,
// per-series CRPS averaged over windows.
ScoreReport score_windows(const std::vector<Tensor>& sample_sets,
                          const std::vector<Tensor>& observations, bool normalized = false);

enum class BaselineKind { Persistence, Climatology };
BaselineKind parse_baseline_kind(const std::string& name);

// context: [T, D] history in original units. persistence repeats the last
// value plus bootstrapped one-step residuals; climatology resamples context
// values per series. Returns [n, horizon, D].
Tensor baseline_forecast(BaselineKind kind, const Tensor& context, std::size_t horizon,
                         std::size_t n, Rng& rng);

}  // namespace manf
