#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "manf/tensor.hpp"

namespace manf {

enum class Freq { HalfHour, Hourly, Daily };

std::int64_t freq_seconds(Freq freq);
std::size_t freq_feature_count(Freq freq);

struct DateTime {
    int year = 1970;
    int month = 1;  // 1..12
    int day = 1;    // 1..31
    int hour = 0;
    int minute = 0;
    int second = 0;
};

std::int64_t to_epoch_seconds(const DateTime& dt);
DateTime from_epoch_seconds(std::int64_t secs);
int day_of_week(std::int64_t secs);  // 0 = Monday
DateTime parse_iso8601(const std::string& text);
std::string format_iso8601(const DateTime& dt);

// Column-per-series panel at a fixed frequency; missing entries are masked,
// their stored value is a 0 placeholder.
struct SeriesFrame {
    Freq freq = Freq::Hourly;
    std::int64_t start = 0;  // epoch seconds of row 0
    std::size_t steps = 0;
    std::size_t dims = 0;
    std::vector<double> values;        // steps x dims, row-major
    std::vector<std::uint8_t> observed;

    double value(std::size_t t, std::size_t d) const { return values[t * dims + d]; }
    bool is_observed(std::size_t t, std::size_t d) const { return observed[t * dims + d] != 0; }
    void validate() const;
};

SeriesFrame load_csv(const std::string& path);
void save_csv(const SeriesFrame& frame, const std::string& path);

// Normalized calendar features in [-0.5, 0.5], one row per step starting at
// frame row t_start. Hourly: hour, dow, dom; daily: dow, dom, month; 30-min
// prepends minute-of-hour.
std::vector<double> time_features(const SeriesFrame& frame, std::size_t t_start,
                                  std::size_t count);

struct WindowBatch {
    std::size_t batch = 0;
    std::size_t context_len = 0;
    std::size_t horizon = 0;
    std::size_t dims = 0;
    std::size_t cov_dim = 0;
    Tensor context;       // [B, context_len, D] scaled, missing zeroed
    Tensor context_covs;  // [B, context_len, C]
    Tensor future_covs;   // [B, horizon, C]
    Tensor future;        // [B, horizon, D] scaled
    Tensor means;         // [B, D] strictly positive scale factors
    std::vector<std::size_t> starts;
};

// Mean over observed context entries per series; |mean| < 1e-8 falls back to
// 1. Returns the per-series means; scale/unscale divide/multiply in place.
std::vector<double> observed_means(const double* values, const std::uint8_t* observed,
                                   std::size_t steps, std::size_t dims);
void scale_by_means(double* values, std::size_t steps, std::size_t dims,
                    const std::vector<double>& means);
void unscale_by_means(double* values, std::size_t steps, std::size_t dims,
                      const std::vector<double>& means);

// rng != nullptr: `batch` windows at random starts. rng == nullptr: windows
// walking back from the tail at `stride` (batch ignored).
WindowBatch make_windows(const SeriesFrame& frame, std::size_t context, std::size_t horizon,
                         std::size_t stride, Rng* rng, std::size_t batch);

struct CorruptionSpec {
    std::size_t horizon_multiplier = 1;
    double missing_fraction = 0.0;  // in [0, 1)
    std::uint64_t seed = 0;

    void validate() const;
};

// Masks a uniform fraction of cells, leaving the last protect_tail rows
// intact (evaluation targets stay observed).
SeriesFrame inject_missing(const SeriesFrame& frame, double fraction, Rng& rng,
                           std::size_t protect_tail = 0);

WindowBatch mixup_with_lambda(const WindowBatch& batch, double lambda,
                              const std::vector<std::size_t>& perm);
WindowBatch mixup(const WindowBatch& batch, double alpha, Rng& rng);

enum class SynthKind { SinusoidMix, RandomWalk, Ar1 };
SynthKind parse_synth_kind(const std::string& name);

SeriesFrame synth_generate(SynthKind kind, std::size_t dims, std::size_t steps, double noise,
                           std::uint64_t seed);

}  // namespace manf
