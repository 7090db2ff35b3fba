#include "manf/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace manf {

std::int64_t freq_seconds(Freq freq) {
    switch (freq) {
        case Freq::HalfHour: return 1800;
        case Freq::Hourly: return 3600;
        case Freq::Daily: return 86400;
    }
    throw ContractError("unknown frequency");
}

std::size_t freq_feature_count(Freq freq) {
    return freq == Freq::HalfHour ? 4 : 3;
}

namespace {

std::int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const int yoe = static_cast<int>(y - era * 400);
    const int doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const int doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + doe - 719468;
}

void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const int doe = static_cast<int>(z - era * 146097);
    const int yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yr = yoe + era * 400;
    const int doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const int mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = static_cast<int>(yr) + (m <= 2);
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b) != 0 && ((a < 0) != (b < 0))) --q;
    return q;
}

}  // namespace

std::int64_t to_epoch_seconds(const DateTime& dt) {
    return days_from_civil(dt.year, dt.month, dt.day) * 86400 + dt.hour * 3600 + dt.minute * 60 +
           dt.second;
}

DateTime from_epoch_seconds(std::int64_t secs) {
    const std::int64_t days = floor_div(secs, 86400);
    std::int64_t rem = secs - days * 86400;
    DateTime dt;
    civil_from_days(days, dt.year, dt.month, dt.day);
    dt.hour = static_cast<int>(rem / 3600);
    rem %= 3600;
    dt.minute = static_cast<int>(rem / 60);
    dt.second = static_cast<int>(rem % 60);
    return dt;
}

int day_of_week(std::int64_t secs) {
    const std::int64_t days = floor_div(secs, 86400);
    return static_cast<int>(((days % 7) + 10) % 7);  // 1970-01-01 was a Thursday
}

DateTime parse_iso8601(const std::string& text) {
    DateTime dt;
    char sep = 0;
    int n = std::sscanf(text.c_str(), "%d-%d-%d%c%d:%d:%d", &dt.year, &dt.month, &dt.day, &sep,
                        &dt.hour, &dt.minute, &dt.second);
    if (n != 3 && n != 6 && n != 7) throw FormatError("bad timestamp: '" + text + "'");
    if (n >= 4 && sep != 'T' && sep != ' ') throw FormatError("bad timestamp: '" + text + "'");
    if (n == 6) dt.second = 0;
    if (dt.month < 1 || dt.month > 12 || dt.day < 1 || dt.day > 31 || dt.hour < 0 ||
        dt.hour > 23 || dt.minute < 0 || dt.minute > 59 || dt.second < 0 || dt.second > 59) {
        throw FormatError("timestamp out of range: '" + text + "'");
    }
    return dt;
}

std::string format_iso8601(const DateTime& dt) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d", dt.year, dt.month, dt.day,
                  dt.hour, dt.minute, dt.second);
    return buf;
}

void SeriesFrame::validate() const {
    if (dims == 0) throw FormatError("frame has no series");
    if (values.size() != steps * dims || observed.size() != steps * dims) {
        throw ContractError("frame buffers inconsistent with steps x dims");
    }
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError("frame contains a non-finite value");
    }
}

SeriesFrame load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("timestamp", 0) != 0) throw FormatError(path + ": header must start with 'timestamp'");
    std::size_t dims = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    if (dims == 0) throw FormatError(path + ": no series columns");

    SeriesFrame frame;
    frame.dims = dims;
    std::vector<std::int64_t> stamps;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t pos = line.find(',');
        if (pos == std::string::npos) {
            throw FormatError(path + ": row " + std::to_string(row) + " has no value columns");
        }
        stamps.push_back(to_epoch_seconds(parse_iso8601(line.substr(0, pos))));
        std::size_t col = 0;
        std::size_t begin = pos + 1;
        while (col < dims) {
            std::size_t end = line.find(',', begin);
            std::string cell = line.substr(begin, end == std::string::npos ? std::string::npos
                                                                           : end - begin);
            if (cell.empty()) {
                frame.values.push_back(0.0);
                frame.observed.push_back(0);
            } else {
                char* stop = nullptr;
                double v = std::strtod(cell.c_str(), &stop);
                if (stop == cell.c_str() || *stop != '\0') {
                    throw FormatError(path + ": row " + std::to_string(row) + ": bad number '" +
                                      cell + "'");
                }
                frame.values.push_back(v);
                frame.observed.push_back(1);
            }
            ++col;
            if (end == std::string::npos) {
                if (col != dims) {
                    throw FormatError(path + ": row " + std::to_string(row) +
                                      ": expected " + std::to_string(dims) + " values");
                }
                break;
            }
            begin = end + 1;
        }
    }
    frame.steps = stamps.size();
    if (frame.steps < 2) throw FormatError(path + ": need at least 2 rows to infer frequency");
    frame.start = stamps[0];
    const std::int64_t delta = stamps[1] - stamps[0];
    if (delta == 1800) {
        frame.freq = Freq::HalfHour;
    } else if (delta == 3600) {
        frame.freq = Freq::Hourly;
    } else if (delta == 86400) {
        frame.freq = Freq::Daily;
    } else {
        throw FormatError(path + ": unsupported step of " + std::to_string(delta) + " seconds");
    }
    for (std::size_t i = 1; i < stamps.size(); ++i) {
        if (stamps[i] - stamps[i - 1] != delta) {
            throw FormatError(path + ": row " + std::to_string(i + 2) + ": irregular timestamp");
        }
    }
    frame.validate();
    return frame;
}

void save_csv(const SeriesFrame& frame, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "timestamp";
    for (std::size_t d = 0; d < frame.dims; ++d) out << ",series_" << d;
    out << "\n";
    char buf[40];
    const std::int64_t step = freq_seconds(frame.freq);
    for (std::size_t t = 0; t < frame.steps; ++t) {
        out << format_iso8601(from_epoch_seconds(frame.start + static_cast<std::int64_t>(t) * step));
        for (std::size_t d = 0; d < frame.dims; ++d) {
            out << ',';
            if (frame.is_observed(t, d)) {
                std::snprintf(buf, sizeof buf, "%.17g", frame.value(t, d));
                out << buf;
            }
        }
        out << "\n";
    }
    if (!out) throw IoError("write failed: '" + path + "'");
}

std::vector<double> time_features(const SeriesFrame& frame, std::size_t t_start,
                                  std::size_t count) {
    const std::size_t nf = freq_feature_count(frame.freq);
    const std::int64_t step = freq_seconds(frame.freq);
    std::vector<double> out;
    out.reserve(count * nf);
    for (std::size_t i = 0; i < count; ++i) {
        const std::int64_t secs =
            frame.start + static_cast<std::int64_t>(t_start + i) * step;
        const DateTime dt = from_epoch_seconds(secs);
        const double dow = day_of_week(secs) / 6.0 - 0.5;
        const double dom = (dt.day - 1) / 30.0 - 0.5;
        switch (frame.freq) {
            case Freq::HalfHour:
                out.push_back(dt.minute / 59.0 - 0.5);
                [[fallthrough]];
            case Freq::Hourly:
                out.push_back(dt.hour / 23.0 - 0.5);
                out.push_back(dow);
                out.push_back(dom);
                break;
            case Freq::Daily:
                out.push_back(dow);
                out.push_back(dom);
                out.push_back((dt.month - 1) / 11.0 - 0.5);
                break;
        }
    }
    return out;
}

std::vector<double> observed_means(const double* values, const std::uint8_t* observed,
                                   std::size_t steps, std::size_t dims) {
    std::vector<double> means(dims, 0.0);
    std::vector<std::size_t> counts(dims, 0);
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t d = 0; d < dims; ++d) {
            if (observed[t * dims + d]) {
                means[d] += std::fabs(values[t * dims + d]);
                ++counts[d];
            }
        }
    }
    for (std::size_t d = 0; d < dims; ++d) {
        means[d] = counts[d] ? means[d] / static_cast<double>(counts[d]) : 0.0;
        if (std::fabs(means[d]) < 1e-8) means[d] = 1.0;
    }
    return means;
}

void scale_by_means(double* values, std::size_t steps, std::size_t dims,
                    const std::vector<double>& means) {
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t d = 0; d < dims; ++d) values[t * dims + d] /= means[d];
    }
}

void unscale_by_means(double* values, std::size_t steps, std::size_t dims,
                      const std::vector<double>& means) {
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t d = 0; d < dims; ++d) values[t * dims + d] *= means[d];
    }
}

WindowBatch make_windows(const SeriesFrame& frame, std::size_t context, std::size_t horizon,
                         std::size_t stride, Rng* rng, std::size_t batch) {
    frame.validate();
    const std::size_t span = context + horizon;
    if (span > frame.steps) {
        throw CoverageError("series of " + std::to_string(frame.steps) +
                            " steps cannot fit context " + std::to_string(context) +
                            " + horizon " + std::to_string(horizon));
    }
    const std::size_t last_start = frame.steps - span;
    std::vector<std::size_t> starts;
    if (rng) {
        for (std::size_t i = 0; i < batch; ++i) starts.push_back(rng->uniform_index(last_start + 1));
    } else {
        if (stride == 0) throw ContractError("stride must be positive");
        std::size_t s = last_start;
        for (;;) {
            starts.push_back(s);
            if (s < stride) break;
            s -= stride;
        }
        std::reverse(starts.begin(), starts.end());
    }

    const std::size_t b = starts.size();
    const std::size_t d = frame.dims;
    const std::size_t nf = freq_feature_count(frame.freq);
    const std::size_t c = nf + 1;  // + observed-fraction indicator channel

    WindowBatch out;
    out.batch = b;
    out.context_len = context;
    out.horizon = horizon;
    out.dims = d;
    out.cov_dim = c;
    out.starts = starts;

    std::vector<double> ctx(b * context * d), fut(b * horizon * d), means_flat(b * d);
    std::vector<double> ctx_cov(b * context * c), fut_cov(b * horizon * c);
    for (std::size_t w = 0; w < b; ++w) {
        const std::size_t s = starts[w];
        std::vector<double> cvals(frame.values.begin() + s * d,
                                  frame.values.begin() + (s + context) * d);
        const std::uint8_t* cmask = frame.observed.data() + s * d;
        auto means = observed_means(cvals.data(), cmask, context, d);
        scale_by_means(cvals.data(), context, d, means);
        for (std::size_t t = 0; t < context; ++t) {
            for (std::size_t j = 0; j < d; ++j) {
                ctx[(w * context + t) * d + j] = cmask[t * d + j] ? cvals[t * d + j] : 0.0;
            }
        }
        const std::size_t fs = s + context;
        for (std::size_t t = 0; t < horizon; ++t) {
            for (std::size_t j = 0; j < d; ++j) {
                fut[(w * horizon + t) * d + j] = frame.value(fs + t, j) / means[j];
            }
        }
        std::copy(means.begin(), means.end(), means_flat.begin() + w * d);

        auto cf = time_features(frame, s, context);
        auto ff = time_features(frame, fs, horizon);
        for (std::size_t t = 0; t < context; ++t) {
            std::copy(cf.begin() + t * nf, cf.begin() + (t + 1) * nf,
                      ctx_cov.begin() + (w * context + t) * c);
            std::size_t seen = 0;
            for (std::size_t j = 0; j < d; ++j) seen += cmask[t * d + j] ? 1 : 0;
            ctx_cov[(w * context + t) * c + nf] =
                static_cast<double>(seen) / static_cast<double>(d) - 0.5;
        }
        for (std::size_t t = 0; t < horizon; ++t) {
            std::copy(ff.begin() + t * nf, ff.begin() + (t + 1) * nf,
                      fut_cov.begin() + (w * horizon + t) * c);
            std::size_t seen = 0;
            for (std::size_t j = 0; j < d; ++j) seen += frame.is_observed(fs + t, j) ? 1 : 0;
            fut_cov[(w * horizon + t) * c + nf] =
                static_cast<double>(seen) / static_cast<double>(d) - 0.5;
        }
    }
    out.context = Tensor::from_vector({b, context, d}, std::move(ctx));
    out.context_covs = Tensor::from_vector({b, context, c}, std::move(ctx_cov));
    out.future_covs = Tensor::from_vector({b, horizon, c}, std::move(fut_cov));
    out.future = Tensor::from_vector({b, horizon, d}, std::move(fut));
    out.means = Tensor::from_vector({b, d}, std::move(means_flat));
    return out;
}

void CorruptionSpec::validate() const {
    if (horizon_multiplier == 0) throw ContractError("horizon multiplier must be >= 1");
    if (missing_fraction < 0.0 || missing_fraction >= 1.0) {
        throw ContractError("missing fraction must lie in [0, 1)");
    }
}

SeriesFrame inject_missing(const SeriesFrame& frame, double fraction, Rng& rng,
                           std::size_t protect_tail) {
    if (fraction < 0.0 || fraction >= 1.0) throw ContractError("fraction must lie in [0, 1)");
    SeriesFrame out = frame;
    if (fraction == 0.0) return out;
    const std::size_t rows = frame.steps > protect_tail ? frame.steps - protect_tail : 0;
    for (std::size_t t = 0; t < rows; ++t) {
        for (std::size_t d = 0; d < frame.dims; ++d) {
            if (out.is_observed(t, d) && rng.bernoulli(fraction)) {
                out.observed[t * frame.dims + d] = 0;
                out.values[t * frame.dims + d] = 0.0;
            }
        }
    }
    return out;
}

WindowBatch mixup_with_lambda(const WindowBatch& batch, double lambda,
                              const std::vector<std::size_t>& perm) {
    if (perm.size() != batch.batch) throw ContractError("mixup: permutation size mismatch");
    WindowBatch out = batch;
    const std::size_t cd = batch.context_len * batch.dims;
    const std::size_t fd = batch.horizon * batch.dims;
    std::vector<double> ctx(batch.batch * cd), fut(batch.batch * fd);
    for (std::size_t w = 0; w < batch.batch; ++w) {
        const std::size_t p = perm[w];
        for (std::size_t i = 0; i < cd; ++i) {
            ctx[w * cd + i] = lambda * batch.context.data()[w * cd + i] +
                              (1.0 - lambda) * batch.context.data()[p * cd + i];
        }
        for (std::size_t i = 0; i < fd; ++i) {
            fut[w * fd + i] = lambda * batch.future.data()[w * fd + i] +
                              (1.0 - lambda) * batch.future.data()[p * fd + i];
        }
    }
    out.context = Tensor::from_vector(batch.context.shape(), std::move(ctx));
    out.future = Tensor::from_vector(batch.future.shape(), std::move(fut));
    return out;
}

WindowBatch mixup(const WindowBatch& batch, double alpha, Rng& rng) {
    if (alpha < 0.0) throw ContractError("mixup: alpha must be >= 0");
    if (alpha == 0.0) return batch;
    if (batch.batch < 2) throw ContractError("mixup: batch size must be >= 2");
    const double lambda = rng.beta(alpha, alpha);
    std::vector<std::size_t> perm(batch.batch);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i-- > 1;) {
        std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
    }
    return mixup_with_lambda(batch, lambda, perm);
}

SynthKind parse_synth_kind(const std::string& name) {
    if (name == "sinusoid-mix") return SynthKind::SinusoidMix;
    if (name == "random-walk") return SynthKind::RandomWalk;
    if (name == "ar1") return SynthKind::Ar1;
    throw ContractError("unknown synth kind '" + name + "'");
}

SeriesFrame synth_generate(SynthKind kind, std::size_t dims, std::size_t steps, double noise,
                           std::uint64_t seed) {
    if (dims == 0 || steps < 2) throw ContractError("synth: need dims >= 1 and steps >= 2");
    SeriesFrame frame;
    frame.freq = Freq::Hourly;
    frame.start = to_epoch_seconds({2020, 1, 1, 0, 0, 0});
    frame.steps = steps;
    frame.dims = dims;
    frame.values.assign(steps * dims, 0.0);
    frame.observed.assign(steps * dims, 1);

    Rng rng(seed);
    const double two_pi = 2.0 * std::numbers::pi;
    switch (kind) {
        case SynthKind::SinusoidMix: {
            // two harmonics of the daily cycle: noise-free signal is exactly
            // 24-periodic
            std::vector<double> phase1(dims), phase2(dims);
            for (std::size_t d = 0; d < dims; ++d) {
                phase1[d] = rng.uniform(0.0, two_pi);
                phase2[d] = rng.uniform(0.0, two_pi);
            }
            for (std::size_t t = 0; t < steps; ++t) {
                const double frac = static_cast<double>(t % 24) / 24.0;
                for (std::size_t d = 0; d < dims; ++d) {
                    frame.values[t * dims + d] = 3.0 + std::sin(two_pi * frac + phase1[d]) +
                                                 0.5 * std::sin(2.0 * two_pi * frac + phase2[d]) +
                                                 noise * rng.normal();
                }
            }
            break;
        }
        case SynthKind::RandomWalk: {
            for (std::size_t d = 0; d < dims; ++d) frame.values[d] = 10.0;
            for (std::size_t t = 1; t < steps; ++t) {
                for (std::size_t d = 0; d < dims; ++d) {
                    frame.values[t * dims + d] =
                        frame.values[(t - 1) * dims + d] + noise * rng.normal();
                }
            }
            break;
        }
        case SynthKind::Ar1: {
            const double phi = 0.8;
            for (std::size_t t = 1; t < steps; ++t) {
                for (std::size_t d = 0; d < dims; ++d) {
                    frame.values[t * dims + d] =
                        phi * frame.values[(t - 1) * dims + d] + noise * rng.normal();
                }
            }
            break;
        }
    }
    return frame;
}

}  // namespace manf
