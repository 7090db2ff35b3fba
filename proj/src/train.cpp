#include "manf/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace manf {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ContractError("train config: lr must be positive");
    if (batch_size == 0) throw ContractError("train config: batch_size must be >= 1");
    if (batches_per_epoch == 0) throw ContractError("train config: batches_per_epoch must be >= 1");
    if (mixup_alpha < 0.0) throw ContractError("train config: mixup alpha must be >= 0");
    if (eval_samples == 0) throw ContractError("train config: eval_samples must be >= 1");
}

std::string TrainConfig::to_json() const {
    nlohmann::ordered_json j;
    j["lr"] = lr;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["batches_per_epoch"] = batches_per_epoch;
    j["grad_clip"] = grad_clip;
    j["mixup_alpha"] = mixup_alpha;
    j["eval_every"] = eval_every;
    j["eval_samples"] = eval_samples;
    j["seed"] = seed;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("train config: ") + e.what());
    }
    static const char* known[] = {"lr",          "batch_size", "epochs", "batches_per_epoch",
                                  "grad_clip",   "mixup_alpha", "eval_every", "eval_samples",
                                  "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return it.key() == k; }) == std::end(known)) {
            throw FormatError("train config: unknown key '" + it.key() + "'");
        }
    }
    TrainConfig cfg;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("lr", cfg.lr);
    get("batch_size", cfg.batch_size);
    get("epochs", cfg.epochs);
    get("batches_per_epoch", cfg.batches_per_epoch);
    get("grad_clip", cfg.grad_clip);
    get("mixup_alpha", cfg.mixup_alpha);
    get("eval_every", cfg.eval_every);
    get("eval_samples", cfg.eval_samples);
    get("seed", cfg.seed);
    cfg.validate();
    return cfg;
}

void adam_step(const std::vector<Tensor*>& params, AdamState& state, double lr) {
    if (state.m.size() != params.size()) throw ContractError("adam: state/parameter mismatch");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor* p = params[i];
        if (!p->has_grad()) throw ContractError("adam: parameter " + std::to_string(i) +
                                                " has no gradient");
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& g = p->grad();
        double* x = p->data();
        for (std::size_t k = 0; k < m.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            x[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + state.eps);
        }
    }
}

double clip_gradients(const std::vector<Tensor*>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor* p : params) {
        if (!p->has_grad()) continue;
        for (double g : p->grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (Tensor* p : params) {
            if (!p->has_grad()) continue;
            for (double& g : p->grad_mut()) g *= scale;
        }
    }
    return norm;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

TrainResult train(ManfModel& model, const SeriesFrame& data, const TrainConfig& cfg,
                  AdamState* adam, std::size_t start_epoch) {
    cfg.validate();
    auto params = model.params();
    AdamState local = AdamState::init(params);
    AdamState& state = adam ? *adam : local;

    TrainResult result;
    const std::size_t context = model.cfg.context_len;
    const std::size_t horizon = model.cfg.horizon;
    for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        Rng rng(mix_seed(cfg.seed, epoch));
        double loss_sum = 0.0;
        std::size_t bad_streak = 0;
        for (std::size_t b = 0; b < cfg.batches_per_epoch; ++b) {
            WindowBatch batch = make_windows(data, context, horizon, 1, &rng, cfg.batch_size);
            if (cfg.mixup_alpha > 0.0 && batch.batch >= 2) {
                batch = mixup(batch, cfg.mixup_alpha, rng);
            }
            double loss_val = 0.0;
            bool ok = true;
            try {
                for (Tensor* p : params) p->zero_grad();
                Tensor loss = model.nll(batch, true, &rng);
                loss_val = loss.item();
                if (!std::isfinite(loss_val)) throw NumericError("non-finite loss");
                loss.backward();
            } catch (const NumericError&) {
                ok = false;
            }
            if (!ok) {
                if (++bad_streak >= 2) {
                    throw NumericError("training aborted: non-finite loss in epoch " +
                                       std::to_string(epoch + 1) + ", batches " +
                                       std::to_string(b) + "-" + std::to_string(b + 1));
                }
                continue;
            }
            bad_streak = 0;
            clip_gradients(params, cfg.grad_clip);
            adam_step(params, state, cfg.lr);
            loss_sum += loss_val;
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.loss = loss_sum / static_cast<double>(cfg.batches_per_epoch);
        const bool last = epoch + 1 == cfg.epochs;
        const bool cadence = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if (cadence || last) {
            auto report = evaluate(model, data, cfg.eval_samples, mix_seed(cfg.seed, 1u << 20));
            rec.crps_sum = report.crps_sum;
            rec.mse = report.mse;
        } else if (!result.history.empty()) {
            rec.crps_sum = result.history.back().crps_sum;
            rec.mse = result.history.back().mse;
        }
        result.history.push_back(rec);
    }
    return result;
}

ScoreReport evaluate(ManfModel& model, const SeriesFrame& data, std::size_t n_samples,
                     std::uint64_t seed, bool normalized, const SeriesFrame* truth,
                     std::size_t horizon) {
    const std::size_t context = model.cfg.context_len;
    if (horizon == 0) horizon = model.cfg.horizon;
    if (truth && (truth->steps != data.steps || truth->dims != data.dims)) {
        throw DataMismatchError("truth frame geometry differs from the evaluation frame");
    }
    WindowBatch windows = make_windows(data, context, horizon, horizon, nullptr, 0);
    std::vector<Tensor> sample_sets, observations;
    for (std::size_t w = 0; w < windows.batch; ++w) {
        Rng rng(mix_seed(seed, w));
        auto fc = model.forecast_window(windows, w, n_samples, rng);
        sample_sets.push_back(fc.samples);
        // observations back in original units to match the samples
        std::vector<double> obs(horizon * windows.dims);
        for (std::size_t t = 0; t < horizon; ++t) {
            for (std::size_t d = 0; d < windows.dims; ++d) {
                obs[t * windows.dims + d] =
                    truth ? truth->value(windows.starts[w] + context + t, d)
                          : windows.future.at({w, t, d}) * fc.means[d];
            }
        }
        observations.push_back(Tensor::from_vector({horizon, windows.dims}, std::move(obs)));
    }
    return score_windows(sample_sets, observations, normalized);
}

void save_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "epoch,loss,crps_sum,mse\n";
    char buf[96];
    for (const auto& rec : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g,%.12g\n", rec.epoch, rec.loss,
                      rec.crps_sum, rec.mse);
        out << buf;
    }
    if (!out) throw IoError("write failed: '" + path + "'");
}

}  // namespace manf
