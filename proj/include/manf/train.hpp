#pragma once

#include <string>
#include <vector>

#include "manf/checkpoint.hpp"
#include "manf/data.hpp"
#include "manf/metrics.hpp"
#include "manf/model.hpp"

namespace manf {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 10;
    std::size_t batches_per_epoch = 100;
    double grad_clip = 10.0;  // <= 0 disables clipping
    double mixup_alpha = 0.2;
    std::size_t eval_every = 1;     // epochs between evaluations; 0 = final only
    std::size_t eval_samples = 100;
    std::uint64_t seed = 1;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

// Bias-corrected Adam, in place. Parameter order must match the state.
void adam_step(const std::vector<Tensor*>& params, AdamState& state, double lr);

// Scales gradients so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(const std::vector<Tensor*>& params, double max_norm);

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double crps_sum = 0.0;
    double mse = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
};

// Deterministic per (seed, config, data): each epoch reseeds its own RNG from
// (seed, epoch), so resuming at start_epoch replays the uninterrupted run.
TrainResult train(ManfModel& model, const SeriesFrame& data, const TrainConfig& cfg,
                  AdamState* adam = nullptr, std::size_t start_epoch = 0);

// Rolling non-overlapping windows from the tail, eval_samples draws each.
// truth, when given, supplies the observations (so `data` may be corrupted);
// horizon 0 means the model's configured horizon.
ScoreReport evaluate(ManfModel& model, const SeriesFrame& data, std::size_t n_samples,
                     std::uint64_t seed, bool normalized = false,
                     const SeriesFrame* truth = nullptr, std::size_t horizon = 0);

void save_history_csv(const std::string& path, const std::vector<EpochRecord>& history);

}  // namespace manf
