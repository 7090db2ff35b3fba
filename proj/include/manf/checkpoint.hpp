#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "manf/model.hpp"

namespace manf {

inline constexpr int kCheckpointVersion = 1;

// A checkpoint directory holds manifest.json (version, config, named array
// index, checksum) and params.bin (raw little-endian f64, concatenated in
// manifest order).
struct Checkpoint {
    std::string config_json;
    std::string extra_json;
    std::map<std::string, std::vector<double>> arrays;
};

void write_checkpoint(const std::string& dir, const std::string& config_json,
                      const std::vector<std::pair<std::string, const std::vector<double>*>>& arrays,
                      const std::string& extra_json = "{}");
Checkpoint read_checkpoint(const std::string& dir);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;

    static AdamState init(const std::vector<Tensor*>& params);
};

// Full training snapshot: model params + BN stats, and optionally optimizer
// moments, RNG state, and the epoch counter for exact resumption.
void save_model(const std::string& dir, ManfModel& model, const AdamState* adam = nullptr,
                const Rng* rng = nullptr, std::size_t epochs_done = 0);

struct LoadedModel {
    ManfModel model;
    AdamState adam;
    Rng rng;
    std::size_t epochs_done = 0;
    bool has_train_state = false;
};

LoadedModel load_model(const std::string& dir);

}  // namespace manf
