#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "manf/checkpoint.hpp"
#include "manf/svg.hpp"
#include "manf/train.hpp"

namespace {

using namespace manf;

constexpr int kExitOk = 0;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitUsage = 64;
constexpr int kExitDataMismatch = 65;

constexpr int kRunConfigVersion = 1;

const char* freq_name(Freq freq) {
    switch (freq) {
        case Freq::HalfHour: return "30min";
        case Freq::Hourly: return "hourly";
        case Freq::Daily: return "daily";
    }
    return "?";
}

struct RunConfig {
    std::string data;
    std::string out_dir = ".";
    ManfConfig model;
    bool model_sets_dims = false;
    TrainConfig train;
    CorruptionSpec corruption;
};

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config '" + path + "': " + e.what());
    }
    static const char* known[] = {"version", "data", "out_dir", "model", "train", "corruption"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw FormatError("config '" + path + "': unknown key '" + it.key() + "'");
    }
    if (!j.contains("version")) throw FormatError("config '" + path + "': missing 'version'");
    const int version = j.at("version").get<int>();
    if (version != kRunConfigVersion) {
        throw FormatError("config '" + path + "': version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kRunConfigVersion) +
                          ")");
    }
    if (!j.contains("data")) throw FormatError("config '" + path + "': missing 'data'");

    RunConfig rc;
    rc.data = j.at("data").get<std::string>();
    if (j.contains("out_dir")) rc.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("model")) {
        rc.model = ManfConfig::from_json(j.at("model").dump());
        rc.model_sets_dims = j.at("model").contains("dims");
    }
    if (j.contains("train")) rc.train = TrainConfig::from_json(j.at("train").dump());
    if (j.contains("corruption")) {
        const auto& c = j.at("corruption");
        static const char* ckeys[] = {"horizon_multiplier", "missing_fraction", "seed"};
        for (auto it = c.begin(); it != c.end(); ++it) {
            bool ok = false;
            for (const char* k : ckeys) ok = ok || it.key() == k;
            if (!ok) {
                throw FormatError("config '" + path + "': unknown key 'corruption." + it.key() +
                                  "'");
            }
        }
        if (c.contains("horizon_multiplier")) {
            rc.corruption.horizon_multiplier = c.at("horizon_multiplier").get<std::size_t>();
        }
        if (c.contains("missing_fraction")) {
            rc.corruption.missing_fraction = c.at("missing_fraction").get<double>();
        }
        if (c.contains("seed")) rc.corruption.seed = c.at("seed").get<std::uint64_t>();
        rc.corruption.validate();
    }
    return rc;
}

// model dims/covariates always come from the data; a config that pins dims
// must agree with the file it is pointed at.
ManfConfig bind_to_data(ManfConfig cfg, bool sets_dims, const SeriesFrame& frame) {
    if (sets_dims && cfg.dims != frame.dims) {
        throw DataMismatchError("config says dims=" + std::to_string(cfg.dims) + ", data has " +
                                std::to_string(frame.dims) + " series");
    }
    cfg.dims = frame.dims;
    cfg.cov_dim = freq_feature_count(frame.freq) + 1;
    cfg.validate();
    return cfg;
}

void check_compat(const ManfModel& model, const SeriesFrame& frame) {
    if (frame.dims != model.cfg.dims) {
        throw DataMismatchError("checkpoint expects " + std::to_string(model.cfg.dims) +
                                " series, data has " + std::to_string(frame.dims));
    }
    if (freq_feature_count(frame.freq) + 1 != model.cfg.cov_dim) {
        throw DataMismatchError("data frequency implies " +
                                std::to_string(freq_feature_count(frame.freq) + 1) +
                                " covariate channels, checkpoint expects " +
                                std::to_string(model.cfg.cov_dim));
    }
}

int cmd_synth(const std::string& kind, std::size_t dims, std::size_t steps, double noise,
              std::uint64_t seed, const std::string& out) {
    if (dims == 0) throw ContractError("synth: --dims must be >= 1");
    if (steps == 0) throw ContractError("synth: --steps must be >= 1");
    SeriesFrame frame = synth_generate(parse_synth_kind(kind), dims, steps, noise, seed);
    save_csv(frame, out);
    std::printf("wrote %s: dims=%zu freq=%s steps=%zu\n", out.c_str(), frame.dims,
                freq_name(frame.freq), frame.steps);
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
    RunConfig rc = parse_run_config(config_path);
    SeriesFrame frame = load_csv(rc.data);

    ManfModel model;
    AdamState adam;
    std::size_t start_epoch = 0;
    if (!resume.empty()) {
        LoadedModel lm = load_model(resume);
        check_compat(lm.model, frame);
        model = lm.model;
        adam = lm.has_train_state ? lm.adam : AdamState::init(model.params());
        start_epoch = lm.epochs_done;
    } else {
        model = ManfModel::init(bind_to_data(rc.model, rc.model_sets_dims, frame));
        adam = AdamState::init(model.params());
    }

    TrainResult result = train(model, frame, rc.train, &adam, start_epoch);
    for (const auto& rec : result.history) {
        std::printf("epoch %zu: loss=%.6g crps_sum=%.6g mse=%.6g\n", rec.epoch, rec.loss,
                    rec.crps_sum, rec.mse);
    }

    std::error_code ec;
    std::filesystem::create_directories(rc.out_dir, ec);
    if (ec) throw IoError("cannot create output directory '" + rc.out_dir + "'");
    save_model(rc.out_dir + "/checkpoint", model, &adam, nullptr, rc.train.epochs);
    save_history_csv(rc.out_dir + "/history.csv", result.history);
    std::printf("checkpoint: %s/checkpoint\n", rc.out_dir.c_str());
    return kExitOk;
}

int cmd_evaluate(const std::string& ckpt, const std::string& data_path, std::size_t samples,
                 std::uint64_t seed, std::size_t horizon_mult, double missing,
                 std::uint64_t corruption_seed, const std::string& out) {
    CorruptionSpec spec;
    spec.horizon_multiplier = horizon_mult;
    spec.missing_fraction = missing;
    spec.seed = corruption_seed;
    spec.validate();

    LoadedModel lm = load_model(ckpt);
    SeriesFrame frame = load_csv(data_path);
    check_compat(lm.model, frame);

    const SeriesFrame truth = frame;
    if (spec.missing_fraction > 0.0) {
        Rng rng(spec.seed);
        frame = inject_missing(frame, spec.missing_fraction, rng);
    }
    ScoreReport report = evaluate(lm.model, frame, samples, seed, false, &truth,
                                  lm.model.cfg.horizon * spec.horizon_multiplier);
    const std::string json = report.to_json();
    std::printf("%s\n", json.c_str());
    if (!out.empty()) {
        std::ofstream f(out);
        if (!f) throw IoError("cannot write '" + out + "'");
        f << json << "\n";
        if (!f) throw IoError("write failed: '" + out + "'");
    }
    return kExitOk;
}

int cmd_forecast(const std::string& ckpt, const std::string& data_path, std::size_t samples,
                 std::uint64_t seed, const std::string& out_dir, bool plot) {
    if (samples == 0) throw ContractError("forecast: --samples must be >= 1");
    LoadedModel lm = load_model(ckpt);
    SeriesFrame frame = load_csv(data_path);
    check_compat(lm.model, frame);
    const std::size_t k = lm.model.cfg.horizon;
    if (frame.steps < lm.model.cfg.context_len + k) {
        throw CoverageError("need at least context_len + horizon = " +
                            std::to_string(lm.model.cfg.context_len + k) + " steps, data has " +
                            std::to_string(frame.steps));
    }

    // hold out the last horizon as ground truth
    SeriesFrame history = frame;
    history.steps -= k;
    history.values.resize(history.steps * history.dims);
    history.observed.resize(history.steps * history.dims);

    Rng rng(seed);
    ForecastSamples fc = lm.model.forecast(history, samples, rng);

    const std::vector<double> probs{0.05, 0.25, 0.5, 0.75, 0.95};
    std::vector<QuantileRow> rows;
    for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t d = 0; d < frame.dims; ++d) {
            std::vector<double> draws(samples);
            for (std::size_t i = 0; i < samples; ++i) draws[i] = fc.samples.at({i, t, d});
            const auto q = sample_quantiles(std::move(draws), probs);
            rows.push_back({t, d, q[0], q[1], q[2], q[3], q[4], frame.value(history.steps + t, d)});
        }
    }

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory '" + out_dir + "'");
    const std::string csv = out_dir + "/forecast.csv";
    save_quantile_csv(csv, rows);
    std::printf("wrote %s (%zu rows)\n", csv.c_str(), rows.size());
    if (plot) {
        for (std::size_t d = 0; d < frame.dims; ++d) {
            const std::string path = out_dir + "/forecast_s" + std::to_string(d) + ".svg";
            std::ofstream f(path);
            if (!f) throw IoError("cannot write '" + path + "'");
            f << render_band_svg(rows, d);
            if (!f) throw IoError("write failed: '" + path + "'");
            std::printf("wrote %s\n", path.c_str());
        }
    }
    return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& param,
              const std::vector<std::string>& values) {
    if (values.empty()) throw ContractError("sweep: need at least one --values entry");
    RunConfig base = parse_run_config(config_path);
    SeriesFrame frame = load_csv(base.data);

    std::error_code ec;
    std::filesystem::create_directories(base.out_dir, ec);
    if (ec) throw IoError("cannot create output directory '" + base.out_dir + "'");
    const std::string csv_path = base.out_dir + "/sweep.csv";
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write '" + csv_path + "'");
    csv << "param,value,crps_sum,mse\n";

    for (const std::string& value : values) {
        RunConfig rc = base;
        try {
            if (param == "batch_size") {
                rc.train.batch_size = static_cast<std::size_t>(std::stoul(value));
            } else if (param == "lr") {
                rc.train.lr = std::stod(value);
            } else if (param == "layers") {
                const std::size_t n = static_cast<std::size_t>(std::stoul(value));
                rc.model.enc_layers = n;
                rc.model.dec_layers = n;
            } else if (param == "hidden_dim") {
                rc.model.hidden_dim = static_cast<std::size_t>(std::stoul(value));
            } else {
                throw ContractError("sweep: unknown --param '" + param +
                                    "' (batch_size, lr, layers, hidden_dim)");
            }
        } catch (const std::logic_error& e) {
            if (dynamic_cast<const ContractError*>(&e)) throw;
            throw ContractError("sweep: bad value '" + value + "' for " + param);
        }
        rc.train.validate();

        ManfModel model = ManfModel::init(bind_to_data(rc.model, rc.model_sets_dims, frame));
        TrainResult result = train(model, frame, rc.train);
        if (result.history.empty()) throw ContractError("sweep: config trains for 0 epochs");
        const auto& last = result.history.back();
        char buf[128];
        std::snprintf(buf, sizeof buf, "%s,%s,%.12g,%.12g\n", param.c_str(), value.c_str(),
                      last.crps_sum, last.mse);
        csv << buf;
        std::printf("%s=%s: crps_sum=%.6g mse=%.6g\n", param.c_str(), value.c_str(),
                    last.crps_sum, last.mse);
    }
    if (!csv) throw IoError("write failed: '" + csv_path + "'");
    std::printf("wrote %s\n", csv_path.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"manf: multi-scale attention flow forecaster"};
    app.require_subcommand(1);

    std::string synth_kind = "sinusoid-mix", synth_out = "synth.csv";
    std::size_t synth_dims = 8, synth_steps = 4096;
    double synth_noise = 0.1;
    std::uint64_t synth_seed = 1;
    auto* synth = app.add_subcommand("synth", "generate a synthetic series CSV");
    synth->add_option("--kind", synth_kind, "sinusoid-mix | random-walk | ar1");
    synth->add_option("--dims", synth_dims, "series count");
    synth->add_option("--steps", synth_steps, "time steps");
    synth->add_option("--noise", synth_noise, "noise level");
    synth->add_option("--seed", synth_seed, "rng seed");
    synth->add_option("--out", synth_out, "output CSV path");

    std::string train_config, train_resume;
    auto* trainc = app.add_subcommand("train", "train a model from a run config");
    trainc->add_option("config", train_config, "run config JSON")->required();
    trainc->add_option("--resume", train_resume, "checkpoint directory to resume from");

    std::string eval_ckpt, eval_data, eval_out;
    std::size_t eval_samples = 100, eval_hmult = 1;
    std::uint64_t eval_seed = 1, eval_cseed = 0;
    double eval_missing = 0.0;
    auto* evalc = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
    evalc->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
    evalc->add_option("--data", eval_data, "series CSV")->required();
    evalc->add_option("--samples", eval_samples, "draws per window");
    evalc->add_option("--seed", eval_seed, "sampling seed");
    evalc->add_option("--horizon-mult", eval_hmult, "forecast this multiple of the horizon");
    evalc->add_option("--missing", eval_missing, "fraction of cells to mask before forecasting");
    evalc->add_option("--corruption-seed", eval_cseed, "mask rng seed");
    evalc->add_option("--out", eval_out, "also write the report JSON here");

    std::string fc_ckpt, fc_data, fc_out = ".";
    std::size_t fc_samples = 100;
    std::uint64_t fc_seed = 1;
    bool fc_plot = false;
    auto* fcc = app.add_subcommand("forecast", "forecast the held-out tail, write quantiles");
    fcc->add_option("--checkpoint", fc_ckpt, "checkpoint directory")->required();
    fcc->add_option("--data", fc_data, "series CSV")->required();
    fcc->add_option("--samples", fc_samples, "draws");
    fcc->add_option("--seed", fc_seed, "sampling seed");
    fcc->add_option("--out-dir", fc_out, "output directory");
    fcc->add_flag("--plot", fc_plot, "emit one SVG per series");

    std::string sweep_config, sweep_param;
    std::vector<std::string> sweep_values;
    auto* sweepc = app.add_subcommand("sweep", "train/evaluate across one hyperparameter");
    sweepc->add_option("config", sweep_config, "run config JSON")->required();
    sweepc->add_option("--param", sweep_param, "batch_size | lr | layers | hidden_dim")
        ->required();
    sweepc->add_option("--values", sweep_values, "values to sweep")->required()->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(synth_kind, synth_dims, synth_steps, synth_noise, synth_seed,
                             synth_out);
        }
        if (trainc->parsed()) return cmd_train(train_config, train_resume);
        if (evalc->parsed()) {
            return cmd_evaluate(eval_ckpt, eval_data, eval_samples, eval_seed, eval_hmult,
                                eval_missing, eval_cseed, eval_out);
        }
        if (fcc->parsed()) {
            return cmd_forecast(fc_ckpt, fc_data, fc_samples, fc_seed, fc_out, fc_plot);
        }
        if (sweepc->parsed()) return cmd_sweep(sweep_config, sweep_param, sweep_values);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const DataMismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDataMismatch;
    } catch (const VersionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDataMismatch;
    } catch (const ChecksumError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDataMismatch;
    } catch (const CoverageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDataMismatch;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
