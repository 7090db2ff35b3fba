#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "manf/svg.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kWork = "/tmp/manf_cli_test";

std::string cli_path() {
    if (const char* p = std::getenv("MANF_CLI_PATH")) return p;
#ifdef MANF_CLI_PATH
    return MANF_CLI_PATH;
#else
    FAIL("MANF_CLI_PATH must point at the manf binary");
    return "";
#endif
}

int run(const std::string& args, const std::string& log = "/dev/null") {
    const std::string cmd = cli_path() + " " + args + " > " + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::vector<std::string> lines_of(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

void write_config(const std::string& path, const std::string& data, const std::string& out_dir,
                  std::size_t epochs, std::uint64_t seed = 5) {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["data"] = data;
    j["out_dir"] = out_dir;
    j["model"] = {{"horizon", 8},     {"context_len", 32}, {"hidden_dim", 8},
                  {"heads", 2},       {"enc_layers", 2},   {"dec_layers", 2},
                  {"flow_hidden", 8}, {"dropout", 0.0},    {"seed", 3}};
    j["train"] = {{"epochs", epochs},     {"batch_size", 8}, {"batches_per_epoch", 5},
                  {"eval_samples", 20},   {"seed", seed}};
    std::ofstream out(path);
    out << j.dump(2);
}

// minimal well-formedness check: every opened tag closes in order
bool xml_well_formed(const std::string& text) {
    std::vector<std::string> stack;
    std::size_t i = 0;
    while ((i = text.find('<', i)) != std::string::npos) {
        const std::size_t end = text.find('>', i);
        if (end == std::string::npos) return false;
        std::string tag = text.substr(i + 1, end - i - 1);
        i = end + 1;
        if (tag.empty()) return false;
        if (tag.front() == '?' || tag.front() == '!') continue;
        if (tag.back() == '/') continue;  // self-closing
        if (tag.front() == '/') {
            if (stack.empty() || stack.back() != tag.substr(1)) return false;
            stack.pop_back();
        } else {
            stack.push_back(tag.substr(0, tag.find_first_of(" \t\n")));
        }
    }
    return stack.empty();
}

struct Workspace {
    Workspace() {
        fs::remove_all(kWork);
        fs::create_directories(kWork);
    }
};

double last_history_loss(const std::string& path) {
    auto lines = lines_of(path);
    REQUIRE(lines.size() >= 2);
    const std::string& row = lines.back();
    const auto c1 = row.find(',');
    const auto c2 = row.find(',', c1 + 1);
    return std::stod(row.substr(c1 + 1, c2 - c1 - 1));
}

}  // namespace

TEST_CASE("cli end to end") {
    Workspace ws;
    const std::string data = kWork + "/series.csv";

    SUBCASE("synth writes the expected shape, deterministically") {
        CHECK(run("synth --dims 8 --steps 64 --seed 7 --out " + kWork + "/a.csv") == 0);
        CHECK(run("synth --dims 8 --steps 64 --seed 7 --out " + kWork + "/b.csv") == 0);
        CHECK(slurp(kWork + "/a.csv") == slurp(kWork + "/b.csv"));
        auto lines = lines_of(kWork + "/a.csv");
        CHECK(lines.size() == 65);  // header + 64 rows
        for (const auto& line : lines) {
            CHECK(std::count(line.begin(), line.end(), ',') == 8);  // timestamp + 8 series
        }
    }

    SUBCASE("usage errors exit 64") {
        CHECK(run("synth --dims 0") == 64);
        CHECK(run("no-such-command") == 64);
        CHECK(run("sweep /dev/null --param nope --values 1") != 0);
    }

    SUBCASE("train, evaluate, forecast, sweep") {
        REQUIRE(run("synth --dims 3 --steps 400 --seed 7 --out " + data) == 0);
        const std::string cfg = kWork + "/run.json";
        write_config(cfg, data, kWork + "/run", 2);
        REQUIRE(run("train " + cfg) == 0);
        CHECK(fs::exists(kWork + "/run/checkpoint/manifest.json"));
        CHECK(fs::exists(kWork + "/run/checkpoint/params.bin"));
        auto history = lines_of(kWork + "/run/history.csv");
        REQUIRE(history.size() == 3);
        CHECK(history[0] == "epoch,loss,crps_sum,mse");

        const std::string ckpt = kWork + "/run/checkpoint";

        SUBCASE("report JSON has exactly the score schema") {
            REQUIRE(run("evaluate --checkpoint " + ckpt + " --data " + data +
                        " --samples 20 --out " + kWork + "/report.json") == 0);
            auto j = nlohmann::json::parse(slurp(kWork + "/report.json"));
            std::vector<std::string> keys;
            for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
            std::sort(keys.begin(), keys.end());
            CHECK(keys == std::vector<std::string>{"crps_sum", "mse", "n_samples",
                                                   "per_series_crps", "windows"});
            CHECK(j["per_series_crps"].size() == 3);
        }

        SUBCASE("--missing 0 equals no flag") {
            REQUIRE(run("evaluate --checkpoint " + ckpt + " --data " + data +
                        " --samples 20 --out " + kWork + "/r0.json") == 0);
            REQUIRE(run("evaluate --checkpoint " + ckpt + " --data " + data +
                        " --samples 20 --missing 0 --out " + kWork + "/r1.json") == 0);
            CHECK(slurp(kWork + "/r0.json") == slurp(kWork + "/r1.json"));
        }

        SUBCASE("corrupted runs finish with finite scores") {
            REQUIRE(run("evaluate --checkpoint " + ckpt + " --data " + data +
                        " --samples 20 --missing 0.3 --horizon-mult 2 --out " + kWork +
                        "/rc.json") == 0);
            auto j = nlohmann::json::parse(slurp(kWork + "/rc.json"));
            CHECK(std::isfinite(j["crps_sum"].get<double>()));
            CHECK(std::isfinite(j["mse"].get<double>()));
        }

        SUBCASE("dimension mismatch exits 65") {
            const std::string other = kWork + "/other.csv";
            REQUIRE(run("synth --dims 2 --steps 400 --seed 7 --out " + other) == 0);
            CHECK(run("evaluate --checkpoint " + ckpt + " --data " + other + " --samples 5") ==
                  65);
        }

        SUBCASE("forecast quantiles are ordered; SVG is well-formed") {
            REQUIRE(run("forecast --checkpoint " + ckpt + " --data " + data +
                        " --samples 30 --out-dir " + kWork + "/fc --plot") == 0);
            auto rows = manf::load_quantile_csv(kWork + "/fc/forecast.csv");
            CHECK(rows.size() == 8 * 3);
            for (const auto& r : rows) {
                CHECK(r.q05 <= r.q25);
                CHECK(r.q25 <= r.q50);
                CHECK(r.q50 <= r.q75);
                CHECK(r.q75 <= r.q95);
            }
            for (int d = 0; d < 3; ++d) {
                const std::string svg = slurp(kWork + "/fc/forecast_s" + std::to_string(d) +
                                              ".svg");
                CHECK(xml_well_formed(svg));
                CHECK(svg.find("polygon") != std::string::npos);
                // each band polygon walks the horizon out and back
                const auto first = svg.find("points=\"");
                const auto close = svg.find('"', first + 8);
                const std::string pts = svg.substr(first + 8, close - first - 8);
                CHECK(std::count(pts.begin(), pts.end(), ' ') + 1 == 2 * 8);
            }
        }

        SUBCASE("forecast with one sample collapses the quantiles") {
            REQUIRE(run("forecast --checkpoint " + ckpt + " --data " + data +
                        " --samples 1 --out-dir " + kWork + "/fc1") == 0);
            for (const auto& r : manf::load_quantile_csv(kWork + "/fc1/forecast.csv")) {
                CHECK(r.q05 == r.q50);
                CHECK(r.q95 == r.q50);
            }
        }

        SUBCASE("single-value sweep reduces to train + evaluate") {
            const std::string scfg = kWork + "/sweep.json";
            write_config(scfg, data, kWork + "/sweep_out", 2);
            REQUIRE(run("sweep " + scfg + " --param lr --values 0.001") == 0);
            auto lines = lines_of(kWork + "/sweep_out/sweep.csv");
            REQUIRE(lines.size() == 2);
            CHECK(lines[0] == "param,value,crps_sum,mse");
            // lr 0.001 is the config default, so the row must match the train run
            std::stringstream row(lines[1]);
            std::string param, value, crps, mse;
            std::getline(row, param, ',');
            std::getline(row, value, ',');
            std::getline(row, crps, ',');
            std::getline(row, mse, ',');
            auto hist = lines_of(kWork + "/run/history.csv");
            CHECK(hist.back().find(crps) != std::string::npos);
            CHECK(hist.back().find(mse) != std::string::npos);
        }

        SUBCASE("sweep emits one row per value, deterministically") {
            const std::string scfg = kWork + "/sweep2.json";
            write_config(scfg, data, kWork + "/sweep2_out", 1);
            REQUIRE(run("sweep " + scfg + " --param hidden_dim --values 4,8") == 0);
            auto first = slurp(kWork + "/sweep2_out/sweep.csv");
            CHECK(lines_of(kWork + "/sweep2_out/sweep.csv").size() == 3);
            REQUIRE(run("sweep " + scfg + " --param hidden_dim --values 4,8") == 0);
            CHECK(slurp(kWork + "/sweep2_out/sweep.csv") == first);
        }

        SUBCASE("resume reproduces the uninterrupted next-epoch loss") {
            const std::string cfg1 = kWork + "/one.json";
            const std::string cfg2 = kWork + "/two.json";
            write_config(cfg1, data, kWork + "/one", 1);
            write_config(cfg2, data, kWork + "/two", 2);
            REQUIRE(run("train " + cfg1) == 0);
            REQUIRE(run("train " + cfg2 + " --resume " + kWork + "/one/checkpoint") == 0);
            const double resumed = last_history_loss(kWork + "/two/history.csv");
            const double full = last_history_loss(kWork + "/run/history.csv");
            CHECK(resumed == doctest::Approx(full).epsilon(1e-9));
        }
    }

    SUBCASE("config errors") {
        std::ofstream(kWork + "/bad.json") << "{\"version\": 1, \"data\": \"x\", \"oops\": 1}";
        CHECK(run("train " + kWork + "/bad.json") == 64);
        std::ofstream(kWork + "/v9.json") << "{\"version\": 9, \"data\": \"x\"}";
        CHECK(run("train " + kWork + "/v9.json") == 64);
        CHECK(run("train " + kWork + "/absent.json") == 2);
        std::ofstream(kWork + "/nodata.json") << "{\"version\": 1, \"data\": \"/tmp/absent.csv\"}";
        CHECK(run("train " + kWork + "/nodata.json") == 2);
    }
}
