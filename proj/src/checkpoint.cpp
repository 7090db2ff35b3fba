#include "manf/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace manf {

namespace {

std::uint64_t fnv1a(const char* bytes, std::size_t n) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(bytes[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

void write_checkpoint(const std::string& dir, const std::string& config_json,
                      const std::vector<std::pair<std::string, const std::vector<double>*>>& arrays,
                      const std::string& extra_json) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory '" + dir + "'");

    std::vector<double> blob;
    nlohmann::ordered_json index = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for (const auto& [name, data] : arrays) {
        index.push_back({{"name", name}, {"offset", offset}, {"count", data->size()}});
        blob.insert(blob.end(), data->begin(), data->end());
        offset += data->size();
    }
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        for (std::size_t j = i + 1; j < arrays.size(); ++j) {
            if (arrays[i].first == arrays[j].first) {
                throw ContractError("checkpoint: duplicate tensor name '" + arrays[i].first + "'");
            }
        }
    }

    const char* bytes = reinterpret_cast<const char*>(blob.data());
    const std::size_t nbytes = blob.size() * sizeof(double);

    nlohmann::ordered_json manifest;
    manifest["version"] = kCheckpointVersion;
    manifest["dtype"] = "f64le";
    manifest["config"] = nlohmann::json::parse(config_json);
    manifest["extra"] = nlohmann::json::parse(extra_json);
    manifest["checksum"] = fnv1a(bytes, nbytes);
    manifest["tensors"] = index;

    {
        std::ofstream bin(dir + "/params.bin", std::ios::binary);
        if (!bin) throw IoError("cannot write '" + dir + "/params.bin'");
        bin.write(bytes, static_cast<std::streamsize>(nbytes));
        if (!bin) throw IoError("write failed: '" + dir + "/params.bin'");
    }
    {
        std::ofstream out(dir + "/manifest.json");
        if (!out) throw IoError("cannot write '" + dir + "/manifest.json'");
        out << manifest.dump(2) << "\n";
        if (!out) throw IoError("write failed: '" + dir + "/manifest.json'");
    }
}

Checkpoint read_checkpoint(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw IoError("cannot open '" + dir + "/manifest.json'");
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest: " + std::string(e.what()));
    }
    const int version = manifest.at("version").get<int>();
    if (version != kCheckpointVersion) {
        throw VersionError("checkpoint version " + std::to_string(version) +
                           " is incompatible with " + std::to_string(kCheckpointVersion));
    }

    std::ifstream bin(dir + "/params.bin", std::ios::binary | std::ios::ate);
    if (!bin) throw IoError("cannot open '" + dir + "/params.bin'");
    const std::size_t nbytes = static_cast<std::size_t>(bin.tellg());
    if (nbytes % sizeof(double) != 0) throw FormatError("checkpoint blob is not a whole number of f64s");
    std::vector<double> blob(nbytes / sizeof(double));
    bin.seekg(0);
    bin.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(nbytes));
    if (!bin) throw IoError("read failed: '" + dir + "/params.bin'");

    const std::uint64_t expect = manifest.at("checksum").get<std::uint64_t>();
    const std::uint64_t got = fnv1a(reinterpret_cast<const char*>(blob.data()), nbytes);
    if (expect != got) throw ChecksumError("checkpoint blob checksum mismatch");

    Checkpoint ckpt;
    ckpt.config_json = manifest.at("config").dump();
    ckpt.extra_json = manifest.at("extra").dump();
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t count = entry.at("count").get<std::size_t>();
        if (offset + count > blob.size()) throw FormatError("tensor '" + name + "' exceeds blob");
        if (ckpt.arrays.count(name)) throw FormatError("tensor '" + name + "' listed twice");
        ckpt.arrays[name] = std::vector<double>(blob.begin() + offset,
                                                blob.begin() + offset + count);
    }
    return ckpt;
}

AdamState AdamState::init(const std::vector<Tensor*>& params) {
    AdamState s;
    for (const Tensor* p : params) {
        s.m.emplace_back(p->size(), 0.0);
        s.v.emplace_back(p->size(), 0.0);
    }
    return s;
}

void save_model(const std::string& dir, ManfModel& model, const AdamState* adam, const Rng* rng,
                std::size_t epochs_done) {
    std::vector<std::pair<std::string, const std::vector<double>*>> arrays;
    for (auto& [name, p] : model.named_params()) arrays.emplace_back(name, &p->vec());
    for (auto& [name, s] : model.named_state()) arrays.emplace_back(name, s);

    std::vector<std::vector<double>> extra_arrays;
    nlohmann::ordered_json extra;
    extra["epochs_done"] = epochs_done;
    extra["has_train_state"] = adam != nullptr;
    if (adam) {
        extra["adam_step"] = adam->step;
        for (std::size_t i = 0; i < adam->m.size(); ++i) {
            arrays.emplace_back("adam.m." + std::to_string(i), &adam->m[i]);
            arrays.emplace_back("adam.v." + std::to_string(i), &adam->v[i]);
        }
    }
    std::vector<double> rng_words;
    if (rng) {
        for (std::uint64_t w : rng->state()) rng_words.push_back(std::bit_cast<double>(w));
        arrays.emplace_back("rng.state", &rng_words);
    }
    write_checkpoint(dir, model.cfg.to_json(), arrays, extra.dump());
}

LoadedModel load_model(const std::string& dir) {
    Checkpoint ckpt = read_checkpoint(dir);
    LoadedModel out;
    out.model = ManfModel::init(ManfConfig::from_json(ckpt.config_json));

    for (auto& [name, p] : out.model.named_params()) {
        auto it = ckpt.arrays.find(name);
        if (it == ckpt.arrays.end()) {
            throw DataMismatchError("checkpoint is missing tensor '" + name + "'");
        }
        if (it->second.size() != p->size()) {
            throw DataMismatchError("tensor '" + name + "' has " +
                                    std::to_string(it->second.size()) + " values, expected " +
                                    std::to_string(p->size()));
        }
        p->vec() = it->second;
    }
    for (auto& [name, s] : out.model.named_state()) {
        auto it = ckpt.arrays.find(name);
        if (it == ckpt.arrays.end()) {
            throw DataMismatchError("checkpoint is missing state '" + name + "'");
        }
        *s = it->second;
    }

    nlohmann::json extra = nlohmann::json::parse(ckpt.extra_json);
    out.epochs_done = extra.value("epochs_done", std::size_t{0});
    out.has_train_state = extra.value("has_train_state", false);
    if (out.has_train_state) {
        out.adam = AdamState::init(out.model.params());
        out.adam.step = extra.at("adam_step").get<std::size_t>();
        for (std::size_t i = 0; i < out.adam.m.size(); ++i) {
            out.adam.m[i] = ckpt.arrays.at("adam.m." + std::to_string(i));
            out.adam.v[i] = ckpt.arrays.at("adam.v." + std::to_string(i));
        }
    }
    if (ckpt.arrays.count("rng.state")) {
        const auto& words = ckpt.arrays.at("rng.state");
        std::array<std::uint64_t, 4> state{};
        if (words.size() != state.size()) throw FormatError("rng state has wrong length");
        for (std::size_t i = 0; i < state.size(); ++i) {
            state[i] = std::bit_cast<std::uint64_t>(words[i]);
        }
        out.rng.set_state(state);
    }
    return out;
}

}  // namespace manf
