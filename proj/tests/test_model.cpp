#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "manf/model.hpp"

using namespace manf;

namespace {

ManfConfig tiny_config() {
    ManfConfig cfg;
    cfg.dims = 3;
    cfg.horizon = 4;
    cfg.context_len = 16;
    cfg.cov_dim = 4;
    cfg.hidden_dim = 8;
    cfg.heads = 2;
    cfg.enc_layers = 2;
    cfg.dec_layers = 2;
    cfg.flow_hidden = 8;
    cfg.dropout = 0.0;
    cfg.seed = 7;
    return cfg;
}

WindowBatch synth_batch(const ManfConfig& cfg, std::size_t batch, std::uint64_t seed) {
    auto frame = synth_generate(SynthKind::SinusoidMix, cfg.dims,
                                cfg.context_len + cfg.horizon + 64, 0.2, seed);
    Rng rng(seed + 1);
    return make_windows(frame, cfg.context_len, cfg.horizon, 1, &rng, batch);
}

}  // namespace

TEST_CASE("embed_inputs: zeros, shape, gradient") {
    auto cfg = tiny_config();
    auto model = ManfModel::init(cfg);
    Rng rng(31);

    Tensor values = Tensor::randn({10, cfg.dims}, rng);
    Tensor covs = Tensor::randn({10, cfg.cov_dim}, rng, 0.3);

    Tensor emb = model.embed_inputs(values, covs);
    CHECK(emb.shape() == Shape{10, cfg.hidden_dim});

    std::fill(model.embed_w.data(), model.embed_w.data() + model.embed_w.size(), 0.0);
    Tensor zero_emb = model.embed_inputs(values, covs);
    for (std::size_t i = 0; i < zero_emb.size(); ++i) CHECK(zero_emb.data()[i] == 0.0);

    CHECK_THROWS_AS(model.embed_inputs(values, Tensor::randn({10, cfg.cov_dim + 1}, rng)),
                    ShapeError);

    // finite-difference gradient through the embedding
    auto fresh = ManfModel::init(cfg);
    Tensor probe = Tensor::randn({10, cfg.hidden_dim}, rng);
    Tensor loss = sum(mul(fresh.embed_inputs(values, covs), probe));
    loss.backward();
    const double h = 1e-5;
    double max_rel = 0.0;
    for (Tensor* leaf : {&fresh.embed_w, &fresh.embed_b}) {
        for (std::size_t i = 0; i < leaf->size(); i += 3) {
            const double keep = leaf->data()[i];
            leaf->data()[i] = keep + h;
            const double up = sum(mul(fresh.embed_inputs(values, covs), probe)).item();
            leaf->data()[i] = keep - h;
            const double dn = sum(mul(fresh.embed_inputs(values, covs), probe)).item();
            leaf->data()[i] = keep;
            const double fd = (up - dn) / (2 * h);
            const double ad = leaf->grad()[i];
            max_rel = std::max(max_rel,
                               std::fabs(fd - ad) / std::max({std::fabs(fd), std::fabs(ad), 1e-7}));
        }
    }
    CHECK(max_rel <= 1e-4);
}

TEST_CASE("decode returns one state per layer with the right shape") {
    auto cfg = tiny_config();
    cfg.dec_layers = 3;
    auto model = ManfModel::init(cfg);
    Rng rng(37);
    Tensor h_enc = Tensor::randn({cfg.context_len, cfg.hidden_dim}, rng);
    Tensor fut_cov = Tensor::randn({cfg.horizon, cfg.cov_dim}, rng, 0.3);
    auto states = model.decode(fut_cov, h_enc);
    CHECK(states.size() == 3);
    for (auto& s : states) CHECK(s.shape() == Shape{cfg.horizon, cfg.hidden_dim});
}

TEST_CASE("decode symmetry: identical covariate and PE rows give identical states") {
    auto cfg = tiny_config();
    auto model = ManfModel::init(cfg);
    Rng rng(41);
    Tensor h_enc = Tensor::randn({cfg.context_len, cfg.hidden_dim}, rng);
    Tensor row = Tensor::randn({1, cfg.cov_dim}, rng, 0.3);
    std::vector<double> reps;
    for (std::size_t t = 0; t < cfg.horizon; ++t) {
        reps.insert(reps.end(), row.data(), row.data() + cfg.cov_dim);
    }
    Tensor fut_cov = Tensor::from_vector({cfg.horizon, cfg.cov_dim}, reps);
    Tensor flat_pe = Tensor::ones({cfg.horizon, cfg.hidden_dim});  // identical PE rows, forced
    auto states = model.decode(fut_cov, h_enc, {}, &flat_pe);
    for (auto& s : states) {
        for (std::size_t t = 1; t < cfg.horizon; ++t) {
            for (std::size_t c = 0; c < cfg.hidden_dim; ++c) {
                CHECK(std::fabs(s.at({t, c}) - s.at({0, c})) <= 1e-12);
            }
        }
    }
}

TEST_CASE("decode: golden pinned digest for a fixed seed") {
    auto cfg = tiny_config();
    auto model = ManfModel::init(cfg);
    Rng rng(1234);
    Tensor h_enc = Tensor::randn({cfg.context_len, cfg.hidden_dim}, rng);
    Tensor fut_cov = Tensor::randn({cfg.horizon, cfg.cov_dim}, rng, 0.3);
    auto states = model.decode(fut_cov, h_enc);
    double digest = 0.0;
    for (auto& s : states) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            digest += s.data()[i] * static_cast<double>((i % 7) + 1);
        }
    }
    CAPTURE(digest);
    CAPTURE(states.back().data()[0]);
    CHECK(digest == doctest::Approx(-13.871562461487303).epsilon(1e-9));
    CHECK(states.back().data()[0] == doctest::Approx(0.711789482267714).epsilon(1e-9));
}

TEST_CASE("nll of the identity-initialized flow matches the analytic N(0,I) value") {
    auto cfg = tiny_config();
    auto model = ManfModel::init(cfg);
    Rng rng(43);
    const std::size_t b = 1000;
    WindowBatch batch = synth_batch(cfg, b, 5);
    // replace the futures with exact standard-normal draws
    batch.future = Tensor::randn({b, cfg.horizon, cfg.dims}, rng);

    NoGradGuard guard;
    const double loss = model.nll(batch, false).item();
    const double kd = static_cast<double>(cfg.horizon * cfg.dims);
    const double expect = kd / 2.0 * std::log(2.0 * std::numbers::pi) + kd / 2.0;
    CHECK(loss == doctest::Approx(expect).epsilon(0.05));
}

TEST_CASE("nll is invariant under batch duplication") {
    auto cfg = tiny_config();
    auto model = ManfModel::init(cfg);
    Rng rng(47);
    // make the flow non-trivial so the check is not vacuous
    for (auto& c : model.flow.couplings) {
        for (Tensor* p : c.params()) {
            for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += 0.1 * rng.normal();
        }
    }
    WindowBatch batch = synth_batch(cfg, 4, 11);
    WindowBatch doubled = batch;
    doubled.batch = 8;
    doubled.starts.insert(doubled.starts.end(), batch.starts.begin(), batch.starts.end());
    auto dup = [](const Tensor& t) {
        std::vector<double> v(t.data(), t.data() + t.size());
        v.insert(v.end(), t.data(), t.data() + t.size());
        Shape s = t.shape();
        s[0] *= 2;
        return Tensor::from_vector(s, std::move(v));
    };
    doubled.context = dup(batch.context);
    doubled.context_covs = dup(batch.context_covs);
    doubled.future_covs = dup(batch.future_covs);
    doubled.future = dup(batch.future);
    doubled.means = dup(batch.means);

    NoGradGuard guard;
    const double a = model.nll(batch, true).item();
    const double bb = model.nll(doubled, true).item();
    CHECK(bb == doctest::Approx(a).epsilon(1e-12));
}

TEST_CASE("end-to-end nll gradient matches finite differences") {
    auto cfg = tiny_config();
    cfg.context_len = 8;
    auto model = ManfModel::init(cfg);
    Rng rng(53);
    for (auto& c : model.flow.couplings) {
        for (Tensor* p : c.params()) {
            for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += 0.05 * rng.normal();
        }
    }
    WindowBatch batch = synth_batch(cfg, 3, 13);

    for (Tensor* p : model.params()) p->zero_grad();
    Tensor loss = model.nll(batch, true);
    loss.backward();

    const double h = 1e-5;
    double max_rel = 0.0;
    std::string worst;
    for (auto& [name, leaf] : model.named_params()) {
        const std::size_t step = std::max<std::size_t>(1, leaf->size() / 5);
        for (std::size_t i = 0; i < leaf->size(); i += step) {
            const double keep = leaf->data()[i];
            leaf->data()[i] = keep + h;
            const double up = model.nll(batch, true).item();
            leaf->data()[i] = keep - h;
            const double dn = model.nll(batch, true).item();
            leaf->data()[i] = keep;
            const double fd = (up - dn) / (2 * h);
            const double ad = leaf->has_grad() ? leaf->grad()[i] : 0.0;
            const double rel =
                std::fabs(fd - ad) / std::max({std::fabs(fd), std::fabs(ad), 1e-6});
            if (rel > max_rel) {
                max_rel = rel;
                worst = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    CAPTURE(worst);
    CHECK(max_rel <= 1e-3);
}

TEST_CASE("forecast is non-autoregressive: one encoder and one decoder pass") {
    for (std::size_t k : {24UL, 48UL}) {
        ManfConfig cfg;
        cfg.dims = 2;
        cfg.horizon = k;
        cfg.context_len = 4 * k;
        cfg.hidden_dim = 8;
        cfg.heads = 2;
        cfg.enc_layers = 2;
        cfg.dec_layers = 2;
        cfg.flow_hidden = 8;
        cfg.seed = 3;
        auto model = ManfModel::init(cfg);
        auto frame = synth_generate(SynthKind::SinusoidMix, 2, cfg.context_len + 8, 0.1, 19);
        Rng rng(23);
        auto fc = model.forecast(frame, 100, rng);
        CHECK(model.encoder_calls == 1);
        CHECK(model.decoder_calls == 1);
        CHECK(model.flow_draws == 100);
        CHECK(fc.samples.shape() == Shape{100, k, 2});
        CHECK(fc.samples.all_finite());
    }
}

TEST_CASE("identity flow forecasts are mean-rescaled base draws") {
    auto cfg = tiny_config();
    auto model = ManfModel::init(cfg);
    WindowBatch batch = synth_batch(cfg, 2, 29);
    const std::size_t n = 8;
    Rng rng(77);
    auto fc = model.forecast_window(batch, 1, n, rng);

    Rng rng2(77);
    Tensor z = Tensor::randn({n * cfg.horizon, cfg.dims}, rng2);
    // each BN bijection contributes a sqrt(1 + eps) factor at identity
    const double bn = std::pow(std::sqrt(1.0 + 1e-5), static_cast<double>(cfg.dec_layers));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < cfg.horizon; ++t) {
            for (std::size_t d = 0; d < cfg.dims; ++d) {
                const double expect =
                    z.at({i * cfg.horizon + t, d}) * bn * batch.means.at({1, d});
                CHECK(fc.samples.at({i, t, d}) == doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("scale equivariance of forecasts") {
    auto cfg = tiny_config();
    auto model = ManfModel::init(cfg);
    for (auto& c : model.flow.couplings) {
        Rng prng(99);
        for (Tensor* p : c.params()) {
            for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += 0.05 * prng.normal();
        }
    }
    auto frame = synth_generate(SynthKind::SinusoidMix, cfg.dims, cfg.context_len + 4, 0.2, 31);
    Rng rng(61);
    auto base = model.forecast(frame, 16, rng);

    for (double c : {0.1, 10.0, 1000.0}) {
        SeriesFrame scaled = frame;
        for (auto& v : scaled.values) v *= c;
        Rng rng_c(61);
        auto fc = model.forecast(scaled, 16, rng_c);
        for (std::size_t i = 0; i < fc.samples.size(); ++i) {
            const double expect = c * base.samples.data()[i];
            const double got = fc.samples.data()[i];
            CHECK(std::fabs(got - expect) <=
                  1e-12 * std::max({std::fabs(expect), std::fabs(got), 1e-9}));
        }
    }
}

TEST_CASE("forecast contract errors") {
    auto cfg = tiny_config();
    auto model = ManfModel::init(cfg);
    WindowBatch batch = synth_batch(cfg, 2, 37);
    Rng rng(1);
    CHECK_THROWS_AS(model.forecast_window(batch, 0, 0, rng), ContractError);
    CHECK_THROWS_AS(model.forecast_window(batch, 5, 4, rng), IndexError);
    auto short_frame = synth_generate(SynthKind::SinusoidMix, cfg.dims, cfg.context_len - 4, 0.1, 3);
    CHECK_THROWS_AS(model.forecast(short_frame, 4, rng), CoverageError);
    auto wrong_dims = synth_generate(SynthKind::SinusoidMix, cfg.dims + 1, 64, 0.1, 3);
    CHECK_THROWS_AS(model.forecast(wrong_dims, 4, rng), DataMismatchError);
}

TEST_CASE("config json round trip and validation") {
    ManfConfig cfg = tiny_config();
    cfg.scales = {8, 12, 16};
    cfg.enc_layers = 3;
    auto back = ManfConfig::from_json(cfg.to_json());
    CHECK(back.dims == cfg.dims);
    CHECK(back.horizon == cfg.horizon);
    CHECK(back.scales == cfg.scales);
    CHECK(back.conditioning == cfg.conditioning);
    CHECK(back.seed == cfg.seed);

    CHECK_THROWS_AS(ManfConfig::from_json("{\"dims\": 2, \"bogus\": 1}"), FormatError);
    ManfConfig bad = tiny_config();
    bad.hidden_dim = 9;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = tiny_config();
    bad.scales = {4};
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("sample quantiles") {
    auto q = sample_quantiles({4.0, 1.0, 3.0, 2.0}, {0.0, 0.5, 1.0});
    CHECK(q[0] == 1.0);
    CHECK(q[1] == doctest::Approx(2.5));
    CHECK(q[2] == 4.0);
    auto single = sample_quantiles({2.5}, {0.05, 0.5, 0.95});
    for (double v : single) CHECK(v == 2.5);
    CHECK_THROWS_AS(sample_quantiles({}, {0.5}), ContractError);
}
