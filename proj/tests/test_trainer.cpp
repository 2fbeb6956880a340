#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pfr/checkpoint.hpp"
#include "pfr/sampler.hpp"
#include "pfr/trainer.hpp"
#include "test_util.hpp"

using namespace pfr;

namespace {

struct TrainRig {
    DenoiserConfig cfg = toy_denoiser_config();
    NoiseSchedule sched = default_schedule();
    IdentityDataset data = make_synthetic_dataset(4, 3, 20, 77);

    BaseTrainConfig base_cfg() const {
        BaseTrainConfig c;
        c.steps = 40;
        c.crop_size = cfg.image_size;
        c.seed = 3;
        return c;
    }
};

// Mean diffusion loss over a fixed probe batch.
double probe_loss(Denoiser<float>& model, const IdentityDataset& data,
                  const NoiseSchedule& sched, int crop, uint64_t seed) {
    RandomStream rng(seed);
    const PromptTokens prompt = base_prompt();
    double total = 0.0;
    const int n = 6;
    for (int i = 0; i < n; ++i) {
        ImageBuffer img = sample_training_example(data, crop, 0.0, rng);
        auto rec = sample_degradation(DegradationLevel::heavy, rng, 0.0);
        ImageBuffer lq = degrade(img, rec);
        auto z0 = encode_latent<float>(img);
        const int t = static_cast<int>(rng.uniform_int(sched.T));
        auto eps = randn_like(z0, rng);
        ad::Graph<float> g;
        Fwd<float> f(g, false);
        auto l = loss_diff_node(f, model, z0, t, eps, sched, prompt, &lq, nullptr,
                                nullptr);
        total += l->value[0];
    }
    return total / n;
}

}  // namespace

TEST_CASE("base training reduces held-out diffusion loss") {
    TrainRig rig;
    Denoiser<float> model(rig.cfg, 1);
    const double before = probe_loss(model, rig.data, rig.sched, rig.cfg.image_size, 99);
    auto cfg = rig.base_cfg();
    cfg.steps = 120;
    cfg.lr = 2e-3;
    int log_count = 0;
    train_base(model, rig.data, cfg, rig.sched,
               [&](const TrainLogRecord&) { log_count++; });
    REQUIRE(log_count == cfg.steps);
    const double after = probe_loss(model, rig.data, rig.sched, rig.cfg.image_size, 99);
    REQUIRE(after < before);
}

TEST_CASE("base training is deterministic given the seed") {
    TrainRig rig;
    Denoiser<float> a(rig.cfg, 1);
    Denoiser<float> b(rig.cfg, 1);
    auto cfg = rig.base_cfg();
    std::vector<double> la, lb;
    train_base(a, rig.data, cfg, rig.sched,
               [&](const TrainLogRecord& r) { la.push_back(r.l_diff); });
    train_base(b, rig.data, cfg, rig.sched,
               [&](const TrainLogRecord& r) { lb.push_back(r.l_diff); });
    REQUIRE(la == lb);
    REQUIRE(base_weights_sha256(a) == base_weights_sha256(b));
}

TEST_CASE("p_hq = 1 feeds clean inputs through") {
    // All records sampled at p_hq = 1 mark passthrough; degrade() then
    // returns the input unchanged.
    RandomStream rng(5);
    for (int i = 0; i < 50; ++i) {
        auto rec = sample_degradation(DegradationLevel::heavy, rng, 1.0);
        REQUIRE(rec.passthrough_hq);
    }
}

TEST_CASE("empty dataset is rejected") {
    TrainRig rig;
    Denoiser<float> model(rig.cfg, 1);
    IdentityDataset empty;
    auto cfg = rig.base_cfg();
    REQUIRE_THROWS_AS(train_base(model, empty, cfg, rig.sched), EmptyDataset);
}

TEST_CASE("personalization freezes the base bit-exactly and trains adapters") {
    TrainRig rig;
    Denoiser<float> model(rig.cfg, 2);
    testutil::randomize_output_conv(model, 22);

    ReferenceSet refs = make_reference_set(rig.data.identities[0], 3);
    PersonalizeConfig pc;
    pc.iterations = 8;
    pc.batch = 1;
    pc.crop_size = rig.cfg.image_size;
    pc.seed = 17;

    const std::string before = base_weights_sha256(model);
    std::vector<TrainLogRecord> log;
    auto state = personalize(model, refs, {}, pc, rig.sched,
                             [&](const TrainLogRecord& r) { log.push_back(r); });
    REQUIRE(base_weights_sha256(model) == before);
    REQUIRE(log.size() == 8);
    REQUIRE(log[0].l_diff > 0.0);
    REQUIRE(log[0].l_gen > 0.0);

    // Gains moved off zero.
    double gnorm = 0.0;
    for (int i = 0; i < 3; ++i) {
        const auto& g = state.params.at("pb" + std::to_string(i) + ".gamma").value;
        for (size_t k = 0; k < g.size(); ++k) gnorm += std::abs(g[k]);
    }
    REQUIRE(gnorm > 0.0);
    REQUIRE(state.ref_latents.size() == 3);

    ReferenceSet empty;
    REQUIRE_THROWS_AS(personalize(model, empty, {}, pc, rig.sched), EmptyDataset);
}

TEST_CASE("zero-iteration personalization restores exactly like the base model") {
    TrainRig rig;
    Denoiser<float> model(rig.cfg, 4);
    ReferenceSet refs = make_reference_set(rig.data.identities[1], 2);
    PersonalizeConfig pc;
    pc.iterations = 0;
    pc.crop_size = rig.cfg.image_size;
    auto state = personalize(model, refs, {}, pc, rig.sched);

    RandomStream rng(6);
    ImageBuffer lq = random_image(rig.cfg.image_size, rig.cfg.image_size, rng);
    SamplerConfig sc;
    sc.num_steps = 5;
    sc.seed = 7;

    // The personalized run consumes extra reference noise, so align the
    // streams by comparing per-step predictions instead of full sampling:
    // a zero-gain state must predict bit-identically to the base.
    auto z = encode_latent<float>(lq);
    for (int t : {5, 250, 700}) {
        RandomStream nrng(100 + t);
        auto feats = model.extract_reference_features(lq, t, nrng, rig.sched);
        auto base_pred = model.predict(z, t, &sc.positive, &lq, nullptr, nullptr);
        auto pers_pred = model.predict(z, t, &sc.positive, &lq, &feats, &state);
        double m = 0.0;
        for (size_t i = 0; i < base_pred.size(); ++i) {
            m = std::max(m, std::abs(static_cast<double>(base_pred[i]) - pers_pred[i]));
        }
        REQUIRE(m <= 1e-6);
    }
}

TEST_CASE("personalization training is deterministic") {
    TrainRig rig;
    Denoiser<float> model(rig.cfg, 2);
    testutil::randomize_output_conv(model, 23);
    ReferenceSet refs = make_reference_set(rig.data.identities[2], 2);
    PersonalizeConfig pc;
    pc.iterations = 4;
    pc.batch = 1;
    pc.crop_size = rig.cfg.image_size;
    pc.seed = 9;

    std::vector<double> la, lb;
    auto s1 = personalize(model, refs, {}, pc, rig.sched,
                          [&](const TrainLogRecord& r) { la.push_back(r.total); });
    auto s2 = personalize(model, refs, {}, pc, rig.sched,
                          [&](const TrainLogRecord& r) { lb.push_back(r.total); });
    REQUIRE(la == lb);
    bool equal = true;
    s1.params.for_each([&](const Param<float>& p) {
        const auto& q = s2.params.at(p.name);
        for (size_t i = 0; i < p.value.size(); ++i) {
            if (p.value[i] != q.value[i]) equal = false;
        }
    });
    REQUIRE(equal);
}
