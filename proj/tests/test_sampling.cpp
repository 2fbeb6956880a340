#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pfr/sampler.hpp"
#include "pfr/tiled.hpp"
#include "test_util.hpp"

using namespace pfr;

namespace {

struct SampleRig {
    DenoiserConfig cfg = toy_denoiser_config();
    Denoiser<float> model{cfg, 5};
    NoiseSchedule sched = default_schedule();

    SampleRig() {
        testutil::randomize_output_conv(model, 55);
        testutil::randomize_lq_heads(model, 56);
    }

    SamplerConfig fast_config(uint64_t seed = 9) const {
        SamplerConfig sc;
        sc.num_steps = 6;
        sc.lambda_cfg = 4.0;
        sc.seed = seed;
        return sc;
    }

    ImageBuffer rand_img(uint64_t seed) {
        RandomStream rng(seed);
        return random_image(cfg.image_size, cfg.image_size, rng);
    }
};

}  // namespace

TEST_CASE("cfg_combine endpoints are exact and affine") {
    RandomStream rng(1);
    TensorT<float> pos({4, 3, 3});
    TensorT<float> neg({4, 3, 3});
    for (size_t i = 0; i < pos.size(); ++i) {
        pos[i] = static_cast<float>(rng.normal());
        neg[i] = static_cast<float>(rng.normal());
    }
    auto at1 = cfg_combine(pos, neg, 1.0);
    for (size_t i = 0; i < pos.size(); ++i) REQUIRE(at1[i] == pos[i]);
    auto at0 = cfg_combine(pos, neg, 0.0);
    for (size_t i = 0; i < pos.size(); ++i) REQUIRE(at0[i] == neg[i]);

    // Degenerate: equal branches return the same prediction for any lambda.
    auto same = cfg_combine(pos, pos, 4.0);
    for (size_t i = 0; i < pos.size(); ++i) {
        REQUIRE(same[i] == Catch::Approx(pos[i]).margin(1e-6));
    }

    // Affine in lambda: f(l) = neg + l (pos - neg).
    auto at2 = cfg_combine(pos, neg, 2.0);
    auto at4 = cfg_combine(pos, neg, 4.0);
    for (size_t i = 0; i < pos.size(); ++i) {
        const double d2 = static_cast<double>(at2[i]) - neg[i];
        const double d4 = static_cast<double>(at4[i]) - neg[i];
        REQUIRE(d4 == Catch::Approx(2.0 * d2).margin(1e-4));
    }

    TensorT<float> wrong({4, 3, 2});
    REQUIRE_THROWS_AS(cfg_combine(pos, wrong, 1.0), InvalidArgument);
}

TEST_CASE("sampling is seed-deterministic with matching dims") {
    SampleRig rig;
    auto lq = rig.rand_img(2);
    auto sc = rig.fast_config(11);
    ImageBuffer a = sample(rig.model, lq, nullptr, sc, rig.sched);
    ImageBuffer b = sample(rig.model, lq, nullptr, sc, rig.sched);
    REQUIRE(a == b);
    REQUIRE(a.height() == lq.height());
    REQUIRE(a.width() == lq.width());

    auto sc2 = rig.fast_config(12);
    ImageBuffer c = sample(rig.model, lq, nullptr, sc2, rig.sched);
    REQUIRE_FALSE(a == c);
}

TEST_CASE("lambda_cfg = 1 reproduces positive-prompt-only sampling bit-exactly") {
    SampleRig rig;
    auto lq = rig.rand_img(3);

    auto cfg_path = rig.fast_config(21);
    cfg_path.lambda_cfg = 1.0;
    cfg_path.guidance = GuidanceMode::cfg;
    ImageBuffer with_cfg = sample(rig.model, lq, nullptr, cfg_path, rig.sched);

    auto pos_path = rig.fast_config(21);
    pos_path.guidance = GuidanceMode::positive_only;
    ImageBuffer pos_only = sample(rig.model, lq, nullptr, pos_path, rig.sched);

    REQUIRE(with_cfg == pos_only);

    // lambda_cfg = 0 follows the negative branch: swap prompts and compare.
    auto neg_path = rig.fast_config(21);
    neg_path.lambda_cfg = 0.0;
    ImageBuffer at0 = sample(rig.model, lq, nullptr, neg_path, rig.sched);
    auto swapped = rig.fast_config(21);
    swapped.guidance = GuidanceMode::positive_only;
    std::swap(swapped.positive, swapped.negative);
    ImageBuffer neg_only = sample(rig.model, lq, nullptr, swapped, rig.sched);
    REQUIRE(at0 == neg_only);
}

TEST_CASE("personalized sampling consumes reference features per step") {
    SampleRig rig;
    auto pstate = rig.model.init_personalization(31);
    pstate.ref_latents.push_back(encode_latent<float>(rig.rand_img(32)));
    auto lq = rig.rand_img(33);
    auto sc = rig.fast_config(34);

    ImageBuffer a = sample(rig.model, lq, &pstate, sc, rig.sched);
    ImageBuffer b = sample(rig.model, lq, &pstate, sc, rig.sched);
    REQUIRE(a == b);

    // Reference noising uses its own stream, so a zero-gain state follows
    // the base trajectory bit-for-bit.
    ImageBuffer base_run = sample(rig.model, lq, nullptr, sc, rig.sched);
    REQUIRE(a == base_run);

    // With gains moved off zero the output must change.
    pstate.params.at("pb0.gamma").value.fill(0.5f);
    ImageBuffer c = sample(rig.model, lq, &pstate, sc, rig.sched);
    REQUIRE_FALSE(a == c);

    PersonalizationState<float> empty_state = rig.model.init_personalization(35);
    REQUIRE_THROWS_AS(sample(rig.model, lq, &empty_state, sc, rig.sched),
                      InvalidArgument);
}

TEST_CASE("rejected null-LQ negative-branch variant stays available") {
    SampleRig rig;
    auto lq = rig.rand_img(41);
    auto sc = rig.fast_config(42);
    sc.null_lq_negative = true;
    ImageBuffer a = sample(rig.model, lq, nullptr, sc, rig.sched);
    sc.null_lq_negative = false;
    ImageBuffer b = sample(rig.model, lq, nullptr, sc, rig.sched);
    REQUIRE_FALSE(a == b);
}

TEST_CASE("plan_tiles geometry") {
    // Single tile when the tile covers the latent.
    TilePlan p1 = plan_tiles(32, 32, 32, 16);
    REQUIRE(p1.tiles.size() == 1);
    REQUIRE(p1.tiles[0].y0 == 0);
    REQUIRE(p1.tiles[0].h == 32);

    // Stride 32 with border clamp: origins {0, 16} per axis.
    TilePlan p2 = plan_tiles(64, 64, 48, 16);
    REQUIRE(p2.tiles.size() == 4);
    std::vector<int> ys;
    for (const auto& t : p2.tiles) ys.push_back(t.y0);
    REQUIRE(ys == std::vector<int>{0, 0, 16, 16});
    REQUIRE(p2.tiles[1].x0 == 16);

    // Full coverage.
    TilePlan p3 = plan_tiles(40, 56, 16, 8);
    std::vector<int> covered(40 * 56, 0);
    for (const auto& t : p3.tiles) {
        for (int y = t.y0; y < t.y0 + t.h; ++y) {
            for (int x = t.x0; x < t.x0 + t.w; ++x) {
                covered[static_cast<size_t>(y) * 56 + x]++;
            }
        }
    }
    for (int v : covered) REQUIRE(v >= 1);

    REQUIRE_THROWS_AS(plan_tiles(32, 32, 16, 16), InvalidArgument);
    REQUIRE_THROWS_AS(plan_tiles(32, 32, 16, 20), InvalidArgument);
}

TEST_CASE("partition of unity holds for random plans") {
    RandomStream rng(51);
    for (int trial = 0; trial < 30; ++trial) {
        const int h = 8 + 4 * static_cast<int>(rng.uniform_int(15));
        const int w = 8 + 4 * static_cast<int>(rng.uniform_int(15));
        const int tile = 8 + 4 * static_cast<int>(rng.uniform_int(8));
        const int overlap = 4 * static_cast<int>(rng.uniform_int(
                                static_cast<uint64_t>(tile / 4)));
        TilePlan plan = plan_tiles(h, w, tile, overlap);
        std::vector<double> acc(static_cast<size_t>(h) * w, 0.0);
        for (size_t ti = 0; ti < plan.tiles.size(); ++ti) {
            const auto& t = plan.tiles[ti];
            for (int y = 0; y < t.h; ++y) {
                for (int x = 0; x < t.w; ++x) {
                    const size_t pix = static_cast<size_t>(t.y0 + y) * w + (t.x0 + x);
                    acc[pix] += plan.weights[ti][static_cast<size_t>(y) * t.w + x] /
                                plan.normalization[pix];
                }
            }
        }
        for (double v : acc) REQUIRE(std::abs(v - 1.0) < 1e-6);
        for (double v : plan.normalization) REQUIRE(v > 0.0);
    }
}

TEST_CASE("single-tile plan reproduces the untiled sampler bit-for-bit") {
    SampleRig rig;
    auto lq = rig.rand_img(61);
    auto sc = rig.fast_config(62);

    ImageBuffer untiled = sample(rig.model, lq, nullptr, sc, rig.sched);
    TilePlan plan = plan_tiles(rig.cfg.image_size / 2, rig.cfg.image_size / 2,
                               rig.cfg.image_size / 2, 0);
    ImageBuffer tiled = restore_tiled(rig.model, lq, nullptr, sc, rig.sched, plan);
    REQUIRE(untiled == tiled);

    // Same under personalization.
    auto pstate = rig.model.init_personalization(63);
    pstate.ref_latents.push_back(encode_latent<float>(rig.rand_img(64)));
    pstate.params.at("pb1.gamma").value.fill(0.2f);
    ImageBuffer u2 = sample(rig.model, lq, &pstate, sc, rig.sched);
    ImageBuffer t2 = restore_tiled(rig.model, lq, &pstate, sc, rig.sched, plan);
    REQUIRE(u2 == t2);
}

TEST_CASE("constant weights reduce fusion to plain overlap averaging") {
    TilePlan plan = plan_tiles(16, 16, 8, 4);
    for (auto& mask : plan.weights) {
        std::fill(mask.begin(), mask.end(), 1.0);
    }
    plan.normalization.assign(plan.normalization.size(), 0.0);
    for (size_t ti = 0; ti < plan.tiles.size(); ++ti) {
        const auto& t = plan.tiles[ti];
        for (int y = 0; y < t.h; ++y) {
            for (int x = 0; x < t.w; ++x) {
                plan.normalization[static_cast<size_t>(t.y0 + y) * 16 + (t.x0 + x)] += 1.0;
            }
        }
    }
    // Normalized weight at every covered pixel is exactly 1/count.
    for (size_t ti = 0; ti < plan.tiles.size(); ++ti) {
        const auto& t = plan.tiles[ti];
        for (int y = 0; y < t.h; ++y) {
            for (int x = 0; x < t.w; ++x) {
                const size_t pix = static_cast<size_t>(t.y0 + y) * 16 + (t.x0 + x);
                const double wn = plan.weights[ti][static_cast<size_t>(y) * t.w + x] /
                                  plan.normalization[pix];
                REQUIRE(wn == Catch::Approx(1.0 / plan.normalization[pix]));
            }
        }
    }
}

TEST_CASE("multi-tile restoration runs and keeps dimensions") {
    SampleRig rig;
    // 32x32 image -> 16x16 latent, 8-tiles with overlap 4.
    auto lq_small = rig.rand_img(71);
    ImageBuffer lq = resize_bilinear(lq_small, 32, 32);
    TilePlan plan = plan_tiles(16, 16, 8, 4);
    auto sc = rig.fast_config(72);
    sc.num_steps = 4;
    ImageBuffer out = restore_tiled(rig.model, lq, nullptr, sc, rig.sched, plan);
    REQUIRE(out.height() == 32);
    REQUIRE(out.width() == 32);

    TilePlan wrong = plan_tiles(8, 8, 8, 0);
    REQUIRE_THROWS_AS(restore_tiled(rig.model, lq, nullptr, sc, rig.sched, wrong),
                      InvalidArgument);
}
