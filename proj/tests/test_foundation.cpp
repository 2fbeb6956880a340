#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "pfr/dataset.hpp"
#include "pfr/degradation.hpp"
#include "pfr/digest.hpp"
#include "pfr/face_synth.hpp"
#include "pfr/image.hpp"
#include "pfr/image_io.hpp"
#include "pfr/latent_codec.hpp"
#include "pfr/rng.hpp"
#include "pfr/schedule.hpp"
#include "pfr/tensor.hpp"

using namespace pfr;

TEST_CASE("rng streams are deterministic and well distributed") {
    RandomStream a(42);
    RandomStream b(42);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.next_u64() == b.next_u64());
    }

    RandomStream r(7);
    double sum = 0.0, sum2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sum2 += v * v;
    }
    REQUIRE(std::abs(sum / n) < 0.01);
    REQUIRE(std::abs(sum2 / n - 1.0) < 0.02);

    RandomStream u(9);
    int buckets[10] = {0};
    for (int i = 0; i < 100000; ++i) {
        buckets[u.uniform_int(10)]++;
    }
    for (int bi = 0; bi < 10; ++bi) {
        REQUIRE(std::abs(buckets[bi] - 10000) < 500);
    }

    // Child streams do not perturb or mirror the parent.
    RandomStream parent(5);
    RandomStream c0 = parent.child(0);
    RandomStream c1 = parent.child(1);
    REQUIRE(c0.next_u64() != c1.next_u64());
}

TEST_CASE("sha256 matches known vector") {
    REQUIRE(sha256_hex(std::string("abc")) ==
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("image resize shape and identity") {
    RandomStream rng(3);
    ImageBuffer img = random_image(32, 48, rng);
    ImageBuffer same = resize_bilinear(img, 32, 48);
    REQUIRE(same == img);
    ImageBuffer down = resize_bilinear(img, 16, 24);
    REQUIRE(down.height() == 16);
    REQUIRE(down.width() == 24);
    // Constant image stays constant under both kernels.
    ImageBuffer flat(20, 20, 0.25f);
    ImageBuffer fb = resize_bilinear(flat, 33, 17);
    ImageBuffer fc = resize_bicubic(flat, 41, 29);
    for (size_t i = 0; i < fb.size(); ++i) REQUIRE(fb.data()[i] == Catch::Approx(0.25).margin(1e-6));
    for (size_t i = 0; i < fc.size(); ++i) REQUIRE(fc.data()[i] == Catch::Approx(0.25).margin(1e-5));
}

TEST_CASE("png and jpeg round trips") {
    RandomStream rng(11);
    ImageBuffer img = random_image(24, 20, rng);

    const auto tmp = std::filesystem::temp_directory_path() / "pfr_io_test.png";
    write_png(tmp.string(), img);
    ImageBuffer back = read_png(tmp.string());
    REQUIRE(back.height() == img.height());
    REQUIRE(back.width() == img.width());
    // 8-bit quantization error only.
    REQUIRE(max_abs_diff(img, back) <= 0.5 / 255.0 + 1e-6);
    std::filesystem::remove(tmp);

    // JPEG q=100 on a smooth image is near-lossless with the pinned codec.
    ImageBuffer smooth(32, 32);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            smooth.at(y, x, 0) = 0.3f + 0.3f * y / 31.0f;
            smooth.at(y, x, 1) = 0.5f;
            smooth.at(y, x, 2) = 0.2f + 0.3f * x / 31.0f;
        }
    }
    ImageBuffer jj = jpeg_roundtrip(smooth, 100);
    REQUIRE(max_abs_diff(smooth, jj) < 0.02);

    // Re-encoding is deterministic.
    auto bytes1 = jpeg_encode(img, 75);
    auto bytes2 = jpeg_encode(img, 75);
    REQUIRE(bytes1 == bytes2);
}

TEST_CASE("face render determinism and degenerate geometry") {
    RandomStream rng(21);
    FaceParams p = sample_face_params(rng);
    ImageBuffer a = generate_face(p, 64, 123);
    ImageBuffer b = generate_face(p, 64, 123);
    REQUIRE(a == b);

    REQUIRE_THROWS_AS(generate_face(p, 15, 0), InvalidArgument);

    FaceParams no_eyes = p;
    no_eyes.eye_size = 0.0;
    ImageBuffer c = generate_face(no_eyes, 64, 123);
    REQUIRE(c.height() == 64);
    // Renders differ (eyes present vs absent).
    REQUIRE(max_abs_diff(a, c) > 0.05);
}

TEST_CASE("skin tone changes pixels only inside the face ellipse") {
    RandomStream rng(22);
    FaceParams p = sample_face_params(rng);
    FaceParams q = p;
    q.skin_tone = std::fmod(p.skin_tone + 0.5, 1.0);
    const uint64_t seed = 77;
    ImageBuffer a = generate_face(p, 64, seed);
    ImageBuffer b = generate_face(q, 64, seed);
    bool any_diff = false;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            for (int c = 0; c < 3; ++c) {
                if (a.at(y, x, c) != b.at(y, x, c)) {
                    any_diff = true;
                    REQUIRE(inside_face_mask(p, 64, seed, y, x));
                }
            }
        }
    }
    REQUIRE(any_diff);
}

TEST_CASE("jitter preserves identity landmarks up to the jitter transform") {
    RandomStream rng(23);
    FaceParams p = sample_face_params(rng);
    auto lm1 = face_landmarks(p, 64, 1);
    auto lm2 = face_landmarks(p, 64, 2);
    // Jitter is bounded: translation <= 2% + scale 3% of side.
    for (int i = 0; i < 3; ++i) {
        REQUIRE(std::abs(lm1[i].x - lm2[i].x) < 64 * 0.08);
        REQUIRE(std::abs(lm1[i].y - lm2[i].y) < 64 * 0.08);
    }
}

TEST_CASE("training example sampler obeys crop probability") {
    IdentityDataset ds = make_synthetic_dataset(3, 2, 96, 5);

    RandomStream rng(1);
    // crop_prob = 0: always the resized full image.
    const ImageBuffer expect_resized = resize_bilinear(ds.identities[0].images[0], 64, 64);
    for (int i = 0; i < 20; ++i) {
        ImageBuffer s = sample_training_example(ds, 64, 0.0, rng);
        REQUIRE(s.height() == 64);
        REQUIRE(s.width() == 64);
    }

    // crop_prob = 1 with image already at crop size: unchanged.
    IdentityDataset small = make_synthetic_dataset(1, 1, 64, 6);
    RandomStream rng2(2);
    ImageBuffer s = sample_training_example(small, 64, 1.0, rng2);
    REQUIRE(s == small.identities[0].images[0]);

    // Monte-Carlo frequency of the crop branch at 0.5.
    // Classify by comparing to the unique resize output per (identity, image).
    IdentityDataset one = make_synthetic_dataset(1, 1, 96, 7);
    const ImageBuffer resized = resize_bilinear(one.identities[0].images[0], 64, 64);
    RandomStream rng3(3);
    int resize_count = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        ImageBuffer x = sample_training_example(one, 64, 0.5, rng3);
        if (x == resized) resize_count++;
    }
    const double crop_frac = 1.0 - static_cast<double>(resize_count) / n;
    REQUIRE(crop_frac > 0.48);
    REQUIRE(crop_frac < 0.52);

    IdentityDataset empty;
    RandomStream rng4(4);
    REQUIRE_THROWS_AS(sample_training_example(empty, 64, 0.5, rng4), EmptyDataset);
}

TEST_CASE("reference sampling is uniform and reproducible") {
    IdentityDataset ds = make_synthetic_dataset(1, 5, 64, 8);
    ReferenceSet refs = make_reference_set(ds.identities[0], 5);

    RandomStream rng(9);
    int counts[5] = {0};
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const ImageBuffer& r = sample_reference(refs, rng);
        for (int k = 0; k < 5; ++k) {
            if (r == refs.images[static_cast<size_t>(k)]) {
                counts[k]++;
                break;
            }
        }
    }
    for (int k = 0; k < 5; ++k) {
        const double f = static_cast<double>(counts[k]) / n;
        REQUIRE(f > 0.18);
        REQUIRE(f < 0.22);
    }

    ReferenceSet solo = make_reference_set(ds.identities[0], 1);
    RandomStream rng2(10);
    for (int i = 0; i < 5; ++i) {
        REQUIRE(sample_reference(solo, rng2) == solo.images[0]);
    }

    RandomStream a(11), b(11);
    for (int i = 0; i < 20; ++i) {
        REQUIRE(sample_reference(refs, a) == sample_reference(refs, b));
    }
}

TEST_CASE("dataset round trip through directory layout") {
    IdentityDataset ds = make_synthetic_dataset(2, 3, 48, 12);
    const auto root = std::filesystem::temp_directory_path() / "pfr_ds_test";
    std::filesystem::remove_all(root);
    write_dataset(ds, root.string());
    IdentityDataset back = load_dataset(root.string());
    REQUIRE(back.identities.size() == 2);
    REQUIRE(back.identities[0].images.size() == 3);
    REQUIRE(back.identities[0].params.has_value());
    // Params survive the sidecar.
    REQUIRE(back.identities[0].params->skin_tone ==
            Catch::Approx(ds.identities[0].params->skin_tone));
    std::filesystem::remove_all(root);
}

TEST_CASE("latent codec shapes, affine anchors, exact round trip") {
    RandomStream rng(31);
    ImageBuffer img = random_image(64, 64, rng);
    auto z = encode_latent<double>(img);
    REQUIRE(z.shape() == std::vector<int>{12, 32, 32});

    ImageBuffer half(16, 16, 0.5f);
    auto zh = encode_latent<double>(half);
    for (size_t i = 0; i < zh.size(); ++i) REQUIRE(zh[i] == 0.0);

    TensorT<double> zero({12, 8, 8});
    ImageBuffer mid = decode_latent(zero);
    for (size_t i = 0; i < mid.size(); ++i) REQUIRE(mid.data()[i] == 0.5f);

    TensorT<double> over({12, 8, 8});
    over.fill(1.5);
    ImageBuffer clamped = decode_latent(over);
    for (size_t i = 0; i < clamped.size(); ++i) REQUIRE(clamped.data()[i] == 1.0f);

    // Bit-exact inverse pair on random images for the canonical (double)
    // codec; the float instantiation used inside the network is within 1 ulp.
    for (uint64_t s = 0; s < 8; ++s) {
        RandomStream r2(s);
        ImageBuffer x = random_image(32, 32, r2);
        REQUIRE(decode_latent(encode_latent<double>(x)) == x);
        REQUIRE(max_abs_diff(decode_latent(encode_latent<float>(x)), x) <= 1e-7);
    }

    ImageBuffer odd(15, 16, 0.5f);
    REQUIRE_THROWS_AS(encode_latent<float>(odd), InvalidArgument);
}

TEST_CASE("noise schedule invariants and closed-form product") {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    REQUIRE(s.alpha_bar[0] == Catch::Approx(1.0 - 1e-4));
    for (int t = 1; t < 1000; ++t) {
        REQUIRE(s.alpha_bar[static_cast<size_t>(t)] <
                s.alpha_bar[static_cast<size_t>(t - 1)]);
        REQUIRE(s.beta[static_cast<size_t>(t)] > 0.0);
        REQUIRE(s.beta[static_cast<size_t>(t)] < 1.0);
    }
    // Closed-form product oracle.
    double prod = 1.0;
    for (int t = 0; t < 1000; ++t) {
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t / 999.0);
    }
    REQUIRE(s.alpha_bar[999] == Catch::Approx(prod).epsilon(1e-9));
    REQUIRE(s.alpha_bar[999] < 0.01);

    REQUIRE_THROWS_AS(make_schedule(10, 0.5, 0.2), InvalidArgument);
    REQUIRE_THROWS_AS(make_schedule(10, 0.0, 0.2), InvalidArgument);
}

TEST_CASE("q_sample boundary and moments") {
    NoiseSchedule s = default_schedule();
    RandomStream rng(41);
    TensorT<double> z0 = TensorT<double>::randn({4, 4, 4}, rng);

    TensorT<double> zero_eps({4, 4, 4});
    auto zt = q_sample(z0, 500, zero_eps, s);
    const double a = std::sqrt(s.alpha_bar[500]);
    for (size_t i = 0; i < zt.size(); ++i) {
        REQUIRE(zt[i] == Catch::Approx(a * z0[i]).margin(1e-12));
    }

    // t = 0 keeps z within the schedule-boundary bound of z0.
    TensorT<double> eps = TensorT<double>::randn({4, 4, 4}, rng);
    auto z_t0 = q_sample(z0, 0, eps, s);
    const double a0 = std::sqrt(s.alpha_bar[0]);
    const double b0 = std::sqrt(1.0 - s.alpha_bar[0]);
    for (size_t i = 0; i < z_t0.size(); ++i) {
        REQUIRE(std::abs(z_t0[i] - z0[i]) <=
                (1.0 - a0) * std::abs(z0[i]) + b0 * std::abs(eps[i]) + 1e-12);
    }

    // Monte-Carlo moments at a mid timestep: mean sqrt(abar)*z0, var 1-abar.
    const int t = 600;
    const int n = 10000;
    double m1 = 0.0, m2 = 0.0;
    const double z0v = 0.7;
    TensorT<double> z1({1});
    z1[0] = z0v;
    for (int i = 0; i < n; ++i) {
        TensorT<double> e({1});
        e[0] = rng.normal();
        m1 += q_sample(z1, t, e, s)[0];
        const double d = q_sample(z1, t, e, s)[0];
        m2 += d * d;
    }
    m1 /= n;
    m2 = m2 / n - m1 * m1;
    const double mean_expect = std::sqrt(s.alpha_bar[t]) * z0v;
    const double var_expect = 1.0 - s.alpha_bar[t];
    const double mean_sigma = std::sqrt(var_expect / n);
    REQUIRE(std::abs(m1 - mean_expect) < 3.0 * mean_sigma);
    const double var_sigma = var_expect * std::sqrt(2.0 / n);
    REQUIRE(std::abs(m2 - var_expect) < 3.0 * var_sigma);
}

TEST_CASE("strided timesteps cover [0,T) uniformly") {
    auto ts = strided_timesteps(200, 1000);
    REQUIRE(ts.size() == 200);
    REQUIRE(ts.front() == 0);
    REQUIRE(ts.back() == 995);
    for (size_t i = 1; i < ts.size(); ++i) {
        REQUIRE(ts[i] - ts[i - 1] == 5);
    }
    auto single = strided_timesteps(1, 1000);
    REQUIRE(single == std::vector<int>{0});
}
