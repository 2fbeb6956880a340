#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pfr/face_synth.hpp"
#include "pfr/metrics.hpp"
#include "pfr/rng.hpp"

using namespace pfr;

namespace {

// Test-local detector: reports landmarks shifted by a per-image marker pixel.
class MarkerOffsetDetector : public LandmarkDetector {
public:
    std::optional<FaceLandmarks> detect(const ImageBuffer& img) const override {
        const double offset = img.at(0, 0, 0) > 0.5 ? 1.0 : 0.0;
        FaceLandmarks lm;
        lm[0] = {10.0 + 3.0 * offset, 10.0 + 4.0 * offset};
        lm[1] = {20.0 + 3.0 * offset, 10.0 + 4.0 * offset};
        lm[2] = {15.0 + 3.0 * offset, 20.0 + 4.0 * offset};
        return lm;
    }
};

class FixedEmbedder : public IdentityEmbedder {
public:
    std::vector<double> embed(const ImageBuffer& img) const override {
        // Two orthogonal unit vectors keyed by a marker pixel.
        std::vector<double> v(4, 0.0);
        v[img.at(0, 0, 0) > 0.5 ? 0 : 1] = 1.0;
        return v;
    }
};

}  // namespace

TEST_CASE("psnr: closed-form value, cap, symmetry") {
    ImageBuffer zeros(16, 16, 0.0f);
    ImageBuffer halves(16, 16, 0.5f);
    REQUIRE(psnr(zeros, halves) == Catch::Approx(6.0206).margin(1e-3));
    REQUIRE(psnr(zeros, zeros) == Catch::Approx(100.0));
    RandomStream rng(1);
    ImageBuffer a = random_image(12, 14, rng);
    ImageBuffer b = random_image(12, 14, rng);
    REQUIRE(psnr(a, b) == Catch::Approx(psnr(b, a)));
    ImageBuffer c(10, 10, 0.0f);
    REQUIRE_THROWS_AS(psnr(a, c), InvalidArgument);
}

TEST_CASE("ssim: identity, inversion, symmetry, window precondition") {
    RandomStream rng(2);
    FaceParams p = sample_face_params(rng);
    ImageBuffer face = generate_face(p, 48, 3);
    REQUIRE(ssim(face, face) == Catch::Approx(1.0).margin(1e-9));

    // Binary image vs its negative: structural term flips sign.
    ImageBuffer bin(24, 24);
    ImageBuffer inv(24, 24);
    for (int y = 0; y < 24; ++y) {
        for (int x = 0; x < 24; ++x) {
            const float v = ((x / 4 + y / 4) % 2 == 0) ? 1.0f : 0.0f;
            for (int c = 0; c < 3; ++c) {
                bin.at(y, x, c) = v;
                inv.at(y, x, c) = 1.0f - v;
            }
        }
    }
    REQUIRE(ssim(bin, inv) < 0.0);

    RandomStream rng2(3);
    ImageBuffer a = random_image(20, 20, rng2);
    ImageBuffer b = random_image(20, 20, rng2);
    REQUIRE(ssim(a, b) == Catch::Approx(ssim(b, a)).margin(1e-12));

    ImageBuffer tiny(8, 8, 0.5f);
    REQUIRE_THROWS_AS(ssim(tiny, tiny), InvalidArgument);
}

TEST_CASE("lmse: zero, failure cap, hand-computed offset") {
    ImageBuffer dark(32, 32, 0.1f);
    ImageBuffer bright(32, 32, 0.9f);

    MarkerOffsetDetector det;
    // Same marker: identical landmarks.
    REQUIRE(lmse(dark, dark, det) == Catch::Approx(0.0));
    // (3,4) offset per landmark: mean squared distance 25.
    REQUIRE(lmse(dark, bright, det) == Catch::Approx(25.0));

    FixedLandmarkDetector fail(std::nullopt);
    REQUIRE(lmse(dark, bright, fail) == Catch::Approx(128.0));

    // Values beyond the cap clamp to it.
    class FarDetector : public LandmarkDetector {
    public:
        std::optional<FaceLandmarks> detect(const ImageBuffer& img) const override {
            const double off = img.at(0, 0, 0) > 0.5 ? 50.0 : 0.0;
            FaceLandmarks lm;
            lm[0] = {0.0 + off, 0.0};
            lm[1] = {5.0 + off, 0.0};
            lm[2] = {0.0 + off, 5.0};
            return lm;
        }
    } far;
    REQUIRE(lmse(dark, bright, far) == Catch::Approx(128.0));
}

TEST_CASE("id_cosine: identity, orthogonality, embedder plugability") {
    ImageBuffer dark(16, 16, 0.1f);
    ImageBuffer bright(16, 16, 0.9f);
    FixedEmbedder fixed;
    REQUIRE(id_cosine(dark, dark, fixed) == Catch::Approx(100.0));
    REQUIRE(id_cosine(dark, bright, fixed) == Catch::Approx(0.0));

    PatchGridEmbedder grid;
    REQUIRE(id_cosine(dark, dark, grid) == Catch::Approx(100.0).margin(1e-9));
}

TEST_CASE("oracle embedder separates synthetic identities") {
    RandomStream rng(7);
    PatchGridEmbedder emb;
    int wins = 0;
    const int trials = 20;
    for (int i = 0; i < trials; ++i) {
        FaceParams pa = sample_face_params(rng);
        FaceParams pb = sample_face_params(rng);
        ImageBuffer a1 = generate_face(pa, 64, 1000 + i);
        ImageBuffer a2 = generate_face(pa, 64, 2000 + i);
        ImageBuffer b1 = generate_face(pb, 64, 3000 + i);
        const double same = id_cosine(a1, a2, emb);
        const double cross = id_cosine(a1, b1, emb);
        if (same > cross) wins++;
    }
    REQUIRE(wins >= 18);
}

TEST_CASE("oracle landmark detector matches analytic landmarks on clean renders") {
    RandomStream rng(8);
    BlobLandmarkDetector det;
    int detected = 0;
    double worst = 0.0;
    const int trials = 15;
    for (int i = 0; i < trials; ++i) {
        FaceParams p = sample_face_params(rng);
        const uint64_t jseed = 500 + i;
        ImageBuffer img = generate_face(p, 64, jseed);
        const auto truth = face_landmarks(p, 64, jseed);
        const auto found = det.detect(img);
        if (!found) continue;
        detected++;
        for (int k = 0; k < 3; ++k) {
            const double d = std::hypot((*found)[k].x - truth[k].x,
                                        (*found)[k].y - truth[k].y);
            worst = std::max(worst, d);
        }
    }
    REQUIRE(detected >= 13);
    REQUIRE(worst < 3.0);

    // Noise defeats the detector; the LMSE failure path reports the cap.
    RandomStream nrng(9);
    ImageBuffer noise = random_image(64, 64, nrng);
    REQUIRE_FALSE(det.detect(noise).has_value());
    ImageBuffer clean = generate_face(sample_face_params(rng), 64, 1);
    REQUIRE(lmse(clean, noise, det) == Catch::Approx(128.0));
}

TEST_CASE("evaluate_dataset aggregates rows deterministically") {
    RandomStream rng(10);
    FaceParams p = sample_face_params(rng);
    ImageBuffer face = generate_face(p, 64, 11);

    std::vector<EvalPair> pairs;
    pairs.push_back({"identical", face, face});
    ImageBuffer other = generate_face(sample_face_params(rng), 64, 12);
    pairs.push_back({"different", other, face});

    PatchGridEmbedder emb;
    BlobLandmarkDetector det;
    MetricsReport rep = evaluate_dataset(pairs, emb, det);
    REQUIRE(rep.rows.size() == 2);
    REQUIRE(rep.rows[0].psnr_db == Catch::Approx(100.0));
    REQUIRE(rep.rows[0].ssim == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(rep.rows[0].lmse == Catch::Approx(0.0).margin(1e-9));
    REQUIRE(rep.rows[0].id_percent == Catch::Approx(100.0).margin(1e-9));

    REQUIRE(rep.mean.psnr_db ==
            Catch::Approx((rep.rows[0].psnr_db + rep.rows[1].psnr_db) / 2));
    REQUIRE(rep.mean.id_percent ==
            Catch::Approx((rep.rows[0].id_percent + rep.rows[1].id_percent) / 2));

    MetricsReport rep2 = evaluate_dataset(pairs, emb, det);
    REQUIRE(report_to_csv(rep) == report_to_csv(rep2));

    REQUIRE_THROWS_AS(evaluate_dataset({}, emb, det), EmptyDataset);

    const std::string csv = report_to_csv(rep);
    REQUIRE(csv.rfind("image,psnr_db,ssim,lmse,id_percent,lpips,musiq\n", 0) == 0);
}
