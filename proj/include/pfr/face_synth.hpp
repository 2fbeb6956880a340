#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "pfr/common.hpp"
#include "pfr/image.hpp"
#include "pfr/rng.hpp"

namespace pfr {

// Parametric face model. The parameter vector is the ground-truth identity of
// a synthetic image; rendering is a pure function of (params, size, seed).
// All positional fields are fractions of the image side.
struct FaceParams {
    double skin_tone = 0.5;     // [0,1], light..dark ramp
    double face_cx = 0.5;       // [0.46,0.54]
    double face_cy = 0.52;      // [0.48,0.56]
    double face_ax = 0.29;      // [0.24,0.34] semi-axis
    double face_ay = 0.37;      // [0.32,0.42] semi-axis
    double eye_dx = 0.13;       // [0.10,0.16] offset from face center
    double eye_dy = 0.09;       // [0.06,0.12] above center
    double eye_size = 0.04;     // [0,0.055]; 0 renders no eyes
    double iris_shade = 0.2;    // [0,0.4]
    double mouth_dy = 0.15;     // [0.10,0.20] below center
    double mouth_w = 0.12;      // [0.08,0.16] half-width
    double mouth_curve = 0.0;   // [-1,1]
    double brow_angle = 0.0;    // [-0.45,0.45] radians

    static constexpr size_t kDim = 13;

    std::vector<double> to_vector() const {
        return {skin_tone, face_cx, face_cy, face_ax, face_ay, eye_dx, eye_dy,
                eye_size, iris_shade, mouth_dy, mouth_w, mouth_curve, brow_angle};
    }

    static FaceParams from_vector(const std::vector<double>& v) {
        check(v.size() == kDim, "FaceParams vector must have 13 entries");
        FaceParams p;
        p.skin_tone = v[0];
        p.face_cx = v[1];
        p.face_cy = v[2];
        p.face_ax = v[3];
        p.face_ay = v[4];
        p.eye_dx = v[5];
        p.eye_dy = v[6];
        p.eye_size = v[7];
        p.iris_shade = v[8];
        p.mouth_dy = v[9];
        p.mouth_w = v[10];
        p.mouth_curve = v[11];
        p.brow_angle = v[12];
        return p;
    }
};

inline FaceParams sample_face_params(RandomStream& rng) {
    FaceParams p;
    p.skin_tone = rng.uniform(0.0, 1.0);
    p.face_cx = rng.uniform(0.46, 0.54);
    p.face_cy = rng.uniform(0.48, 0.56);
    p.face_ax = rng.uniform(0.24, 0.34);
    p.face_ay = rng.uniform(0.32, 0.42);
    p.eye_dx = rng.uniform(0.10, 0.16);
    p.eye_dy = rng.uniform(0.06, 0.12);
    p.eye_size = rng.uniform(0.025, 0.05);
    p.iris_shade = rng.uniform(0.0, 0.4);
    p.mouth_dy = rng.uniform(0.10, 0.20);
    p.mouth_w = rng.uniform(0.08, 0.16);
    p.mouth_curve = rng.uniform(-1.0, 1.0);
    p.brow_angle = rng.uniform(-0.45, 0.45);
    return p;
}

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

// Left eye, right eye, mouth center, in pixel coordinates.
using FaceLandmarks = std::array<Point2, 3>;

namespace detail {

struct PoseJitter {
    double dx = 0.0;      // translation, fraction of side
    double dy = 0.0;
    double scale = 1.0;
    double bg_shade = 0.82;
    double bg_tint = 0.0;
};

inline PoseJitter sample_jitter(uint64_t seed) {
    RandomStream rng(seed, 0x6a17);
    PoseJitter j;
    j.dx = rng.uniform(-0.02, 0.02);
    j.dy = rng.uniform(-0.02, 0.02);
    j.scale = rng.uniform(0.97, 1.03);
    j.bg_shade = rng.uniform(0.72, 0.90);
    j.bg_tint = rng.uniform(-0.05, 0.05);
    return j;
}

// Smooth coverage step over roughly one pixel.
inline double edge(double signed_dist_px) {
    const double t = std::clamp(0.5 - signed_dist_px, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

inline void blend(double cover, const double src[3], double dst[3]) {
    for (int c = 0; c < 3; ++c) {
        dst[c] = dst[c] * (1.0 - cover) + src[c] * cover;
    }
}

}  // namespace detail

// Deterministic render. Pose jitter (small shift/scale of the whole face and
// background shade) models per-photo variation of one identity; everything
// else is identity.
inline ImageBuffer generate_face(const FaceParams& p, int size, uint64_t pose_jitter_seed) {
    if (size < 16) {
        throw InvalidArgument("generate_face: size must be >= 16");
    }
    const auto j = detail::sample_jitter(pose_jitter_seed);
    const double n = static_cast<double>(size);

    const double cx = (p.face_cx + j.dx) * n;
    const double cy = (p.face_cy + j.dy) * n;
    const double ax = p.face_ax * j.scale * n;
    const double ay = p.face_ay * j.scale * n;

    // Skin ramp, light to dark.
    const double skin[3] = {0.95 - 0.50 * p.skin_tone,
                            0.82 - 0.52 * p.skin_tone,
                            0.70 - 0.48 * p.skin_tone};
    const double sclera[3] = {0.93, 0.93, 0.90};
    const double iris[3] = {0.30 - 0.5 * p.iris_shade, 0.25 - 0.4 * p.iris_shade,
                            0.20 - 0.3 * p.iris_shade};
    const double brow_col[3] = {0.22, 0.16, 0.10};
    const double mouth_col[3] = {0.58, 0.22, 0.22};

    const double eye_y = cy - p.eye_dy * j.scale * n;
    const double eye_xl = cx - p.eye_dx * j.scale * n;
    const double eye_xr = cx + p.eye_dx * j.scale * n;
    const double eye_w = p.eye_size * 1.6 * j.scale * n;  // sclera semi-axes
    const double eye_h = p.eye_size * j.scale * n;
    const double iris_r = p.eye_size * 0.45 * j.scale * n;

    const double brow_y = eye_y - 0.05 * j.scale * n;
    const double brow_len = 0.055 * j.scale * n;
    const double brow_th = 0.011 * j.scale * n + 0.4;

    const double mouth_y = cy + p.mouth_dy * j.scale * n;
    const double mouth_half_w = p.mouth_w * j.scale * n;
    const double mouth_th = 0.014 * j.scale * n + 0.4;

    ImageBuffer img(size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double px = x + 0.5;
            const double py = y + 0.5;

            // Background: gentle vertical gradient, identity-independent.
            double col[3];
            const double g = j.bg_shade - 0.08 * (py / n);
            col[0] = g - 0.02 + j.bg_tint;
            col[1] = g;
            col[2] = g + 0.04 - j.bg_tint;

            // Face ellipse.
            const double ex = (px - cx) / ax;
            const double ey = (py - cy) / ay;
            const double r = std::sqrt(ex * ex + ey * ey);
            // Approximate signed distance in pixels.
            const double face_d = (r - 1.0) * std::min(ax, ay);
            const double face_cover = detail::edge(face_d);
            if (face_cover > 0.0) {
                detail::blend(face_cover, skin, col);

                if (p.eye_size > 0.0) {
                    for (const double exc : {eye_xl, eye_xr}) {
                        const double sx = (px - exc) / eye_w;
                        const double sy = (py - eye_y) / eye_h;
                        const double sd = (std::sqrt(sx * sx + sy * sy) - 1.0) * eye_h;
                        const double sc = detail::edge(sd);
                        if (sc > 0.0) detail::blend(sc, sclera, col);
                        const double idist =
                            std::hypot(px - exc, py - eye_y) - iris_r;
                        const double ic = detail::edge(idist);
                        if (ic > 0.0) detail::blend(ic, iris, col);
                    }
                }

                // Brows: mirrored strokes at +-brow_angle.
                for (int side = -1; side <= 1; side += 2) {
                    const double bx = cx + side * p.eye_dx * j.scale * n;
                    const double ang = side * p.brow_angle;
                    const double ca = std::cos(ang);
                    const double sa = std::sin(ang);
                    const double lx = (px - bx) * ca + (py - brow_y) * sa;
                    const double ly = -(px - bx) * sa + (py - brow_y) * ca;
                    if (std::abs(lx) <= brow_len) {
                        const double bd = std::abs(ly) - brow_th;
                        const double bc = detail::edge(bd);
                        if (bc > 0.0) detail::blend(bc, brow_col, col);
                    }
                }

                // Mouth: parabolic band.
                if (std::abs(px - cx) <= mouth_half_w) {
                    const double u = (px - cx) / mouth_half_w;
                    const double curve_y =
                        mouth_y + p.mouth_curve * (u * u - 0.5) * 0.045 * n * j.scale;
                    const double md = std::abs(py - curve_y) - mouth_th;
                    const double mc = detail::edge(md);
                    if (mc > 0.0) detail::blend(mc, mouth_col, col);
                }
            }

            for (int c = 0; c < 3; ++c) {
                img.at(y, x, c) = static_cast<float>(std::clamp(col[c], 0.0, 1.0));
            }
        }
    }
    return img;
}

// Analytic landmark ground truth for the same (params, size, seed).
inline FaceLandmarks face_landmarks(const FaceParams& p, int size, uint64_t pose_jitter_seed) {
    if (size < 16) {
        throw InvalidArgument("face_landmarks: size must be >= 16");
    }
    const auto j = detail::sample_jitter(pose_jitter_seed);
    const double n = static_cast<double>(size);
    const double cx = (p.face_cx + j.dx) * n;
    const double cy = (p.face_cy + j.dy) * n;
    const double eye_y = cy - p.eye_dy * j.scale * n;
    FaceLandmarks lm;
    lm[0] = {cx - p.eye_dx * j.scale * n, eye_y};
    lm[1] = {cx + p.eye_dx * j.scale * n, eye_y};
    lm[2] = {cx, cy + p.mouth_dy * j.scale * n};
    return lm;
}

// Ellipse mask of the rendered face, inflated by the anti-alias margin;
// pixels outside never depend on skin tone.
inline bool inside_face_mask(const FaceParams& p, int size, uint64_t pose_jitter_seed,
                             int y, int x, double margin_px = 2.0) {
    const auto j = detail::sample_jitter(pose_jitter_seed);
    const double n = static_cast<double>(size);
    const double cx = (p.face_cx + j.dx) * n;
    const double cy = (p.face_cy + j.dy) * n;
    const double ax = p.face_ax * j.scale * n + margin_px;
    const double ay = p.face_ay * j.scale * n + margin_px;
    const double ex = (x + 0.5 - cx) / ax;
    const double ey = (y + 0.5 - cy) / ay;
    return ex * ex + ey * ey <= 1.0;
}

}  // namespace pfr
