#pragma once

#include <type_traits>
#include <cmath>
#include <vector>

#include "pfr/common.hpp"
#include "pfr/sampler.hpp"

namespace pfr {

struct TileRect {
    int y0 = 0;
    int x0 = 0;
    int h = 0;
    int w = 0;
};

// Overlapping-tile plan in latent coordinates with per-tile Gaussian fusion
// weights and the per-pixel normalization map (sum of weights). Dividing a
// tile's weights by the normalization yields a partition of unity.
struct TilePlan {
    int height = 0;
    int width = 0;
    int tile = 0;
    int overlap = 0;
    std::vector<TileRect> tiles;               // row-major traversal order
    std::vector<std::vector<double>> weights;  // per tile, rect.h * rect.w
    std::vector<double> normalization;         // height * width, > 0 everywhere
};

// Positions 0, stride, 2*stride, ... with the final tile clamped to end at the
// border. Gaussian mask sigma = tile/4 per axis, separable.
inline TilePlan plan_tiles(int h, int w, int tile, int overlap) {
    if (overlap < 0 || overlap >= tile) {
        throw InvalidArgument("plan_tiles: need 0 <= overlap < tile");
    }
    check(h >= 1 && w >= 1, "plan_tiles: bad dims");
    TilePlan plan;
    plan.height = h;
    plan.width = w;
    plan.tile = tile;
    plan.overlap = overlap;

    auto axis_positions = [&](int dim, int t) {
        std::vector<int> pos;
        const int eff = std::min(t, dim);
        const int stride = t - overlap;
        for (int p = 0;; p += stride) {
            if (p + eff >= dim) {
                pos.push_back(dim - eff);
                break;
            }
            pos.push_back(p);
        }
        // The clamped final position may duplicate the previous one.
        if (pos.size() >= 2 && pos[pos.size() - 1] == pos[pos.size() - 2]) {
            pos.pop_back();
        }
        return std::make_pair(pos, eff);
    };

    const auto [ys, th] = axis_positions(h, tile);
    const auto [xs, tw] = axis_positions(w, tile);

    auto gauss_axis = [](int n) {
        std::vector<double> g(static_cast<size_t>(n));
        const double sigma = n / 4.0;
        const double c = (n - 1) / 2.0;
        for (int i = 0; i < n; ++i) {
            const double d = (i - c) / sigma;
            g[static_cast<size_t>(i)] = std::exp(-0.5 * d * d);
        }
        return g;
    };
    const auto gy = gauss_axis(th);
    const auto gx = gauss_axis(tw);

    plan.normalization.assign(static_cast<size_t>(h) * w, 0.0);
    for (int y0 : ys) {
        for (int x0 : xs) {
            TileRect r{y0, x0, th, tw};
            std::vector<double> mask(static_cast<size_t>(th) * tw);
            for (int y = 0; y < th; ++y) {
                for (int x = 0; x < tw; ++x) {
                    const double v = gy[static_cast<size_t>(y)] * gx[static_cast<size_t>(x)];
                    mask[static_cast<size_t>(y) * tw + x] = v;
                    plan.normalization[static_cast<size_t>(y0 + y) * w + (x0 + x)] += v;
                }
            }
            plan.tiles.push_back(r);
            plan.weights.push_back(std::move(mask));
        }
    }
    return plan;
}

namespace detail {

template <typename S>
TensorT<S> crop_latent(const TensorT<S>& z, const TileRect& r) {
    TensorT<S> out({z.dim(0), r.h, r.w});
    for (int c = 0; c < z.dim(0); ++c) {
        for (int y = 0; y < r.h; ++y) {
            for (int x = 0; x < r.w; ++x) {
                out.at(c, y, x) = z.at(c, r.y0 + y, r.x0 + x);
            }
        }
    }
    return out;
}

}  // namespace detail

// Per-step overlapping-tile denoising with Gaussian-weighted fusion of the
// noise predictions, sharing one full-size latent (and one z_T draw) across
// tiles. A plan with a single tile consumes the stream exactly like sample()
// and reproduces it bit-for-bit.
template <typename S>
ImageBuffer restore_tiled(Denoiser<S>& model, const ImageBuffer& lq,
                          std::type_identity_t<PersonalizationState<S>*> pstate,
                          const SamplerConfig& config,
                          const NoiseSchedule& sched, const TilePlan& plan) {
    config.validate(sched);
    if (lq.height() != plan.height * kLatentFactor ||
        lq.width() != plan.width * kLatentFactor) {
        throw InvalidArgument("restore_tiled: plan does not match the LQ dims");
    }
    for (const auto& r : plan.tiles) {
        if (r.h % 4 != 0 || r.w % 4 != 0 || r.y0 % 2 != 0 || r.x0 % 2 != 0) {
            throw InvalidArgument(
                "restore_tiled: tile rects must be multiples of 4 at even offsets");
        }
    }
    if (pstate && pstate->ref_latents.empty()) {
        throw InvalidArgument("restore_tiled: personalization state has no references");
    }

    RandomStream rng(config.seed, 0x5a3e);
    RandomStream ref_rng(config.seed, 0x0eef);
    TensorT<S> z({model.cfg.latent_channels, plan.height, plan.width});
    for (size_t i = 0; i < z.size(); ++i) z[i] = static_cast<S>(rng.normal());

    const auto steps = strided_timesteps(config.num_steps, sched.T);
    const TensorT<S>* ref_latent =
        pstate ? &pstate->ref_latents[static_cast<size_t>(
                     std::min<int>(config.ref_index,
                                   static_cast<int>(pstate->ref_latents.size()) - 1))]
               : nullptr;

    const size_t hw = static_cast<size_t>(plan.height) * plan.width;

    for (int i = static_cast<int>(steps.size()) - 1; i >= 0; --i) {
        const int t = steps[static_cast<size_t>(i)];

        std::vector<TensorT<S>> ref_feats;
        if (pstate) {
            TensorT<S> eps_ref(ref_latent->shape());
            for (size_t k = 0; k < eps_ref.size(); ++k) {
                eps_ref[k] = static_cast<S>(ref_rng.normal());
            }
            ref_feats = model.extract_reference_features(*ref_latent, t, eps_ref, sched);
        }
        const std::vector<TensorT<S>>* rf = pstate ? &ref_feats : nullptr;

        // Fused noise prediction: sum of per-tile predictions, each scaled by
        // its normalized Gaussian weight, accumulated in row-major tile order.
        TensorT<S> eps_full(z.shape());
        for (size_t ti = 0; ti < plan.tiles.size(); ++ti) {
            const TileRect& r = plan.tiles[ti];
            TensorT<S> z_tile = detail::crop_latent(z, r);
            ImageBuffer lq_tile = crop(lq, r.y0 * kLatentFactor, r.x0 * kLatentFactor,
                                       r.h * kLatentFactor, r.w * kLatentFactor);

            TensorT<S> eps_hat;
            if (config.guidance == GuidanceMode::positive_only) {
                eps_hat = model.predict(z_tile, t, &config.positive, &lq_tile, rf, pstate,
                                        config.lambda_att);
            } else {
                TensorT<S> pos = model.predict(z_tile, t, &config.positive, &lq_tile, rf,
                                               pstate, config.lambda_att);
                TensorT<S> neg = model.predict(z_tile, t, &config.negative,
                                               config.null_lq_negative ? nullptr : &lq_tile,
                                               rf, pstate, config.lambda_att);
                eps_hat = cfg_combine(pos, neg, config.lambda_cfg);
            }

            const auto& mask = plan.weights[ti];
            for (int c = 0; c < z.dim(0); ++c) {
                for (int y = 0; y < r.h; ++y) {
                    for (int x = 0; x < r.w; ++x) {
                        const size_t pix = static_cast<size_t>(r.y0 + y) * plan.width +
                                           (r.x0 + x);
                        const double wn = mask[static_cast<size_t>(y) * r.w + x] /
                                          plan.normalization[pix];
                        eps_full[c * hw + pix] +=
                            static_cast<S>(wn) * eps_hat.at(c, y, x);
                    }
                }
            }
        }

        const double abar_t = sched.alpha_bar[static_cast<size_t>(t)];
        const double abar_prev =
            i > 0 ? sched.alpha_bar[static_cast<size_t>(steps[static_cast<size_t>(i - 1)])]
                  : 1.0;
        if (i > 0) {
            TensorT<S> xi(z.shape());
            for (size_t k = 0; k < xi.size(); ++k) xi[k] = static_cast<S>(rng.normal());
            detail::ddpm_step_inplace(z, eps_full, abar_t, abar_prev, &xi);
        } else {
            detail::ddpm_step_inplace(z, eps_full, abar_t, abar_prev,
                                      static_cast<const TensorT<S>*>(nullptr));
        }
    }
    return decode_latent(z);
}

}  // namespace pfr
