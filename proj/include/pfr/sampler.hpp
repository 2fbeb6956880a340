#pragma once

#include <type_traits>
#include <cmath>
#include <vector>

#include "pfr/common.hpp"
#include "pfr/denoiser.hpp"
#include "pfr/image.hpp"
#include "pfr/latent_codec.hpp"
#include "pfr/prompt.hpp"
#include "pfr/rng.hpp"
#include "pfr/schedule.hpp"

namespace pfr {

enum class GuidanceMode {
    cfg,            // two prompts, prediction extrapolation
    positive_only,  // single positive-prompt forward per step
};

struct SamplerConfig {
    int num_steps = 200;
    double lambda_cfg = 4.0;
    PromptTokens positive = positive_prompt();
    PromptTokens negative = negative_prompt();
    uint64_t seed = 0;
    double lambda_att = 1.0;
    GuidanceMode guidance = GuidanceMode::cfg;
    // Rejected-variant toggle: null-condition the LQ image on the negative
    // branch instead of feeding it to both branches.
    bool null_lq_negative = false;
    // Which stored reference drives the adapters at inference.
    int ref_index = 0;

    void validate(const NoiseSchedule& sched) const {
        check(num_steps >= 1 && num_steps <= sched.T, "num_steps must be in [1, T]");
        check(lambda_cfg >= 0.0, "lambda_cfg must be >= 0");
        positive.validate();
        negative.validate();
    }
};

// X~ = X_neg + lambda * (X_pos - X_neg). The endpoints are exact: lambda = 1
// returns the positive prediction itself and lambda = 0 the negative one, so
// "guidance off" is bit-identical to a plain positive-prompt prediction.
template <typename S>
TensorT<S> cfg_combine(const TensorT<S>& pred_pos, const TensorT<S>& pred_neg,
                       double lambda_cfg) {
    if (!pred_pos.same_shape(pred_neg)) {
        throw InvalidArgument("cfg_combine: shape mismatch");
    }
    if (lambda_cfg == 1.0) return pred_pos;
    if (lambda_cfg == 0.0) return pred_neg;
    TensorT<S> out(pred_pos.shape());
    const S lam = static_cast<S>(lambda_cfg);
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = pred_neg[i] + lam * (pred_pos[i] - pred_neg[i]);
    }
    return out;
}

namespace detail {

// One DDPM posterior update given the eps prediction; shared by the plain and
// tiled samplers so their arithmetic is identical. The implied clean latent
// is clipped to the codec's valid range [-1, 1], which keeps guided
// trajectories (where the extrapolated prediction can overshoot) inside the
// feasible set.
template <typename S>
void ddpm_step_inplace(TensorT<S>& z, const TensorT<S>& eps_hat, double abar_t,
                       double abar_prev, const TensorT<S>* xi) {
    const double a_eff = abar_t / abar_prev;
    const double coef_x0 = std::sqrt(abar_prev) * (1.0 - a_eff) / (1.0 - abar_t);
    const double coef_z = std::sqrt(a_eff) * (1.0 - abar_prev) / (1.0 - abar_t);
    const double inv_sqrt_abar = 1.0 / std::sqrt(abar_t);
    const double eps_scale = std::sqrt(1.0 - abar_t);
    const double var = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - a_eff);
    const double sigma = var > 0.0 ? std::sqrt(var) : 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        const double x0 = std::clamp(
            (static_cast<double>(z[i]) - eps_scale * eps_hat[i]) * inv_sqrt_abar, -1.0,
            1.0);
        double v = coef_x0 * x0 + coef_z * static_cast<double>(z[i]);
        if (xi) v += sigma * static_cast<double>((*xi)[i]);
        z[i] = static_cast<S>(v);
    }
}

}  // namespace detail

// Standard DDPM sampling over a uniform-stride timestep subsequence, starting
// from Gaussian noise, each step guided by the LQ conditioning and (optionally)
// classifier-free guidance between the positive and negative prompts.
// Deterministic given the config seed. The trajectory stream (z_T and
// posterior noise) is separate from the reference-noising stream, so a
// zero-gain personalized run follows the exact trajectory of a base run.
template <typename S>
ImageBuffer sample(Denoiser<S>& model, const ImageBuffer& lq,
                   std::type_identity_t<PersonalizationState<S>*> pstate,
                   const SamplerConfig& config,
                   const NoiseSchedule& sched) {
    config.validate(sched);
    if (lq.height() % (2 * kLatentFactor) != 0 || lq.width() % (2 * kLatentFactor) != 0) {
        throw InvalidArgument("sample: LQ dims must be multiples of 4");
    }
    if (pstate && pstate->ref_latents.empty()) {
        throw InvalidArgument("sample: personalization state has no reference latents");
    }

    RandomStream rng(config.seed, 0x5a3e);
    RandomStream ref_rng(config.seed, 0x0eef);
    const int lh = lq.height() / kLatentFactor;
    const int lw = lq.width() / kLatentFactor;
    TensorT<S> z({model.cfg.latent_channels, lh, lw});
    for (size_t i = 0; i < z.size(); ++i) z[i] = static_cast<S>(rng.normal());

    const auto steps = strided_timesteps(config.num_steps, sched.T);
    const TensorT<S>* ref_latent =
        pstate ? &pstate->ref_latents[static_cast<size_t>(
                     std::min<int>(config.ref_index,
                                   static_cast<int>(pstate->ref_latents.size()) - 1))]
               : nullptr;

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

        TensorT<S> eps_hat;
        if (config.guidance == GuidanceMode::positive_only) {
            eps_hat = model.predict(z, t, &config.positive, &lq, rf, pstate,
                                    config.lambda_att);
        } else {
            TensorT<S> pred_pos =
                model.predict(z, t, &config.positive, &lq, rf, pstate, config.lambda_att);
            TensorT<S> pred_neg =
                model.predict(z, t, &config.negative,
                              config.null_lq_negative ? nullptr : &lq, rf, pstate,
                              config.lambda_att);
            eps_hat = cfg_combine(pred_pos, pred_neg, config.lambda_cfg);
        }

        const double abar_t = sched.alpha_bar[static_cast<size_t>(t)];
        const double abar_prev =
            i > 0 ? sched.alpha_bar[static_cast<size_t>(steps[static_cast<size_t>(i - 1)])]
                  : 1.0;
        if (i > 0) {
            TensorT<S> xi(z.shape());
            for (size_t k = 0; k < xi.size(); ++k) xi[k] = static_cast<S>(rng.normal());
            detail::ddpm_step_inplace(z, eps_hat, abar_t, abar_prev, &xi);
        } else {
            detail::ddpm_step_inplace(z, eps_hat, abar_t, abar_prev,
                                      static_cast<const TensorT<S>*>(nullptr));
        }
    }
    return decode_latent(z);
}

}  // namespace pfr
