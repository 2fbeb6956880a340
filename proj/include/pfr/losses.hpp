#pragma once

#include <type_traits>
#include <vector>

#include "pfr/autodiff.hpp"
#include "pfr/denoiser.hpp"
#include "pfr/schedule.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

struct TrainLossConfig {
    double lambda_gen = 0.1;    // weight of the generative regularizer
    double lambda_pers = 0.01;  // weight of the attention-map regularizer

    void validate() const {
        check(lambda_gen >= 0.0 && lambda_pers >= 0.0, "loss weights must be >= 0");
    }
};

// ||eps - eps_theta(z_t, c, I_LQ, I_Ref)||_2 with z_t = q_sample(z0, t, eps).
// lq == nullptr gives the generative-regularizer variant (null conditioning).
template <typename S>
ad::Ref<S> loss_diff_node(Fwd<S>& f, Denoiser<S>& model, const TensorT<S>& z0, int t,
                          const TensorT<S>& eps, const NoiseSchedule& sched,
                          const PromptTokens& prompt, const ImageBuffer* lq,
                          std::type_identity_t<const std::vector<TensorT<S>>*> ref_features,
                          std::type_identity_t<PersonalizationState<S>*> pstate,
                          double lambda_att = 1.0,
                          std::vector<ad::Ref<S>>* attn_maps_out = nullptr) {
    auto z_t = f.constant(q_sample(z0, t, eps, sched));
    auto pred = model.forward_node(f, z_t, t, &prompt, lq, ref_features, pstate, lambda_att,
                                   nullptr, attn_maps_out);
    auto diff = ad::sub(f.g, f.constant(eps), pred);
    return ad::sqrt_scalar(f.g, ad::sum_sq(f.g, diff));
}

template <typename S>
ad::Ref<S> loss_gen_node(Fwd<S>& f, Denoiser<S>& model, const TensorT<S>& z0, int t,
                         const TensorT<S>& eps, const NoiseSchedule& sched,
                         const PromptTokens& prompt,
                         std::type_identity_t<const std::vector<TensorT<S>>*> ref_features,
                         std::type_identity_t<PersonalizationState<S>*> pstate,
                         double lambda_att = 1.0,
                         std::vector<ad::Ref<S>>* attn_maps_out = nullptr) {
    return loss_diff_node(f, model, z0, t, eps, sched, prompt, nullptr, ref_features,
                          pstate, lambda_att, attn_maps_out);
}

// || A_star / max(A_star) - A_eot / max(A_eot) ||_2^2 from an attention map
// [n_positions, n_tokens]; the star/EOT columns are max-normalized so the
// regularizer is scale-invariant.
template <typename S>
ad::Ref<S> loss_pers_node(Fwd<S>& f, ad::Ref<S> attn_map, int star_col, int eot_col) {
    auto a_star = Denoiser<S>::attention_column(f, attn_map, star_col);
    auto a_eot = Denoiser<S>::attention_column(f, attn_map, eot_col);
    auto ns = ad::div_by_scalar(f.g, a_star, ad::max_all(f.g, a_star));
    auto ne = ad::div_by_scalar(f.g, a_eot, ad::max_all(f.g, a_eot));
    return ad::sum_sq(f.g, ad::sub(f.g, ns, ne));
}

// Value-level variant on raw maps.
template <typename S>
double loss_pers(const TensorT<S>& a_star, const TensorT<S>& a_eot) {
    check(a_star.same_shape(a_eot), "loss_pers: shape mismatch");
    check(a_star.size() > 0, "loss_pers: empty maps");
    S ms = a_star[0];
    S me = a_eot[0];
    for (size_t i = 1; i < a_star.size(); ++i) {
        ms = std::max(ms, a_star[i]);
        me = std::max(me, a_eot[i]);
    }
    if (!(ms > S(0)) || !(me > S(0))) {
        throw DegenerateMap("loss_pers: attention map max must be positive");
    }
    double acc = 0.0;
    for (size_t i = 0; i < a_star.size(); ++i) {
        const double d =
            static_cast<double>(a_star[i]) / ms - static_cast<double>(a_eot[i]) / me;
        acc += d * d;
    }
    return acc;
}

// L = L_Diff + lambda_Gen * L_Gen + lambda_Pers * L_Pers
inline double total_loss(double l_diff, double l_gen, double l_pers,
                         const TrainLossConfig& cfg) {
    cfg.validate();
    return l_diff + cfg.lambda_gen * l_gen + cfg.lambda_pers * l_pers;
}

}  // namespace pfr
