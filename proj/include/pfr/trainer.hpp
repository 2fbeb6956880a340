#pragma once

#include <functional>
#include <vector>

#include "pfr/dataset.hpp"
#include "pfr/degradation.hpp"
#include "pfr/denoiser.hpp"
#include "pfr/latent_codec.hpp"
#include "pfr/losses.hpp"
#include "pfr/optimizer.hpp"
#include "pfr/schedule.hpp"

namespace pfr {

struct BaseTrainConfig {
    int steps = 3000;  // desk-scale stand-in for epoch counts
    double crop_prob = 0.5;
    double p_hq = 0.03;
    DegradationLevel level = DegradationLevel::heavy;
    double lr = 1e-3;
    uint64_t seed = 0;
    int crop_size = 64;

    void validate() const {
        check(steps >= 1, "steps must be >= 1");
        check(p_hq >= 0.0 && p_hq <= 1.0, "p_hq must be in [0,1]");
    }
};

struct PersonalizeConfig {
    int iterations = 500;
    int n_ref = 5;
    int batch = 2;
    double lr_adapter = 1e-4;
    double lr_token = 5e-3;
    TrainLossConfig loss;
    uint64_t seed = 0;
    double lambda_att = 1.0;
    DegradationLevel level = DegradationLevel::heavy;
    double p_hq = 0.03;
    int crop_size = 64;
    // Identity personalization samples resize-only (no random crops).
    double crop_prob = 0.0;

    void validate() const {
        check(iterations >= 0, "iterations must be >= 0");
        check(n_ref >= 1, "n_ref must be >= 1");
        check(batch >= 1, "batch must be >= 1");
        loss.validate();
    }
};

struct TrainLogRecord {
    int step = 0;
    double l_diff = 0.0;
    double l_gen = 0.0;
    double l_pers = 0.0;
    double total = 0.0;
};

using TrainLogFn = std::function<void(const TrainLogRecord&)>;

// Trains the base denoiser and its LQ conditioning encoder on
// (degrade(x), x) pairs with the diffusion loss only; no references, no
// adapters. Deterministic given (config.seed, platform).
template <typename S>
void train_base(Denoiser<S>& model, const IdentityDataset& dataset,
                const BaseTrainConfig& cfg, const NoiseSchedule& sched,
                const TrainLogFn& log = nullptr) {
    cfg.validate();
    if (dataset.empty()) throw EmptyDataset("train_base: dataset is empty");

    RandomStream data_rng(cfg.seed, 1);
    RandomStream deg_rng(cfg.seed, 2);
    RandomStream diff_rng(cfg.seed, 3);

    model.base.set_trainable(true);
    model.base.zero_grads();
    Adam<S> opt;
    opt.add_params(model.base, cfg.lr);

    const PromptTokens prompt = base_prompt();

    for (int step = 0; step < cfg.steps; ++step) {
        ImageBuffer img =
            sample_training_example(dataset, cfg.crop_size, cfg.crop_prob, data_rng);
        const DegradationRecord rec = sample_degradation(cfg.level, deg_rng, cfg.p_hq);
        const ImageBuffer lq = degrade(img, rec);

        const auto z0 = encode_latent<S>(img);
        const int t = static_cast<int>(diff_rng.uniform_int(static_cast<uint64_t>(sched.T)));
        TensorT<S> eps(z0.shape());
        for (size_t i = 0; i < eps.size(); ++i) eps[i] = static_cast<S>(diff_rng.normal());

        ad::Graph<S> g;
        Fwd<S> f(g, /*train=*/true);
        auto loss = loss_diff_node(f, model, z0, t, eps, sched, prompt, &lq, nullptr,
                                   nullptr);
        g.backward(loss);
        f.collect_grads();
        opt.step();

        if (log) {
            TrainLogRecord r;
            r.step = step;
            r.l_diff = static_cast<double>(loss->value[0]);
            r.total = r.l_diff;
            log(r);
        }
    }
}

// Per-identity fine-tuning: only the adapter blocks, their gains, and the
// star token embedding receive updates; the base stays frozen (bit-identical
// weights before and after). Each iteration draws an independent (t, eps,
// reference) pair for the diffusion term and for the generative-regularizer
// term; the attention-map regularizer reads the diffusion forward's maps.
template <typename S>
PersonalizationState<S> personalize(Denoiser<S>& model, const ReferenceSet& refs,
                                    const std::vector<ImageBuffer>& train_images,
                                    const PersonalizeConfig& cfg,
                                    const NoiseSchedule& sched,
                                    const TrainLogFn& log = nullptr) {
    cfg.validate();
    if (refs.images.empty()) throw EmptyDataset("personalize: empty reference set");
    const std::vector<ImageBuffer>& pool =
        train_images.empty() ? refs.images : train_images;

    model.base.set_trainable(false);
    PersonalizationState<S> state = model.init_personalization(cfg.seed);
    state.ref_latents.reserve(refs.images.size());
    for (const auto& r : refs.images) {
        state.ref_latents.push_back(
            encode_latent<S>(resize_bilinear(r, cfg.crop_size, cfg.crop_size)));
    }

    RandomStream data_rng(cfg.seed, 11);
    RandomStream deg_rng(cfg.seed, 12);
    RandomStream diff_rng(cfg.seed, 13);
    RandomStream ref_rng(cfg.seed, 14);

    state.params.zero_grads();
    Adam<S> opt;
    state.params.for_each([&](Param<S>& p) {
        opt.add_param(p, p.name == "star" ? cfg.lr_token : cfg.lr_adapter);
    });

    const PromptTokens prompt = positive_prompt();
    const int star_col = prompt.star_index();
    const int eot_col = prompt.eot_index();
    const double inv_batch = 1.0 / cfg.batch;

    for (int step = 0; step < cfg.iterations; ++step) {
        TrainLogRecord rec_log;
        rec_log.step = step;

        for (int b = 0; b < cfg.batch; ++b) {
            const ImageBuffer& pick = pool[data_rng.uniform_int(pool.size())];
            ImageBuffer img;
            if (cfg.crop_prob > 0.0 && data_rng.bernoulli(cfg.crop_prob)) {
                check(pick.height() >= cfg.crop_size && pick.width() >= cfg.crop_size,
                      "personalize: image smaller than crop size");
                const int y0 = static_cast<int>(
                    data_rng.uniform_int(pick.height() - cfg.crop_size + 1));
                const int x0 = static_cast<int>(
                    data_rng.uniform_int(pick.width() - cfg.crop_size + 1));
                img = crop(pick, y0, x0, cfg.crop_size, cfg.crop_size);
            } else {
                img = resize_bilinear(pick, cfg.crop_size, cfg.crop_size);
            }
            const DegradationRecord rec = sample_degradation(cfg.level, deg_rng, cfg.p_hq);
            const ImageBuffer lq = degrade(img, rec);
            const auto z0 = encode_latent<S>(img);

            // Diffusion term plus the attention-map regularizer.
            {
                const int t =
                    static_cast<int>(diff_rng.uniform_int(static_cast<uint64_t>(sched.T)));
                TensorT<S> eps(z0.shape());
                for (size_t i = 0; i < eps.size(); ++i) {
                    eps[i] = static_cast<S>(diff_rng.normal());
                }
                const ImageBuffer& ref = sample_reference(refs, ref_rng);
                TensorT<S> eps_ref({model.cfg.latent_channels, cfg.crop_size / 2,
                                    cfg.crop_size / 2});
                for (size_t i = 0; i < eps_ref.size(); ++i) {
                    eps_ref[i] = static_cast<S>(ref_rng.normal());
                }
                auto ref_feats = model.extract_reference_features(
                    encode_latent<S>(resize_bilinear(ref, cfg.crop_size, cfg.crop_size)), t,
                    eps_ref, sched);

                ad::Graph<S> g;
                Fwd<S> f(g, /*train=*/true);
                std::vector<ad::Ref<S>> maps;
                auto l_diff = loss_diff_node(f, model, z0, t, eps, sched, prompt, &lq,
                                             &ref_feats, &state, cfg.lambda_att, &maps);
                std::vector<std::pair<ad::Ref<S>, double>> terms;
                terms.push_back({l_diff, inv_batch});
                double pers_value = 0.0;
                if (cfg.loss.lambda_pers > 0.0 && !maps.empty()) {
                    const double wp = cfg.loss.lambda_pers * inv_batch / maps.size();
                    for (auto m : maps) {
                        auto lp = loss_pers_node<S>(f, m, star_col, eot_col);
                        terms.push_back({lp, wp});
                        pers_value += static_cast<double>(lp->value[0]) / maps.size();
                    }
                }
                auto root = ad::add_scalars(f.g, terms);
                g.backward(root);
                f.collect_grads();
                rec_log.l_diff += static_cast<double>(l_diff->value[0]) * inv_batch;
                rec_log.l_pers += pers_value * inv_batch;
            }

            // Generative regularizer: independent draws, null LQ conditioning.
            if (cfg.loss.lambda_gen > 0.0) {
                const int t =
                    static_cast<int>(diff_rng.uniform_int(static_cast<uint64_t>(sched.T)));
                TensorT<S> eps(z0.shape());
                for (size_t i = 0; i < eps.size(); ++i) {
                    eps[i] = static_cast<S>(diff_rng.normal());
                }
                const ImageBuffer& ref = sample_reference(refs, ref_rng);
                TensorT<S> eps_ref({model.cfg.latent_channels, cfg.crop_size / 2,
                                    cfg.crop_size / 2});
                for (size_t i = 0; i < eps_ref.size(); ++i) {
                    eps_ref[i] = static_cast<S>(ref_rng.normal());
                }
                auto ref_feats = model.extract_reference_features(
                    encode_latent<S>(resize_bilinear(ref, cfg.crop_size, cfg.crop_size)), t,
                    eps_ref, sched);

                ad::Graph<S> g;
                Fwd<S> f(g, /*train=*/true);
                auto l_gen = loss_gen_node(f, model, z0, t, eps, sched, prompt, &ref_feats,
                                           &state, cfg.lambda_att);
                auto root = ad::add_scalars(
                    f.g, {{l_gen, cfg.loss.lambda_gen * inv_batch}});
                g.backward(root);
                f.collect_grads();
                rec_log.l_gen += static_cast<double>(l_gen->value[0]) * inv_batch;
            }
        }

        opt.step();
        if (log) {
            rec_log.total = rec_log.l_diff + cfg.loss.lambda_gen * rec_log.l_gen +
                            cfg.loss.lambda_pers * rec_log.l_pers;
            log(rec_log);
        }
    }
    return state;
}

}  // namespace pfr
