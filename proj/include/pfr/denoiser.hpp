#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pfr/autodiff.hpp"
#include "pfr/image.hpp"
#include "pfr/latent_codec.hpp"
#include "pfr/nn.hpp"
#include "pfr/prompt.hpp"
#include "pfr/rng.hpp"
#include "pfr/schedule.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

struct DenoiserConfig {
    int levels = 3;
    std::array<int, 3> channels{32, 64, 64};
    int latent_channels = kLatentChannels;  // 3 * f^2
    int vocab = tok::kVocabSize;
    int d_tok = 32;
    int d_k = 32;
    int temb_dim = 128;
    int groups = 8;
    int image_size = 64;  // working resolution (latent is image_size / 2)

    // Personalization sites: encoder level 1, encoder level 2, bottleneck.
    static constexpr int kNumAdapterSites = 3;

    int site_channels(int site) const {
        return site == 0 ? channels[1] : channels[2];
    }
};

// Small config for gradient checks and fast tests.
inline DenoiserConfig toy_denoiser_config() {
    DenoiserConfig cfg;
    cfg.channels = {8, 12, 12};
    cfg.d_tok = 8;
    cfg.d_k = 8;
    cfg.temb_dim = 16;
    cfg.groups = 4;
    cfg.image_size = 16;
    return cfg;
}

// Adapter at one site: text cross-attention plus gated image cross-attention
// against reference features, applied as F + gamma (.) P(F, F_ref).
template <typename S>
struct PersonalizationBlock {
    DenseLayer<S> txt_q, txt_k, txt_v, txt_o;
    DenseLayer<S> img_q, img_k, img_v, img_o;
    Param<S>* gamma = nullptr;
    int d_k = 32;

    void init(ParamSet<S>& ps, const std::string& name, int channels, int d_tok, int dk,
              RandomStream& rng) {
        d_k = dk;
        txt_q.init(ps, name + ".txt.q", channels, dk, rng, false, false);
        txt_k.init(ps, name + ".txt.k", d_tok, dk, rng, false, false);
        txt_v.init(ps, name + ".txt.v", d_tok, dk, rng, false, false);
        txt_o.init(ps, name + ".txt.o", dk, channels, rng, false, false);
        img_q.init(ps, name + ".img.q", channels, dk, rng, false, false);
        img_k.init(ps, name + ".img.k", channels, dk, rng, false, false);
        img_v.init(ps, name + ".img.v", channels, dk, rng, false, false);
        img_o.init(ps, name + ".img.o", dk, channels, rng, false, false);
        // Zero-initialized gain: a fresh adapter is an exact no-op.
        gamma = &ps.add(name + ".gamma", TensorT<S>({channels}));
    }
};

// Weights that define one personalized identity: the adapter blocks, their
// gains, and the learnable star token embedding. Base-model weights are never
// part of this state. Reference latents ride along so a saved state restores
// without access to the original reference images.
template <typename S>
struct PersonalizationState {
    ParamSet<S> params;
    std::vector<PersonalizationBlock<S>> blocks;
    Param<S>* star = nullptr;  // [d_tok]
    std::vector<TensorT<S>> ref_latents;
};

template <typename S>
class Denoiser {
public:
    Denoiser(const DenoiserConfig& config, uint64_t init_seed) : cfg(config) {
        RandomStream rng(init_seed, 0xba5e);
        build(rng);
    }

    DenoiserConfig cfg;
    ParamSet<S> base;

    // ------------------------------------------------------------------
    // Graph-level forward
    // ------------------------------------------------------------------

    // Predicted noise for latent z_t at timestep t.
    //  - prompt == nullptr: text cross-attention is skipped (reference path)
    //  - lq == nullptr: identity modulation at every level (the null
    //    conditioning of the generative regularizer)
    //  - pstate == nullptr or ref_features == nullptr: personalization
    //    blocks are skipped entirely (pure base path)
    // attn_maps_out, when given, receives the per-site adapter text-attention
    // maps evaluated on the reference features (rows sum to 1 over tokens).
    ad::Ref<S> forward_node(Fwd<S>& f, ad::Ref<S> z_t, int t, const PromptTokens* prompt,
                            const ImageBuffer* lq,
                            const std::vector<TensorT<S>>* ref_features,
                            PersonalizationState<S>* pstate, double lambda_att,
                            std::vector<ad::Ref<S>>* site_features_out = nullptr,
                            std::vector<ad::Ref<S>>* attn_maps_out = nullptr) {
        check_latent_shape(z_t->value);
        const bool personalized = pstate != nullptr && ref_features != nullptr;
        if (personalized) {
            check(ref_features->size() == DenoiserConfig::kNumAdapterSites,
                  "forward: expected one reference feature map per adapter site");
        }
        if (prompt) prompt->validate();
        if (lq) {
            if (lq->height() != z_t->value.dim(1) * kLatentFactor ||
                lq->width() != z_t->value.dim(2) * kLatentFactor) {
                throw InvalidArgument("forward: LQ image dims must be 2x latent dims");
            }
        }

        auto temb = time_embedding(f, t);
        ad::Ref<S> emb = prompt ? token_embeddings(f, *prompt, pstate) : nullptr;

        std::array<ad::Ref<S>, 3> lqf{nullptr, nullptr, nullptr};
        if (lq) {
            lqf = lq_features(f, *lq, temb);
        }

        auto x = conv_in_(f, z_t);
        auto e0 = sft(f, res_[0](f, x, temb), lqf[0]);

        auto h1 = down_[0](f, ad::avgpool2(f.g, e0));
        auto e1 = sft(f, res_[1](f, h1, temb), lqf[1]);
        if (emb) e1 = attn_[0](f, e1, emb);
        if (site_features_out) site_features_out->push_back(e1);
        if (personalized) {
            e1 = adapter_site(f, 0, e1, (*ref_features)[0], emb, pstate, lambda_att,
                              attn_maps_out);
        }

        auto h2 = down_[1](f, ad::avgpool2(f.g, e1));
        auto e2 = sft(f, res_[2](f, h2, temb), lqf[2]);
        if (emb) e2 = attn_[1](f, e2, emb);
        if (site_features_out) site_features_out->push_back(e2);
        if (personalized) {
            e2 = adapter_site(f, 1, e2, (*ref_features)[1], emb, pstate, lambda_att,
                              attn_maps_out);
        }

        auto m = sft(f, res_mid_(f, e2, temb), lqf[2]);
        if (emb) m = attn_[2](f, m, emb);
        if (site_features_out) site_features_out->push_back(m);
        if (personalized) {
            m = adapter_site(f, 2, m, (*ref_features)[2], emb, pstate, lambda_att,
                             attn_maps_out);
        }

        auto d2 = sft(f, res_dec_[2](f, ad::concat_channels(f.g, m, e2), temb), lqf[2]);
        auto u1 = up_[1](f, ad::upsample_nearest2(f.g, d2));
        auto d1 = sft(f, res_dec_[1](f, ad::concat_channels(f.g, u1, e1), temb), lqf[1]);
        auto u0 = up_[0](f, ad::upsample_nearest2(f.g, d1));
        auto d0 = sft(f, res_dec_[0](f, ad::concat_channels(f.g, u0, e0), temb), lqf[0]);

        return conv_out_(f, ad::silu(f.g, norm_out_(f, d0)));
    }

    // ------------------------------------------------------------------
    // Value-level API
    // ------------------------------------------------------------------

    TensorT<S> predict(const TensorT<S>& z_t, int t, const PromptTokens* prompt,
                       const ImageBuffer* lq, const std::vector<TensorT<S>>* ref_features,
                       PersonalizationState<S>* pstate, double lambda_att = 1.0) {
        ad::Graph<S> g;
        Fwd<S> f(g, /*train=*/false);
        auto z = f.constant(z_t);
        auto out = forward_node(f, z, t, prompt, lq, ref_features, pstate, lambda_att);
        return out->value;
    }

    // Per-level conditioning features extracted from the LQ image; spatial
    // size halves per level. Zero features mean identity modulation.
    std::vector<TensorT<S>> encode_lq_condition(const ImageBuffer& lq, int t) {
        ad::Graph<S> g;
        Fwd<S> f(g, /*train=*/false);
        auto temb = time_embedding(f, t);
        auto feats = lq_features(f, lq, temb);
        return {feats[0]->value, feats[1]->value, feats[2]->value};
    }

    // Runs the reference image through the frozen base path (no prompt, no LQ
    // conditioning, no adapters) at timestep t and collects the intermediate
    // features at each adapter site.
    std::vector<TensorT<S>> extract_reference_features(const TensorT<S>& ref_latent, int t,
                                                       const TensorT<S>& eps,
                                                       const NoiseSchedule& sched) {
        auto z_t = q_sample(ref_latent, t, eps, sched);
        ad::Graph<S> g;
        Fwd<S> f(g, /*train=*/false);
        auto z = f.constant(z_t);
        std::vector<ad::Ref<S>> sites;
        forward_node(f, z, t, nullptr, nullptr, nullptr, nullptr, 1.0, &sites);
        std::vector<TensorT<S>> out;
        out.reserve(sites.size());
        for (auto s : sites) out.push_back(s->value);
        return out;
    }

    std::vector<TensorT<S>> extract_reference_features(const ImageBuffer& ref, int t,
                                                       RandomStream& noise_rng,
                                                       const NoiseSchedule& sched) {
        auto z0 = encode_latent<S>(ref);
        auto eps = randn_like(z0, noise_rng);
        return extract_reference_features(z0, t, eps, sched);
    }

    // Adapter text-attention map over reference features: rows (one per
    // reference spatial position) sum to 1 across prompt tokens.
    TensorT<S> attention_map(int site, const TensorT<S>& ref_feature,
                             const PromptTokens& prompt, PersonalizationState<S>& pstate) {
        prompt.validate();
        if (prompt.star_index() < 0) {
            throw InvalidPrompt("attention_map: prompt must contain the star token");
        }
        check(site >= 0 && site < DenoiserConfig::kNumAdapterSites, "bad adapter site");
        check(ref_feature.dim(0) == cfg.site_channels(site),
              "attention_map: feature/site channel mismatch");
        ad::Graph<S> g;
        Fwd<S> f(g, /*train=*/false);
        auto emb = token_embeddings(f, prompt, &pstate);
        auto a = adapter_text_attention(f, site, f.constant(ref_feature), emb, &pstate);
        return a->value;
    }

    // ------------------------------------------------------------------
    // Personalization state
    // ------------------------------------------------------------------

    PersonalizationState<S> init_personalization(uint64_t seed) const {
        PersonalizationState<S> st;
        RandomStream rng(seed, 0xada7);
        st.blocks.resize(DenoiserConfig::kNumAdapterSites);
        for (int i = 0; i < DenoiserConfig::kNumAdapterSites; ++i) {
            st.blocks[static_cast<size_t>(i)].init(st.params, "pb" + std::to_string(i),
                                                   cfg.site_channels(i), cfg.d_tok, cfg.d_k,
                                                   rng);
        }
        // Star starts as a copy of the base table's star row, so a fresh state
        // leaves every forward bit-identical to the base model; training then
        // moves only the copy.
        const auto& table = base.at("tok.table").value;
        TensorT<S> star({cfg.d_tok});
        for (int j = 0; j < cfg.d_tok; ++j) {
            star[static_cast<size_t>(j)] =
                table[static_cast<size_t>(tok::kStar) * cfg.d_tok + j];
        }
        st.star = &st.params.add("star", std::move(star));
        return st;
    }

    int latent_size() const { return cfg.image_size / kLatentFactor; }

private:
    // Layers -------------------------------------------------------------
    DenseLayer<S> time_fc1_, time_fc2_;
    Conv2dLayer<S> conv_in_, conv_out_;
    NormLayer<S> norm_out_;
    std::array<ResBlock<S>, 3> res_;       // encoder per level
    ResBlock<S> res_mid_;
    std::array<ResBlock<S>, 3> res_dec_;   // decoder per level
    std::array<Conv2dLayer<S>, 2> down_;   // after avgpool
    std::array<Conv2dLayer<S>, 2> up_;     // after nearest upsample (1x1)
    std::array<CrossAttention<S>, 3> attn_;  // enc1, enc2, mid

    // Time-aware LQ conditioning encoder.
    Conv2dLayer<S> lq_in_;
    std::array<Conv2dLayer<S>, 3> lq_conv_;
    std::array<DenseLayer<S>, 3> lq_temb_;
    std::array<Conv2dLayer<S>, 3> lq_head_;  // 1x1, zero-init: identity modulation

    void build(RandomStream& rng) {
        const auto& ch = cfg.channels;
        time_fc1_.init(base, "time.fc1", cfg.temb_dim / 2, cfg.temb_dim, rng);
        time_fc2_.init(base, "time.fc2", cfg.temb_dim, cfg.temb_dim, rng);
        base.add("tok.table",
                 TensorT<S>::randn({cfg.vocab, cfg.d_tok}, rng, 0.02));

        conv_in_.init(base, "in.conv", cfg.latent_channels, ch[0], 3, rng);
        res_[0].init(base, "enc0.res", ch[0], ch[0], cfg.temb_dim, cfg.groups, rng);
        down_[0].init(base, "down0.conv", ch[0], ch[1], 3, rng);
        res_[1].init(base, "enc1.res", ch[1], ch[1], cfg.temb_dim, cfg.groups, rng);
        attn_[0].init(base, "enc1.attn", ch[1], cfg.d_tok, cfg.d_k, cfg.groups, rng);
        down_[1].init(base, "down1.conv", ch[1], ch[2], 3, rng);
        res_[2].init(base, "enc2.res", ch[2], ch[2], cfg.temb_dim, cfg.groups, rng);
        attn_[1].init(base, "enc2.attn", ch[2], cfg.d_tok, cfg.d_k, cfg.groups, rng);
        res_mid_.init(base, "mid.res", ch[2], ch[2], cfg.temb_dim, cfg.groups, rng);
        attn_[2].init(base, "mid.attn", ch[2], cfg.d_tok, cfg.d_k, cfg.groups, rng);

        res_dec_[2].init(base, "dec2.res", 2 * ch[2], ch[2], cfg.temb_dim, cfg.groups, rng);
        up_[1].init(base, "up1.conv", ch[2], ch[1], 1, rng);
        res_dec_[1].init(base, "dec1.res", 2 * ch[1], ch[1], cfg.temb_dim, cfg.groups, rng);
        up_[0].init(base, "up0.conv", ch[1], ch[0], 1, rng);
        res_dec_[0].init(base, "dec0.res", 2 * ch[0], ch[0], cfg.temb_dim, cfg.groups, rng);

        norm_out_.init(base, "out.norm", ch[0], cfg.groups);
        conv_out_.init(base, "out.conv", ch[0], cfg.latent_channels, 3, rng,
                       /*zero_init=*/true);

        lq_in_.init(base, "lq.in", 3, ch[0] / 2, 3, rng);
        lq_conv_[0].init(base, "lq.conv0", ch[0] / 2, ch[0], 3, rng);
        lq_conv_[1].init(base, "lq.conv1", ch[0], ch[1], 3, rng);
        lq_conv_[2].init(base, "lq.conv2", ch[1], ch[2], 3, rng);
        for (int i = 0; i < 3; ++i) {
            lq_temb_[static_cast<size_t>(i)].init(base, "lq.temb" + std::to_string(i),
                                                  cfg.temb_dim, ch[static_cast<size_t>(i)],
                                                  rng);
            lq_head_[static_cast<size_t>(i)].init(base, "lq.head" + std::to_string(i),
                                                  ch[static_cast<size_t>(i)],
                                                  2 * ch[static_cast<size_t>(i)], 1, rng,
                                                  /*zero_init=*/true);
        }
    }

    void check_latent_shape(const TensorT<S>& z) const {
        if (z.rank() != 3 || z.dim(0) != cfg.latent_channels || z.dim(1) % 4 != 0 ||
            z.dim(2) % 4 != 0 || z.dim(1) < 4 || z.dim(2) < 4) {
            throw InvalidArgument("forward: latent must be [" +
                                  std::to_string(cfg.latent_channels) +
                                  ",H,W] with H,W multiples of 4, got " +
                                  shape_str(z.shape()));
        }
    }

    ad::Ref<S> time_embedding(Fwd<S>& f, int t) {
        auto sin = f.constant(sinusoid_embedding<S>(t, cfg.temb_dim / 2));
        auto h = time_fc2_(f, ad::silu(f.g, time_fc1_(f, sin)));
        return ad::silu(f.g, h);  // [1, temb_dim]
    }

    ad::Ref<S> token_embeddings(Fwd<S>& f, const PromptTokens& prompt,
                                PersonalizationState<S>* pstate) {
        auto table = f.use(base.at("tok.table"));
        std::vector<ad::Ref<S>> rows;
        rows.reserve(prompt.ids.size());
        for (int id : prompt.ids) {
            if (id == tok::kStar && pstate) {
                rows.push_back(f.use(*pstate->star));
            } else {
                rows.push_back(ad::row(f.g, table, id));
            }
        }
        return ad::stack_rows(f.g, rows);  // [m, d_tok]
    }

    // out = h * (1 + scale) + shift; feat packs [scale | shift] channels.
    static ad::Ref<S> sft(Fwd<S>& f, ad::Ref<S> h, ad::Ref<S> feat) {
        if (!feat) return h;
        const int C = h->value.dim(0);
        auto sc = ad::slice_channels(f.g, feat, 0, C);
        auto sh = ad::slice_channels(f.g, feat, C, C);
        return ad::add(f.g, ad::add(f.g, h, ad::mul(f.g, h, sc)), sh);
    }

    std::array<ad::Ref<S>, 3> lq_features(Fwd<S>& f, const ImageBuffer& lq,
                                          ad::Ref<S> temb) {
        TensorT<S> img({3, lq.height(), lq.width()});
        for (int y = 0; y < lq.height(); ++y) {
            for (int x = 0; x < lq.width(); ++x) {
                for (int c = 0; c < 3; ++c) {
                    img.at(c, y, x) = static_cast<S>(lq.at(y, x, c));
                }
            }
        }
        auto l = ad::silu(f.g, lq_in_(f, f.constant(std::move(img))));
        std::array<ad::Ref<S>, 3> out{nullptr, nullptr, nullptr};
        for (int i = 0; i < 3; ++i) {
            l = lq_conv_[static_cast<size_t>(i)](f, ad::avgpool2(f.g, l));
            auto shift = ResBlock<S>::reshape_vec(f, lq_temb_[static_cast<size_t>(i)](f, temb));
            l = ad::silu(f.g, ad::add_channel(f.g, l, shift));
            out[static_cast<size_t>(i)] = lq_head_[static_cast<size_t>(i)](f, l);
        }
        return out;
    }

    ad::Ref<S> adapter_text_attention(Fwd<S>& f, int site, ad::Ref<S> feature,
                                      ad::Ref<S> emb, PersonalizationState<S>* pstate) {
        auto& pb = pstate->blocks[static_cast<size_t>(site)];
        auto ff = ad::chw_to_nc(f.g, feature);
        auto q = pb.txt_q(f, ff);
        auto k = pb.txt_k(f, emb);
        auto logits = ad::scale(f.g, ad::matmul_nt(f.g, q, k), 1.0 / std::sqrt(double(pb.d_k)));
        return ad::softmax_rows(f.g, logits);
    }

    ad::Ref<S> adapter_site(Fwd<S>& f, int site, ad::Ref<S> F, const TensorT<S>& ref_feat,
                            ad::Ref<S> emb, PersonalizationState<S>* pstate,
                            double lambda_att, std::vector<ad::Ref<S>>* attn_maps_out) {
        check(emb != nullptr, "personalization requires a prompt");
        // Reference features act as attention context: their channel width
        // must match the site, their spatial extent is free (tiles of any
        // size attend to the same reference).
        check(ref_feat.rank() == 3 && ref_feat.dim(0) == F->value.dim(0),
              "adapter site: reference feature level mismatch at site " +
                  std::to_string(site));
        auto& pb = pstate->blocks[static_cast<size_t>(site)];
        const int H = F->value.dim(1);
        const int W = F->value.dim(2);
        auto ref = f.constant(ref_feat);
        auto ff = ad::chw_to_nc(f.g, F);
        auto rf = ad::chw_to_nc(f.g, ref);

        // Text branch.
        auto qt = pb.txt_q(f, ff);
        auto kt = pb.txt_k(f, emb);
        auto vt = pb.txt_v(f, emb);
        auto at = ad::softmax_rows(
            f.g, ad::scale(f.g, ad::matmul_nt(f.g, qt, kt), 1.0 / std::sqrt(double(pb.d_k))));
        auto ot = pb.txt_o(f, ad::matmul(f.g, at, vt));

        // Image branch against reference features.
        auto qi = pb.img_q(f, ff);
        auto ki = pb.img_k(f, rf);
        auto vi = pb.img_v(f, rf);
        auto ai = ad::softmax_rows(
            f.g, ad::scale(f.g, ad::matmul_nt(f.g, qi, ki), 1.0 / std::sqrt(double(pb.d_k))));
        auto oi = pb.img_o(f, ad::matmul(f.g, ai, vi));

        auto p = ad::add(f.g, ot, ad::scale(f.g, oi, lambda_att));
        auto gated = ad::mul_channel(f.g, ad::nc_to_chw(f.g, p, H, W), f.use(*pb.gamma));

        if (attn_maps_out) {
            // Attention of reference features onto prompt tokens; the star
            // and EOT columns feed the personalization regularizer.
            attn_maps_out->push_back(adapter_text_attention(f, site, ref, emb, pstate));
        }
        return ad::add(f.g, F, gated);
    }

public:
    // Foreground mask from an attention column: threshold at its mean, ties
    // resolved as foreground (>=).
    static std::vector<bool> attention_mask(const TensorT<S>& a_col) {
        check(a_col.size() > 0, "attention_mask: empty column");
        double mean = 0.0;
        for (size_t i = 0; i < a_col.size(); ++i) mean += static_cast<double>(a_col[i]);
        mean /= static_cast<double>(a_col.size());
        std::vector<bool> mask(a_col.size());
        for (size_t i = 0; i < a_col.size(); ++i) {
            mask[i] = static_cast<double>(a_col[i]) >= mean;
        }
        return mask;
    }

    // Column extraction helper for attention maps: [n,m] -> [n] at token j.
    static ad::Ref<S> attention_column(Fwd<S>& f, ad::Ref<S> a, int col) {
        const int n = a->value.dim(0);
        const int m = a->value.dim(1);
        check(col >= 0 && col < m, "attention_column: out of range");
        TensorT<S> out({n});
        for (int i = 0; i < n; ++i) {
            out[static_cast<size_t>(i)] = a->value[static_cast<size_t>(i) * m + col];
        }
        ad::Ref<S> node = f.g.make(std::move(out), a->requires_grad, nullptr);
        if (node->requires_grad) {
            node->backward = [node, a, col, m] {
                a->ensure_grad();
                for (size_t i = 0; i < node->grad.size(); ++i) {
                    a->grad[i * static_cast<size_t>(m) + col] += node->grad[i];
                }
            };
        }
        return node;
    }
};

}  // namespace pfr
