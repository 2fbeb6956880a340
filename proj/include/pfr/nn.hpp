#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "pfr/autodiff.hpp"
#include "pfr/rng.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

template <typename S>
struct Param {
    std::string name;
    TensorT<S> value;
    TensorT<S> grad;       // accumulated across graphs until the optimizer step
    bool trainable = true;

    void zero_grad() {
        if (grad.empty()) grad = TensorT<S>(value.shape());
        grad.fill(S(0));
    }
};

// Named parameter collection with stable iteration order (serialization and
// hashing depend on it).
template <typename S>
class ParamSet {
public:
    Param<S>& add(const std::string& name, TensorT<S> init) {
        check(params_.find(name) == params_.end(), "duplicate param: " + name);
        auto p = std::make_unique<Param<S>>();
        p->name = name;
        p->value = std::move(init);
        p->grad = TensorT<S>(p->value.shape());
        Param<S>* raw = p.get();
        params_.emplace(name, std::move(p));
        return *raw;
    }

    Param<S>& at(const std::string& name) {
        auto it = params_.find(name);
        check(it != params_.end(), "unknown param: " + name);
        return *it->second;
    }

    const Param<S>& at(const std::string& name) const {
        auto it = params_.find(name);
        check(it != params_.end(), "unknown param: " + name);
        return *it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    template <typename F>
    void for_each(F&& f) {
        for (auto& [name, p] : params_) f(*p);
    }

    template <typename F>
    void for_each(F&& f) const {
        for (const auto& [name, p] : params_) f(*p);
    }

    void zero_grads() {
        for_each([](Param<S>& p) { p.zero_grad(); });
    }

    void set_trainable(bool t) {
        for_each([t](Param<S>& p) { p.trainable = t; });
    }

    size_t count() const { return params_.size(); }

    size_t scalar_count() const {
        size_t n = 0;
        for_each([&n](const Param<S>& p) { n += p.value.size(); });
        return n;
    }

private:
    std::map<std::string, std::unique_ptr<Param<S>>> params_;
};

// Binds parameters into one graph. Each parameter gets a single leaf per
// graph so every use shares the gradient accumulator; collect_grads() pushes
// leaf gradients back into the persistent Param.grad.
template <typename S>
class Fwd {
public:
    Fwd(ad::Graph<S>& graph, bool train) : g(graph), train_(train) {}

    ad::Graph<S>& g;

    ad::Ref<S> use(Param<S>& p) {
        auto it = cache_.find(&p);
        if (it != cache_.end()) return it->second;
        ad::Ref<S> ref = g.leaf(p.value, train_ && p.trainable);
        cache_.emplace(&p, ref);
        bound_.emplace_back(&p, ref);
        return ref;
    }

    ad::Ref<S> constant(TensorT<S> v) { return g.leaf(std::move(v), false); }

    bool training() const { return train_; }

    void collect_grads() {
        for (auto& [p, ref] : bound_) {
            if (ref->requires_grad && !ref->grad.empty()) {
                for (size_t i = 0; i < p->grad.size(); ++i) {
                    p->grad[i] += ref->grad[i];
                }
            }
        }
    }

private:
    bool train_;
    std::unordered_map<Param<S>*, ad::Ref<S>> cache_;
    std::vector<std::pair<Param<S>*, ad::Ref<S>>> bound_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename S>
struct Conv2dLayer {
    Param<S>* w = nullptr;
    Param<S>* b = nullptr;
    int pad = 1;

    void init(ParamSet<S>& ps, const std::string& name, int cin, int cout, int k,
              RandomStream& rng, bool zero_init = false) {
        pad = k / 2;
        const double scale = zero_init ? 0.0 : 1.0 / std::sqrt(double(cin) * k * k);
        w = &ps.add(name + ".w", TensorT<S>::randn({cout, cin, k, k}, rng, scale));
        b = &ps.add(name + ".b", TensorT<S>({cout}));
    }

    ad::Ref<S> operator()(Fwd<S>& f, ad::Ref<S> x) const {
        return ad::conv2d(f.g, x, f.use(*w), f.use(*b), pad);
    }
};

template <typename S>
struct DenseLayer {
    Param<S>* w = nullptr;
    Param<S>* b = nullptr;

    void init(ParamSet<S>& ps, const std::string& name, int din, int dout,
              RandomStream& rng, bool zero_init = false, bool bias = true) {
        const double scale = zero_init ? 0.0 : 1.0 / std::sqrt(double(din));
        w = &ps.add(name + ".w", TensorT<S>::randn({din, dout}, rng, scale));
        if (bias) b = &ps.add(name + ".b", TensorT<S>({dout}));
    }

    ad::Ref<S> operator()(Fwd<S>& f, ad::Ref<S> x) const {
        return ad::linear(f.g, x, f.use(*w), b ? f.use(*b) : ad::Ref<S>(nullptr));
    }
};

template <typename S>
struct NormLayer {
    Param<S>* gamma = nullptr;
    Param<S>* beta = nullptr;
    int groups = 8;

    void init(ParamSet<S>& ps, const std::string& name, int channels, int groups_in) {
        groups = groups_in;
        gamma = &ps.add(name + ".g", TensorT<S>::full({channels}, S(1)));
        beta = &ps.add(name + ".b", TensorT<S>({channels}));
    }

    ad::Ref<S> operator()(Fwd<S>& f, ad::Ref<S> x) const {
        return ad::group_norm(f.g, x, f.use(*gamma), f.use(*beta), groups);
    }
};

// norm -> silu -> conv, plus a per-channel time-embedding shift and a skip
// connection (1x1 projected when the channel count changes).
template <typename S>
struct ResBlock {
    NormLayer<S> norm;
    Conv2dLayer<S> conv;
    DenseLayer<S> temb_proj;
    Conv2dLayer<S> skip;  // only when cin != cout
    bool has_skip_proj = false;

    void init(ParamSet<S>& ps, const std::string& name, int cin, int cout, int temb_dim,
              int groups, RandomStream& rng) {
        norm.init(ps, name + ".norm", cin, groups);
        conv.init(ps, name + ".conv", cin, cout, 3, rng);
        temb_proj.init(ps, name + ".temb", temb_dim, cout, rng);
        if (cin != cout) {
            skip.init(ps, name + ".skip", cin, cout, 1, rng);
            has_skip_proj = true;
        }
    }

    ad::Ref<S> operator()(Fwd<S>& f, ad::Ref<S> x, ad::Ref<S> temb_silu) const {
        auto h = conv(f, ad::silu(f.g, norm(f, x)));
        // temb_silu: [1, temb_dim] -> per-channel shift
        auto shift = reshape_vec(f, temb_proj(f, temb_silu));
        h = ad::add_channel(f.g, h, shift);
        auto s = has_skip_proj ? skip(f, x) : x;
        return ad::add(f.g, s, h);
    }

    static ad::Ref<S> reshape_vec(Fwd<S>& f, ad::Ref<S> rowvec) {
        const int d = rowvec->value.dim(1);
        TensorT<S> out({d});
        std::copy(rowvec->value.data(), rowvec->value.data() + d, out.data());
        ad::Ref<S> n = f.g.make(std::move(out), rowvec->requires_grad, nullptr);
        if (n->requires_grad) {
            n->backward = [n, rowvec] {
                rowvec->ensure_grad();
                for (size_t i = 0; i < n->grad.size(); ++i) rowvec->grad[i] += n->grad[i];
            };
        }
        return n;
    }
};

// Single-head cross-attention from spatial features to a context matrix,
// added residually: x + Wo(softmax(Q K^T / sqrt(dk)) V).
template <typename S>
struct CrossAttention {
    NormLayer<S> norm;
    DenseLayer<S> wq, wk, wv, wo;
    int d_k = 32;

    void init(ParamSet<S>& ps, const std::string& name, int channels, int d_ctx, int dk,
              int groups, RandomStream& rng) {
        d_k = dk;
        norm.init(ps, name + ".norm", channels, groups);
        wq.init(ps, name + ".wq", channels, dk, rng, false, false);
        wk.init(ps, name + ".wk", d_ctx, dk, rng, false, false);
        wv.init(ps, name + ".wv", d_ctx, dk, rng, false, false);
        wo.init(ps, name + ".wo", dk, channels, rng, false, false);
    }

    ad::Ref<S> operator()(Fwd<S>& f, ad::Ref<S> x, ad::Ref<S> context) const {
        const int H = x->value.dim(1);
        const int W = x->value.dim(2);
        auto xf = ad::chw_to_nc(f.g, norm(f, x));
        auto q = wq(f, xf);
        auto k = wk(f, context);
        auto v = wv(f, context);
        auto logits = ad::scale(f.g, ad::matmul_nt(f.g, q, k), 1.0 / std::sqrt(double(d_k)));
        auto att = ad::softmax_rows(f.g, logits);
        auto out = wo(f, ad::matmul(f.g, att, v));
        return ad::add(f.g, x, ad::nc_to_chw(f.g, out, H, W));
    }

    // Raw attention map (rows sum to 1 over context entries).
    ad::Ref<S> attention(Fwd<S>& f, ad::Ref<S> x, ad::Ref<S> context) const {
        auto xf = ad::chw_to_nc(f.g, norm(f, x));
        auto q = wq(f, xf);
        auto k = wk(f, context);
        auto logits = ad::scale(f.g, ad::matmul_nt(f.g, q, k), 1.0 / std::sqrt(double(d_k)));
        return ad::softmax_rows(f.g, logits);
    }
};

// Sinusoidal position embedding of an integer timestep, shape [1, dim].
template <typename S>
TensorT<S> sinusoid_embedding(int t, int dim) {
    TensorT<S> out({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        out[static_cast<size_t>(i)] = static_cast<S>(std::sin(t * freq));
        out[static_cast<size_t>(half + i)] = static_cast<S>(std::cos(t * freq));
    }
    return out;
}

}  // namespace pfr
