#pragma once

#include <cmath>
#include <vector>

#include "pfr/nn.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

// Adam with per-parameter learning rates (the token embedding trains faster
// than the adapters).
template <typename S>
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add_param(Param<S>& p, double lr) {
        entries_.push_back({&p, lr, TensorT<S>(p.value.shape()), TensorT<S>(p.value.shape())});
    }

    void add_params(ParamSet<S>& ps, double lr) {
        ps.for_each([&](Param<S>& p) {
            if (p.trainable) add_param(p, lr);
        });
    }

    // Applies accumulated gradients and clears them.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& e : entries_) {
            TensorT<S>& w = e.param->value;
            TensorT<S>& g = e.param->grad;
            for (size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                e.m[i] = static_cast<S>(beta1_ * e.m[i] + (1.0 - beta1_) * gi);
                e.v[i] = static_cast<S>(beta2_ * e.v[i] + (1.0 - beta2_) * gi * gi);
                const double mhat = e.m[i] / bc1;
                const double vhat = e.v[i] / bc2;
                w[i] = static_cast<S>(w[i] - e.lr * mhat / (std::sqrt(vhat) + eps_));
            }
            g.fill(S(0));
        }
    }

private:
    struct Entry {
        Param<S>* param;
        double lr;
        TensorT<S> m;
        TensorT<S> v;
    };
    std::vector<Entry> entries_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace pfr
