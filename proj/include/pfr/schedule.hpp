#pragma once

#include <cmath>
#include <vector>

#include "pfr/common.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

// DDPM noise schedule: linear beta ramp, alpha_t = 1 - beta_t,
// alpha_bar_t = prod_{s<=t} alpha_s.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (!(T >= 1 && beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw InvalidArgument("make_schedule: need 0 < beta_start <= beta_end < 1, T >= 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double b =
            T == 1 ? beta_start
                   : beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T - 1);
        s.beta[static_cast<size_t>(t)] = b;
        s.alpha[static_cast<size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return s;
}

inline NoiseSchedule default_schedule() { return make_schedule(1000, 1e-4, 0.02); }

// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
template <typename S>
TensorT<S> q_sample(const TensorT<S>& z0, int t, const TensorT<S>& eps,
                    const NoiseSchedule& sched) {
    check(t >= 0 && t < sched.T, "q_sample: t out of schedule range");
    check(z0.same_shape(eps), "q_sample: eps shape mismatch");
    const S a = static_cast<S>(std::sqrt(sched.alpha_bar[static_cast<size_t>(t)]));
    const S b = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar[static_cast<size_t>(t)]));
    TensorT<S> out(z0.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = a * z0[i] + b * eps[i];
    }
    return out;
}

// Uniform-stride subsequence of [0,T), ascending: 0, T/n, 2T/n, ...
inline std::vector<int> strided_timesteps(int num_steps, int T) {
    check(num_steps >= 1 && num_steps <= T, "num_steps must be in [1, T]");
    std::vector<int> out(static_cast<size_t>(num_steps));
    for (int i = 0; i < num_steps; ++i) {
        out[static_cast<size_t>(i)] =
            static_cast<int>((static_cast<int64_t>(i) * T) / num_steps);
    }
    return out;
}

}  // namespace pfr
