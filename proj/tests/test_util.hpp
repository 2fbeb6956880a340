#pragma once

#include "pfr/denoiser.hpp"
#include "pfr/rng.hpp"

namespace pfr::testutil {

// A fresh denoiser has a zero-initialized output conv (standard for diffusion
// nets), which makes its prediction identically zero until trained. Tests
// probing path sensitivity or gradients must move it off zero first.
template <typename S>
void randomize_output_conv(Denoiser<S>& model, uint64_t seed) {
    RandomStream rng(seed, 0x0cf);
    auto& w = model.base.at("out.conv.w").value;
    for (size_t i = 0; i < w.size(); ++i) {
        w[i] = static_cast<S>(rng.normal() * 0.05);
    }
    auto& b = model.base.at("out.conv.b").value;
    for (size_t i = 0; i < b.size(); ++i) {
        b[i] = static_cast<S>(rng.normal() * 0.01);
    }
}

// The LQ conditioning heads are also zero-initialized (identity modulation on
// a fresh model); randomize them when a test needs the LQ path live.
template <typename S>
void randomize_lq_heads(Denoiser<S>& model, uint64_t seed) {
    RandomStream rng(seed, 0x10a);
    for (int i = 0; i < 3; ++i) {
        auto& w = model.base.at("lq.head" + std::to_string(i) + ".w").value;
        for (size_t k = 0; k < w.size(); ++k) {
            w[k] = static_cast<S>(rng.normal() * 0.05);
        }
    }
}

}  // namespace pfr::testutil
