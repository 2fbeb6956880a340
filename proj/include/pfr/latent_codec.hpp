#pragma once

#include <cmath>

#include "pfr/common.hpp"
#include "pfr/image.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

// Exact invertible latent space: space-to-depth by factor f, then the fixed
// affine v -> 2v - 1. Replaces a learned autoencoder with a transform whose
// round-trip is lossless, while keeping diffusion in a reduced-resolution,
// multi-channel space. Latent layout [3*f*f, H/f, W/f]; latent channel
// index = rgb_channel * f * f + dy * f + dx.
inline constexpr int kLatentFactor = 2;
inline constexpr int kLatentChannels = 3 * kLatentFactor * kLatentFactor;

template <typename S>
TensorT<S> encode_latent(const ImageBuffer& image, int f = kLatentFactor) {
    check(f >= 1, "latent factor must be >= 1");
    if (image.height() % f != 0 || image.width() % f != 0) {
        throw InvalidArgument("encode_latent: image dims must be divisible by " +
                              std::to_string(f));
    }
    const int lh = image.height() / f;
    const int lw = image.width() / f;
    TensorT<S> z({3 * f * f, lh, lw});
    for (int c = 0; c < 3; ++c) {
        for (int dy = 0; dy < f; ++dy) {
            for (int dx = 0; dx < f; ++dx) {
                const int lc = (c * f + dy) * f + dx;
                for (int y = 0; y < lh; ++y) {
                    for (int x = 0; x < lw; ++x) {
                        const S v = static_cast<S>(image.at(y * f + dy, x * f + dx, c));
                        z.at(lc, y, x) = S(2) * v - S(1);
                    }
                }
            }
        }
    }
    return z;
}

// Inverse of encode_latent. The affine inverse is computed as z/2 + 1/2 so the
// round-trip of an encoded image is exact; the clamp only touches
// out-of-range values produced by sampling.
template <typename S>
ImageBuffer decode_latent(const TensorT<S>& z, int f = kLatentFactor) {
    check(z.rank() == 3 && z.dim(0) == 3 * f * f, "decode_latent: bad latent shape");
    const int lh = z.dim(1);
    const int lw = z.dim(2);
    ImageBuffer img(lh * f, lw * f);
    for (int c = 0; c < 3; ++c) {
        for (int dy = 0; dy < f; ++dy) {
            for (int dx = 0; dx < f; ++dx) {
                const int lc = (c * f + dy) * f + dx;
                for (int y = 0; y < lh; ++y) {
                    for (int x = 0; x < lw; ++x) {
                        const S v = z.at(lc, y, x) / S(2) + S(0.5);
                        img.at(y * f + dy, x * f + dx, c) =
                            std::min(1.0f, std::max(0.0f, static_cast<float>(v)));
                    }
                }
            }
        }
    }
    return img;
}

template <typename S>
TensorT<S> randn_like(const TensorT<S>& ref, RandomStream& rng) {
    TensorT<S> out(ref.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<S>(rng.normal());
    }
    return out;
}

}  // namespace pfr
