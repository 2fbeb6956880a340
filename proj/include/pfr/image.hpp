#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pfr/common.hpp"
#include "pfr/rng.hpp"

namespace pfr {

// H x W x 3 image, interleaved RGB, components in [0,1]. The universal pixel
// currency of the pipeline.
class ImageBuffer {
public:
    ImageBuffer() = default;

    ImageBuffer(int height, int width) : height_(height), width_(width) {
        check(height >= 1 && width >= 1, "image dims must be >= 1");
        data_.assign(static_cast<size_t>(height) * width * 3, 0.0f);
    }

    ImageBuffer(int height, int width, float fill_value) : ImageBuffer(height, width) {
        std::fill(data_.begin(), data_.end(), fill_value);
    }

    int height() const { return height_; }
    int width() const { return width_; }
    size_t size() const { return data_.size(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& at(int y, int x, int c) {
        return data_[(static_cast<size_t>(y) * width_ + x) * 3 + c];
    }
    float at(int y, int x, int c) const {
        return data_[(static_cast<size_t>(y) * width_ + x) * 3 + c];
    }

    // Reflect-101 border handling (no repeated edge sample).
    float at_reflect(int y, int x, int c) const {
        y = reflect(y, height_);
        x = reflect(x, width_);
        return at(y, x, c);
    }

    void clamp01() {
        for (auto& v : data_) {
            v = std::min(1.0f, std::max(0.0f, v));
        }
    }

    bool same_dims(const ImageBuffer& o) const {
        return height_ == o.height_ && width_ == o.width_;
    }

    bool operator==(const ImageBuffer& o) const {
        return height_ == o.height_ && width_ == o.width_ && data_ == o.data_;
    }

    static int reflect(int i, int n) {
        if (n == 1) return 0;
        const int period = 2 * (n - 1);
        i = std::abs(i) % period;
        return i < n ? i : period - i;
    }

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<float> data_;
};

inline ImageBuffer random_image(int height, int width, RandomStream& rng) {
    ImageBuffer img(height, width);
    for (size_t i = 0; i < img.size(); ++i) {
        img.data()[i] = static_cast<float>(rng.uniform());
    }
    return img;
}

inline double luminance(float r, float g, float b) {
    return 0.299 * r + 0.587 * g + 0.114 * b;
}

inline ImageBuffer crop(const ImageBuffer& img, int y0, int x0, int h, int w) {
    check(y0 >= 0 && x0 >= 0 && y0 + h <= img.height() && x0 + w <= img.width(),
          "crop out of bounds");
    ImageBuffer out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
            }
        }
    }
    return out;
}

// Bilinear resize with half-pixel centers.
inline ImageBuffer resize_bilinear(const ImageBuffer& img, int out_h, int out_w) {
    check(out_h >= 1 && out_w >= 1, "resize dims must be >= 1");
    if (out_h == img.height() && out_w == img.width()) {
        return img;
    }
    ImageBuffer out(out_h, out_w);
    const double sy = static_cast<double>(img.height()) / out_h;
    const double sx = static_cast<double>(img.width()) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        const int ya = std::clamp(y0, 0, img.height() - 1);
        const int yb = std::clamp(y0 + 1, 0, img.height() - 1);
        for (int x = 0; x < out_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            const int xa = std::clamp(x0, 0, img.width() - 1);
            const int xb = std::clamp(x0 + 1, 0, img.width() - 1);
            for (int c = 0; c < 3; ++c) {
                const double top = (1.0 - wx) * img.at(ya, xa, c) + wx * img.at(ya, xb, c);
                const double bot = (1.0 - wx) * img.at(yb, xa, c) + wx * img.at(yb, xb, c);
                out.at(y, x, c) = static_cast<float>(std::clamp(
                    (1.0 - wy) * top + wy * bot, 0.0, 1.0));
            }
        }
    }
    return out;
}

// Catmull-Rom bicubic; used for super-resolution pre-upsampling.
inline ImageBuffer resize_bicubic(const ImageBuffer& img, int out_h, int out_w) {
    check(out_h >= 1 && out_w >= 1, "resize dims must be >= 1");
    auto kernel = [](double t) {
        t = std::abs(t);
        if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
        if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
        return 0.0;
    };
    ImageBuffer out(out_h, out_w);
    const double sy = static_cast<double>(img.height()) / out_h;
    const double sx = static_cast<double>(img.width()) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = static_cast<int>(std::floor(fy));
        for (int x = 0; x < out_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = static_cast<int>(std::floor(fx));
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                double wsum = 0.0;
                for (int dy = -1; dy <= 2; ++dy) {
                    const double wy = kernel(fy - (y0 + dy));
                    if (wy == 0.0) continue;
                    for (int dx = -1; dx <= 2; ++dx) {
                        const double wx = kernel(fx - (x0 + dx));
                        if (wx == 0.0) continue;
                        acc += wy * wx * img.at_reflect(y0 + dy, x0 + dx, c);
                        wsum += wy * wx;
                    }
                }
                out.at(y, x, c) = static_cast<float>(std::clamp(acc / wsum, 0.0, 1.0));
            }
        }
    }
    return out;
}

inline double max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
    check(a.same_dims(b), "max_abs_diff: dim mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    }
    return m;
}

}  // namespace pfr
