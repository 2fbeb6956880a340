#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfr/common.hpp"
#include "pfr/image.hpp"
#include "pfr/image_io.hpp"
#include "pfr/rng.hpp"

namespace pfr {

enum class DegradationLevel { light, heavy };

inline const char* level_name(DegradationLevel l) {
    return l == DegradationLevel::light ? "light" : "heavy";
}

inline DegradationLevel level_from_name(const std::string& s) {
    if (s == "light") return DegradationLevel::light;
    if (s == "heavy") return DegradationLevel::heavy;
    throw InvalidArgument("unknown degradation level: " + s);
}

// One application of the first-order chain:
//   blur -> (optional) downsample -> (optional) noise -> JPEG -> upsample back
struct FirstOrderParams {
    double sigma = 1.0;        // blur std, [0.1, 10]
    bool apply_down = false;   // p = 0.7
    double down_factor = 1.0;  // [1,4] light, [1,10] heavy
    bool apply_noise = false;  // p = 0.4
    double noise_std = 0.0;    // 0-255 intensity scale; [0,2] light, [0,15] heavy
    int jpeg_q = 100;          // [30, 100]
};

// Fully materialized parameter set of one degradation application. A record
// plus the pinned JPEG codec replays the degradation bit-exactly.
struct DegradationRecord {
    DegradationLevel level = DegradationLevel::light;
    bool passthrough_hq = false;  // p = 0.03: feed the HQ input through unchanged

    // Heavy-only stages, in application order.
    bool apply_isp = false;       // p = 0.5
    double isp_shot_scale = 0.0;  // [0, 0.01]
    double isp_read_std = 0.0;    // [0, 0.05]
    double isp_gamma = 2.2;
    bool apply_motion = false;    // p = 0.05
    double motion_angle = 0.0;    // [0, pi)
    int motion_length = 3;        // {3..15}
    bool apply_median = false;    // p = 0.1
    int median_ksize = 3;         // {3,5,7}

    FirstOrderParams pass1;

    bool apply_sinc = false;   // heavy: always
    double sinc_cutoff = M_PI; // [pi/3, pi]
    int sinc_ksize = 7;        // odd, {7..21}

    bool apply_second_pass = false;  // p = 0.9, heavy only
    FirstOrderParams pass2;          // fresh independent draws

    uint64_t noise_seed = 0;  // all stochastic noise derives from this
};

namespace detail {

inline FirstOrderParams sample_first_order(RandomStream& rng, double r_max, double d_max) {
    FirstOrderParams p;
    p.sigma = rng.uniform(0.1, 10.0);
    p.apply_down = rng.bernoulli(0.7);
    p.down_factor = rng.uniform(1.0, r_max);
    p.apply_noise = rng.bernoulli(0.4);
    p.noise_std = rng.uniform(0.0, d_max);
    p.jpeg_q = 30 + static_cast<int>(rng.uniform_int(71));  // {30..100}
    return p;
}

}  // namespace detail

inline DegradationRecord sample_degradation(DegradationLevel level, RandomStream& rng,
                                            double p_hq = 0.03) {
    DegradationRecord r;
    r.level = level;
    r.passthrough_hq = rng.bernoulli(p_hq);
    if (level == DegradationLevel::heavy) {
        r.apply_isp = rng.bernoulli(0.5);
        r.isp_shot_scale = rng.uniform(0.0, 0.01);
        r.isp_read_std = rng.uniform(0.0, 0.05);
        r.apply_motion = rng.bernoulli(0.05);
        r.motion_angle = rng.uniform(0.0, M_PI);
        r.motion_length = 3 + static_cast<int>(rng.uniform_int(13));  // {3..15}
        r.apply_median = rng.bernoulli(0.1);
        r.median_ksize = 3 + 2 * static_cast<int>(rng.uniform_int(3));  // {3,5,7}
        r.pass1 = detail::sample_first_order(rng, 10.0, 15.0);
        r.apply_sinc = true;
        r.sinc_cutoff = rng.uniform(M_PI / 3.0, M_PI);
        r.sinc_ksize = 7 + 2 * static_cast<int>(rng.uniform_int(8));  // odd {7..21}
        r.apply_second_pass = rng.bernoulli(0.9);
        r.pass2 = detail::sample_first_order(rng, 10.0, 15.0);
    } else {
        r.pass1 = detail::sample_first_order(rng, 4.0, 2.0);
    }
    r.noise_seed = rng.next_u64();
    return r;
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

inline std::vector<double> gaussian_kernel_1d(double sigma) {
    int ksize = static_cast<int>(std::ceil(6.0 * sigma));
    if (ksize % 2 == 0) ksize += 1;
    ksize = std::clamp(ksize, 1, 21);
    std::vector<double> k(static_cast<size_t>(ksize));
    const int half = ksize / 2;
    double sum = 0.0;
    for (int i = -half; i <= half; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + half)] = v;
        sum += v;
    }
    for (auto& v : k) v /= sum;
    return k;
}

inline ImageBuffer convolve_separable(const ImageBuffer& img, const std::vector<double>& kx,
                                      const std::vector<double>& ky) {
    const int hx = static_cast<int>(kx.size()) / 2;
    const int hy = static_cast<int>(ky.size()) / 2;
    ImageBuffer tmp(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -hx; i <= hx; ++i) {
                    acc += kx[static_cast<size_t>(i + hx)] * img.at_reflect(y, x + i, c);
                }
                tmp.at(y, x, c) = static_cast<float>(acc);
            }
        }
    }
    ImageBuffer out(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -hy; i <= hy; ++i) {
                    acc += ky[static_cast<size_t>(i + hy)] * tmp.at_reflect(y + i, x, c);
                }
                out.at(y, x, c) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
            }
        }
    }
    return out;
}

inline ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
    const auto k = gaussian_kernel_1d(sigma);
    if (k.size() == 1) return img;
    return convolve_separable(img, k, k);
}

// Linear motion kernel: a unit-mass segment of the given length and angle,
// rasterized with bilinear splatting.
inline ImageBuffer motion_blur(const ImageBuffer& img, double angle, int length) {
    check(length >= 1, "motion length must be >= 1");
    const int ksize = (length % 2 == 1) ? length : length + 1;
    const int half = ksize / 2;
    std::vector<double> kernel(static_cast<size_t>(ksize) * ksize, 0.0);
    const double cx = half;
    const double cy = half;
    const int samples = 8 * ksize;
    for (int s = 0; s < samples; ++s) {
        const double t = (static_cast<double>(s) / (samples - 1) - 0.5) * (length - 1);
        const double x = cx + t * std::cos(angle);
        const double y = cy + t * std::sin(angle);
        const int x0 = static_cast<int>(std::floor(x));
        const int y0 = static_cast<int>(std::floor(y));
        const double fx = x - x0;
        const double fy = y - y0;
        for (int dy = 0; dy <= 1; ++dy) {
            for (int dx = 0; dx <= 1; ++dx) {
                const int xi = x0 + dx;
                const int yi = y0 + dy;
                if (xi < 0 || yi < 0 || xi >= ksize || yi >= ksize) continue;
                const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
                kernel[static_cast<size_t>(yi) * ksize + xi] += w;
            }
        }
    }
    double sum = 0.0;
    for (double v : kernel) sum += v;
    for (auto& v : kernel) v /= sum;

    ImageBuffer out(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int ky = 0; ky < ksize; ++ky) {
                    for (int kx = 0; kx < ksize; ++kx) {
                        const double w = kernel[static_cast<size_t>(ky) * ksize + kx];
                        if (w == 0.0) continue;
                        acc += w * img.at_reflect(y + ky - half, x + kx - half, c);
                    }
                }
                out.at(y, x, c) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
            }
        }
    }
    return out;
}

inline ImageBuffer median_blur(const ImageBuffer& img, int ksize) {
    check(ksize >= 1 && ksize % 2 == 1, "median kernel must be odd");
    const int half = ksize / 2;
    ImageBuffer out(img.height(), img.width());
    std::vector<float> window;
    window.reserve(static_cast<size_t>(ksize) * ksize);
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                window.clear();
                for (int dy = -half; dy <= half; ++dy) {
                    for (int dx = -half; dx <= half; ++dx) {
                        window.push_back(img.at_reflect(y + dy, x + dx, c));
                    }
                }
                auto mid = window.begin() + window.size() / 2;
                std::nth_element(window.begin(), mid, window.end());
                out.at(y, x, c) = *mid;
            }
        }
    }
    return out;
}

// Separable windowed-sinc low-pass. Each 1-D kernel is Hamming-windowed and
// normalized to unit sum, so the filter has DC gain 1; cutoff = pi gives an
// exact discrete delta.
inline std::vector<double> sinc_kernel_1d(double cutoff, int ksize) {
    check(ksize % 2 == 1 && ksize >= 7, "sinc kernel must be odd and >= 7");
    check(cutoff > 0.0 && cutoff <= M_PI, "sinc cutoff must be in (0, pi]");
    const int half = ksize / 2;
    std::vector<double> k(static_cast<size_t>(ksize));
    double sum = 0.0;
    for (int i = -half; i <= half; ++i) {
        double v;
        if (i == 0) {
            v = cutoff / M_PI;
        } else {
            v = std::sin(cutoff * i) / (M_PI * i);
        }
        const double w = 0.54 + 0.46 * std::cos(M_PI * i / half);
        v *= w;
        k[static_cast<size_t>(i + half)] = v;
        sum += v;
    }
    for (auto& v : k) v /= sum;
    return k;
}

inline ImageBuffer apply_sinc_filter(const ImageBuffer& img, double cutoff, int kernel_size) {
    if (kernel_size % 2 == 0) {
        throw InvalidArgument("apply_sinc_filter: kernel size must be odd");
    }
    const auto k = sinc_kernel_1d(cutoff, kernel_size);
    return convolve_separable(img, k, k);
}

// Simplified sensor model: linearize with a power curve, add signal-dependent
// Gaussian noise (variance shot_scale * signal + read_std^2), de-linearize.
inline ImageBuffer apply_isp_noise(const ImageBuffer& img, double gamma, double shot_scale,
                                   double read_std, RandomStream& rng) {
    check(gamma > 0.0, "isp gamma must be > 0");
    ImageBuffer out(img.height(), img.width());
    const double inv_gamma = 1.0 / gamma;
    for (size_t i = 0; i < img.size(); ++i) {
        const double v = img.data()[i];
        const double lin = std::pow(v, gamma);
        const double var = shot_scale * lin + read_std * read_std;
        double noisy = lin;
        if (var > 0.0) {
            noisy += std::sqrt(var) * rng.normal();
        }
        noisy = std::clamp(noisy, 0.0, 1.0);
        out.data()[i] = static_cast<float>(std::pow(noisy, inv_gamma));
    }
    return out;
}

inline ImageBuffer add_gaussian_noise(const ImageBuffer& img, double std_255,
                                      RandomStream& rng) {
    ImageBuffer out(img.height(), img.width());
    const double s = std_255 / 255.0;
    for (size_t i = 0; i < img.size(); ++i) {
        const double v = img.data()[i] + s * rng.normal();
        out.data()[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Record validation and replay
// ---------------------------------------------------------------------------

inline void validate_record(const DegradationRecord& r) {
    const bool heavy = r.level == DegradationLevel::heavy;
    auto check_pass = [&](const FirstOrderParams& p, double r_max, double d_max) {
        if (p.sigma < 0.1 || p.sigma > 10.0) throw InvalidRecord("sigma out of range");
        if (p.down_factor < 1.0 || p.down_factor > r_max)
            throw InvalidRecord("down factor out of range");
        if (p.noise_std < 0.0 || p.noise_std > d_max)
            throw InvalidRecord("noise std out of range");
        if (p.jpeg_q < 30 || p.jpeg_q > 100) throw InvalidRecord("jpeg quality out of range");
    };
    check_pass(r.pass1, heavy ? 10.0 : 4.0, heavy ? 15.0 : 2.0);
    if (heavy) {
        check_pass(r.pass2, 10.0, 15.0);
        if (r.isp_shot_scale < 0.0 || r.isp_shot_scale > 0.01)
            throw InvalidRecord("isp shot scale out of range");
        if (r.isp_read_std < 0.0 || r.isp_read_std > 0.05)
            throw InvalidRecord("isp read std out of range");
        if (r.isp_gamma <= 0.0) throw InvalidRecord("isp gamma must be > 0");
        if (r.motion_length < 3 || r.motion_length > 15)
            throw InvalidRecord("motion length out of range");
        if (r.median_ksize != 3 && r.median_ksize != 5 && r.median_ksize != 7)
            throw InvalidRecord("median kernel out of range");
        if (r.sinc_cutoff <= 0.0 || r.sinc_cutoff > M_PI)
            throw InvalidRecord("sinc cutoff out of range");
        if (r.sinc_ksize < 7 || r.sinc_ksize > 21 || r.sinc_ksize % 2 == 0)
            throw InvalidRecord("sinc kernel size out of range");
    } else {
        if (r.apply_isp || r.apply_motion || r.apply_median || r.apply_sinc ||
            r.apply_second_pass) {
            throw InvalidRecord("light record must not set heavy-only flags");
        }
    }
}

namespace detail {

inline ImageBuffer run_first_order(const ImageBuffer& input, const FirstOrderParams& p,
                                   RandomStream& noise) {
    const int h = input.height();
    const int w = input.width();
    ImageBuffer img = gaussian_blur(input, p.sigma);
    if (p.apply_down) {
        const int dh = std::max(1, static_cast<int>(std::lround(h / p.down_factor)));
        const int dw = std::max(1, static_cast<int>(std::lround(w / p.down_factor)));
        img = resize_bilinear(img, dh, dw);
    }
    if (p.apply_noise) {
        img = add_gaussian_noise(img, p.noise_std, noise);
    }
    img = jpeg_roundtrip(img, p.jpeg_q);
    if (p.apply_down) {
        img = resize_bilinear(img, h, w);
    }
    return img;
}

}  // namespace detail

// Replays a record. Heavy order: ISP -> motion -> median -> first-order chain
// -> sinc -> (p=0.9) second first-order chain. Output dims equal input dims.
inline ImageBuffer degrade(const ImageBuffer& image, const DegradationRecord& record) {
    validate_record(record);
    if (record.passthrough_hq) {
        return image;
    }
    RandomStream base(record.noise_seed);
    ImageBuffer img = image;
    if (record.level == DegradationLevel::heavy) {
        if (record.apply_isp) {
            RandomStream isp_rng = base.child(0);
            img = apply_isp_noise(img, record.isp_gamma, record.isp_shot_scale,
                                  record.isp_read_std, isp_rng);
        }
        if (record.apply_motion) {
            img = motion_blur(img, record.motion_angle, record.motion_length);
        }
        if (record.apply_median) {
            img = median_blur(img, record.median_ksize);
        }
    }
    {
        RandomStream n1 = base.child(1);
        img = detail::run_first_order(img, record.pass1, n1);
    }
    if (record.apply_sinc) {
        img = apply_sinc_filter(img, record.sinc_cutoff, record.sinc_ksize);
    }
    if (record.apply_second_pass) {
        RandomStream n2 = base.child(2);
        img = detail::run_first_order(img, record.pass2, n2);
    }
    return img;
}

// ---------------------------------------------------------------------------
// JSON sidecars
// ---------------------------------------------------------------------------

inline nlohmann::json first_order_to_json(const FirstOrderParams& p) {
    return {{"sigma", p.sigma},
            {"apply_down", p.apply_down},
            {"down_factor", p.down_factor},
            {"apply_noise", p.apply_noise},
            {"noise_std", p.noise_std},
            {"jpeg_q", p.jpeg_q}};
}

inline FirstOrderParams first_order_from_json(const nlohmann::json& j) {
    FirstOrderParams p;
    p.sigma = j.at("sigma").get<double>();
    p.apply_down = j.at("apply_down").get<bool>();
    p.down_factor = j.at("down_factor").get<double>();
    p.apply_noise = j.at("apply_noise").get<bool>();
    p.noise_std = j.at("noise_std").get<double>();
    p.jpeg_q = j.at("jpeg_q").get<int>();
    return p;
}

inline nlohmann::json record_to_json(const DegradationRecord& r) {
    nlohmann::json j;
    j["level"] = level_name(r.level);
    j["passthrough_hq"] = r.passthrough_hq;
    j["apply_isp"] = r.apply_isp;
    j["isp_shot_scale"] = r.isp_shot_scale;
    j["isp_read_std"] = r.isp_read_std;
    j["isp_gamma"] = r.isp_gamma;
    j["apply_motion"] = r.apply_motion;
    j["motion_angle"] = r.motion_angle;
    j["motion_length"] = r.motion_length;
    j["apply_median"] = r.apply_median;
    j["median_ksize"] = r.median_ksize;
    j["pass1"] = first_order_to_json(r.pass1);
    j["apply_sinc"] = r.apply_sinc;
    j["sinc_cutoff"] = r.sinc_cutoff;
    j["sinc_ksize"] = r.sinc_ksize;
    j["apply_second_pass"] = r.apply_second_pass;
    j["pass2"] = first_order_to_json(r.pass2);
    j["noise_seed"] = r.noise_seed;
    j["interpolation"] = "bilinear";
    j["jpeg_codec"] = "libjpeg-444-baseline";
    return j;
}

inline DegradationRecord record_from_json(const nlohmann::json& j) {
    DegradationRecord r;
    r.level = level_from_name(j.at("level").get<std::string>());
    r.passthrough_hq = j.at("passthrough_hq").get<bool>();
    r.apply_isp = j.at("apply_isp").get<bool>();
    r.isp_shot_scale = j.at("isp_shot_scale").get<double>();
    r.isp_read_std = j.at("isp_read_std").get<double>();
    r.isp_gamma = j.at("isp_gamma").get<double>();
    r.apply_motion = j.at("apply_motion").get<bool>();
    r.motion_angle = j.at("motion_angle").get<double>();
    r.motion_length = j.at("motion_length").get<int>();
    r.apply_median = j.at("apply_median").get<bool>();
    r.median_ksize = j.at("median_ksize").get<int>();
    r.pass1 = first_order_from_json(j.at("pass1"));
    r.apply_sinc = j.at("apply_sinc").get<bool>();
    r.sinc_cutoff = j.at("sinc_cutoff").get<double>();
    r.sinc_ksize = j.at("sinc_ksize").get<int>();
    r.apply_second_pass = j.at("apply_second_pass").get<bool>();
    r.pass2 = first_order_from_json(j.at("pass2"));
    r.noise_seed = j.at("noise_seed").get<uint64_t>();
    return r;
}

}  // namespace pfr
