#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pfr/common.hpp"
#include "pfr/face_synth.hpp"
#include "pfr/image.hpp"

namespace pfr {

// ---------------------------------------------------------------------------
// Pluggable evaluators
// ---------------------------------------------------------------------------

class IdentityEmbedder {
public:
    virtual ~IdentityEmbedder() = default;
    // Unit-norm embedding.
    virtual std::vector<double> embed(const ImageBuffer& img) const = 0;
};

class LandmarkDetector {
public:
    virtual ~LandmarkDetector() = default;
    virtual std::optional<FaceLandmarks> detect(const ImageBuffer& img) const = 0;
};

// Desk-scale identity oracle: color statistics of a fixed central patch grid.
// The synthetic face model keeps the face inside the central crop for every
// jitter, so the grid captures identity (skin, eye, mouth geometry) while
// staying insensitive to the background.
class PatchGridEmbedder : public IdentityEmbedder {
public:
    explicit PatchGridEmbedder(int grid = 8, double lo = 0.18, double hi = 0.82)
        : grid_(grid), lo_(lo), hi_(hi) {}

    std::vector<double> embed(const ImageBuffer& img) const override {
        const int y0 = static_cast<int>(lo_ * img.height());
        const int y1 = std::max(y0 + grid_, static_cast<int>(hi_ * img.height()));
        const int x0 = static_cast<int>(lo_ * img.width());
        const int x1 = std::max(x0 + grid_, static_cast<int>(hi_ * img.width()));
        std::vector<double> v(static_cast<size_t>(grid_) * grid_ * 3, 0.0);
        for (int gy = 0; gy < grid_; ++gy) {
            const int ya = y0 + (y1 - y0) * gy / grid_;
            const int yb = y0 + (y1 - y0) * (gy + 1) / grid_;
            for (int gx = 0; gx < grid_; ++gx) {
                const int xa = x0 + (x1 - x0) * gx / grid_;
                const int xb = x0 + (x1 - x0) * (gx + 1) / grid_;
                double acc[3] = {0, 0, 0};
                int count = 0;
                for (int y = ya; y < yb; ++y) {
                    for (int x = xa; x < xb; ++x) {
                        if (y >= img.height() || x >= img.width()) continue;
                        for (int c = 0; c < 3; ++c) acc[c] += img.at(y, x, c);
                        count++;
                    }
                }
                for (int c = 0; c < 3; ++c) {
                    v[(static_cast<size_t>(gy) * grid_ + gx) * 3 + c] =
                        count > 0 ? acc[c] / count : 0.0;
                }
            }
        }
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double norm = 0.0;
        for (double& x : v) {
            x -= mean;
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            std::vector<double> e(v.size(), 0.0);
            e[0] = 1.0;
            return e;
        }
        for (double& x : v) x /= norm;
        return v;
    }

private:
    int grid_;
    double lo_, hi_;
};

// Landmark oracle for the synthetic face model: sclera blobs locate the eyes,
// the red band locates the mouth. Returns failure when the structures cannot
// be found (heavily degraded input), which the LMSE metric maps to its cap.
class BlobLandmarkDetector : public LandmarkDetector {
public:
    std::optional<FaceLandmarks> detect(const ImageBuffer& img) const override {
        const int h = img.height();
        const int w = img.width();

        // Warm-pixel segmentation of the face region, with the horizontal
        // face extent per row so searches stay inside the ellipse.
        double cx = 0.0, cy = 0.0;
        int face_count = 0;
        int min_y = h, max_y = 0, min_x = w, max_x = 0;
        std::vector<int> row_lo(static_cast<size_t>(h), w);
        std::vector<int> row_hi(static_cast<size_t>(h), -1);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double warm = img.at(y, x, 0) - img.at(y, x, 2);
                if (warm > 0.1) {
                    cx += x;
                    cy += y;
                    face_count++;
                    min_y = std::min(min_y, y);
                    max_y = std::max(max_y, y);
                    min_x = std::min(min_x, x);
                    max_x = std::max(max_x, x);
                    row_lo[static_cast<size_t>(y)] = std::min(row_lo[static_cast<size_t>(y)], x);
                    row_hi[static_cast<size_t>(y)] = std::max(row_hi[static_cast<size_t>(y)], x);
                }
            }
        }
        if (face_count < h * w / 50) return std::nullopt;
        cx /= face_count;
        cy /= face_count;

        // Eyes: bright desaturated (sclera-like) pixels in the upper face.
        double lx = 0, ly = 0, rx = 0, ry = 0;
        int lc = 0, rc = 0;
        for (int y = min_y; y < static_cast<int>(cy); ++y) {
            const int lo = row_lo[static_cast<size_t>(y)];
            const int hi = row_hi[static_cast<size_t>(y)];
            if (hi < 0) continue;
            for (int x = lo + 1; x < hi; ++x) {
                const double r = img.at(y, x, 0);
                const double g = img.at(y, x, 1);
                const double b = img.at(y, x, 2);
                const double lum = luminance(static_cast<float>(r), static_cast<float>(g),
                                             static_cast<float>(b));
                const double sat = std::max({r, g, b}) - std::min({r, g, b});
                if (lum > 0.86 && sat < 0.12 && (r - b) > -0.05 && (r - b) < 0.12) {
                    if (x < cx) {
                        lx += x;
                        ly += y;
                        lc++;
                    } else {
                        rx += x;
                        ry += y;
                        rc++;
                    }
                }
            }
        }
        const int min_blob = std::max(2, h * w / 2048);
        if (lc < min_blob || rc < min_blob) return std::nullopt;
        lx /= lc;
        ly /= lc;
        rx /= rc;
        ry /= rc;
        if (std::abs(ly - ry) > 0.12 * h) return std::nullopt;
        if (rx - lx < 0.06 * w) return std::nullopt;

        // Mouth: red-dominant band in the lower face.
        double mx = 0, my = 0;
        int mc = 0;
        for (int y = static_cast<int>(cy); y <= max_y; ++y) {
            for (int x = min_x; x <= max_x; ++x) {
                if (img.at(y, x, 0) - img.at(y, x, 1) > 0.22) {
                    mx += x;
                    my += y;
                    mc++;
                }
            }
        }
        if (mc < min_blob) return std::nullopt;
        mx /= mc;
        my /= mc;

        FaceLandmarks lm;
        lm[0] = {lx + 0.5, ly + 0.5};
        lm[1] = {rx + 0.5, ry + 0.5};
        lm[2] = {mx + 0.5, my + 0.5};
        return lm;
    }
};

// Fixed-answer detector for tests.
class FixedLandmarkDetector : public LandmarkDetector {
public:
    explicit FixedLandmarkDetector(std::optional<FaceLandmarks> lm) : lm_(lm) {}
    std::optional<FaceLandmarks> detect(const ImageBuffer&) const override { return lm_; }

private:
    std::optional<FaceLandmarks> lm_;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr double kPsnrCap = 100.0;
inline constexpr double kLmseCap = 128.0;

inline double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak = 1.0) {
    if (!a.same_dims(b)) throw InvalidArgument("psnr: dim mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.data()[i]) - b.data()[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

// Mean local SSIM on luminance, Gaussian window 11 / sigma 1.5,
// K1 = 0.01, K2 = 0.03 (valid positions only).
inline double ssim(const ImageBuffer& a, const ImageBuffer& b) {
    if (!a.same_dims(b)) throw InvalidArgument("ssim: dim mismatch");
    constexpr int kWin = 11;
    if (a.height() < kWin || a.width() < kWin) {
        throw InvalidArgument("ssim: image smaller than the 11x11 window");
    }
    const int h = a.height();
    const int w = a.width();
    std::vector<double> la(static_cast<size_t>(h) * w), lb(la.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            la[static_cast<size_t>(y) * w + x] =
                luminance(a.at(y, x, 0), a.at(y, x, 1), a.at(y, x, 2));
            lb[static_cast<size_t>(y) * w + x] =
                luminance(b.at(y, x, 0), b.at(y, x, 1), b.at(y, x, 2));
        }
    }
    double win[kWin][kWin];
    double wsum = 0.0;
    const double sigma = 1.5;
    for (int i = 0; i < kWin; ++i) {
        for (int j = 0; j < kWin; ++j) {
            const double dy = i - kWin / 2;
            const double dx = j - kWin / 2;
            win[i][j] = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            wsum += win[i][j];
        }
    }
    for (auto& row : win) {
        for (auto& v : row) v /= wsum;
    }

    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    double total = 0.0;
    int count = 0;
    for (int y = 0; y + kWin <= h; ++y) {
        for (int x = 0; x + kWin <= w; ++x) {
            double mx = 0, my = 0;
            for (int i = 0; i < kWin; ++i) {
                for (int j = 0; j < kWin; ++j) {
                    mx += win[i][j] * la[static_cast<size_t>(y + i) * w + (x + j)];
                    my += win[i][j] * lb[static_cast<size_t>(y + i) * w + (x + j)];
                }
            }
            double vx = 0, vy = 0, cov = 0;
            for (int i = 0; i < kWin; ++i) {
                for (int j = 0; j < kWin; ++j) {
                    const double da = la[static_cast<size_t>(y + i) * w + (x + j)] - mx;
                    const double db = lb[static_cast<size_t>(y + i) * w + (x + j)] - my;
                    vx += win[i][j] * da * da;
                    vy += win[i][j] * db * db;
                    cov += win[i][j] * da * db;
                }
            }
            total += ((2 * mx * my + c1) * (2 * cov + c2)) /
                     ((mx * mx + my * my + c1) * (vx + vy + c2));
            count++;
        }
    }
    return total / count;
}

// Mean squared landmark distance; detection failure on either image (or a
// value beyond the cap) reports exactly 128.
inline double lmse(const ImageBuffer& a, const ImageBuffer& b,
                   const LandmarkDetector& detector) {
    const auto la = detector.detect(a);
    const auto lb = detector.detect(b);
    if (!la || !lb) return kLmseCap;
    double acc = 0.0;
    for (size_t i = 0; i < la->size(); ++i) {
        const double dx = (*la)[i].x - (*lb)[i].x;
        const double dy = (*la)[i].y - (*lb)[i].y;
        acc += dx * dx + dy * dy;
    }
    acc /= static_cast<double>(la->size());
    return std::min(acc, kLmseCap);
}

// 100 * <embed(a), embed(b)>.
inline double id_cosine(const ImageBuffer& a, const ImageBuffer& b,
                        const IdentityEmbedder& embedder) {
    const auto ea = embedder.embed(a);
    const auto eb = embedder.embed(b);
    check(ea.size() == eb.size(), "id_cosine: embedder dimension mismatch");
    double dot = 0.0;
    for (size_t i = 0; i < ea.size(); ++i) dot += ea[i] * eb[i];
    return 100.0 * dot;
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

struct MetricsRow {
    std::string name;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double lmse = 0.0;
    double id_percent = 0.0;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    MetricsRow mean;  // name = "mean"
};

struct EvalPair {
    std::string name;
    ImageBuffer restored;
    ImageBuffer ground_truth;
};

inline MetricsReport evaluate_dataset(const std::vector<EvalPair>& pairs,
                                      const IdentityEmbedder& embedder,
                                      const LandmarkDetector& detector) {
    if (pairs.empty()) throw EmptyDataset("evaluate_dataset: no pairs");
    MetricsReport report;
    report.mean.name = "mean";
    for (const auto& p : pairs) {
        MetricsRow row;
        row.name = p.name;
        row.psnr_db = psnr(p.restored, p.ground_truth);
        row.ssim = ssim(p.restored, p.ground_truth);
        row.lmse = lmse(p.restored, p.ground_truth, detector);
        row.id_percent = id_cosine(p.restored, p.ground_truth, embedder);
        report.mean.psnr_db += row.psnr_db;
        report.mean.ssim += row.ssim;
        report.mean.lmse += row.lmse;
        report.mean.id_percent += row.id_percent;
        report.rows.push_back(std::move(row));
    }
    const double n = static_cast<double>(report.rows.size());
    report.mean.psnr_db /= n;
    report.mean.ssim /= n;
    report.mean.lmse /= n;
    report.mean.id_percent /= n;
    return report;
}

// CSV schema: per-image rows then the mean row. The lpips and musiq columns
// are reserved for external plug-in metrics and stay empty here.
inline std::string report_to_csv(const MetricsReport& report) {
    std::string out = "image,psnr_db,ssim,lmse,id_percent,lpips,musiq\n";
    char buf[160];
    auto emit = [&](const MetricsRow& r) {
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.6f,%.4f,%.4f,,\n", r.name.c_str(),
                      r.psnr_db, r.ssim, r.lmse, r.id_percent);
        out += buf;
    };
    for (const auto& r : report.rows) emit(r);
    emit(report.mean);
    return out;
}

inline std::string report_to_table(const MetricsReport& report) {
    std::string out = "image                     PSNR     SSIM      LMSE     ID\n";
    char buf[160];
    auto emit = [&](const MetricsRow& r) {
        std::snprintf(buf, sizeof(buf), "%-24s %7.2f  %7.4f  %8.2f  %6.2f\n",
                      r.name.c_str(), r.psnr_db, r.ssim, r.lmse, r.id_percent);
        out += buf;
    };
    for (const auto& r : report.rows) emit(r);
    emit(report.mean);
    return out;
}

}  // namespace pfr
