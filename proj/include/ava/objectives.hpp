#pragma once

#include "ava/common.hpp"
#include "ava/mlp.hpp"
#include "ava/rasterizer.hpp"

#include <functional>

namespace ava {

struct LossWeights {
    double lambda_m = 0.1;
    double lambda_s = 0.01;
    double lambda_l = 0.04;
    double mu = 1.0;              // confidence floor
    double lambda_conf_reg = 0.0; // optional -mean(log C) regularizer

    void validate() const {
        require(std::isfinite(lambda_m) && lambda_m >= 0, "loss weights: lambda_m must be >= 0");
        require(std::isfinite(lambda_s) && lambda_s >= 0, "loss weights: lambda_s must be >= 0");
        require(std::isfinite(lambda_l) && lambda_l >= 0, "loss weights: lambda_l must be >= 0");
        require(std::isfinite(mu), "loss weights: mu must be finite");
        require(std::isfinite(lambda_conf_reg) && lambda_conf_reg >= 0,
                "loss weights: confidence regularizer weight must be >= 0");
    }
};

// External perceptual scorer (e.g. an LPIPS process); value-only, the term is
// inert when unset.
using PerceptualScorer = std::function<double(const Image& rendered, const Image& target)>;

// ---------------------------------------------------------------------------
// Confidence map

struct ConfidenceMap {
    Image C;                      // H x W, >= mu everywhere
    std::vector<MlpCache> caches; // per pixel, for the backward pass
    std::vector<double> e_out;    // raw net outputs
};

// C = mu + exp(E(rgb, depth)) per pixel. Inputs are treated as constants
// (detached); gradients flow only to the net parameters.
inline ConfidenceMap confidence(const Mlp& conf_net, const Image& rendered_color,
                                const Image& rendered_depth, double mu) {
    require(rendered_color.height == rendered_depth.height &&
                rendered_color.width == rendered_depth.width,
            "confidence: image shapes disagree");
    const int H = rendered_color.height, W = rendered_color.width;
    ConfidenceMap out;
    out.C = Image(H, W, 1);
    out.caches.resize(static_cast<size_t>(H) * W);
    out.e_out.resize(static_cast<size_t>(H) * W);
    VecX feat(4);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            feat << rendered_color.at(y, x, 0), rendered_color.at(y, x, 1),
                rendered_color.at(y, x, 2), rendered_depth.at(y, x);
            size_t idx = static_cast<size_t>(y) * W + x;
            VecX e = mlp_forward(conf_net, feat, &out.caches[idx]);
            out.e_out[idx] = e(0);
            out.C.at(y, x) = mu + std::exp(e(0));
        }
    }
    return out;
}

// Mean over pixels and channels of C * |rendered - target|.
inline double confidence_l1(const Image& C, const Image& rendered, const Image& target) {
    require(rendered.same_shape(target), "confidence_l1: image shapes disagree");
    require(C.height == rendered.height && C.width == rendered.width,
            "confidence_l1: confidence map shape disagrees");
    double acc = 0.0;
    for (int y = 0; y < rendered.height; ++y)
        for (int x = 0; x < rendered.width; ++x)
            for (int c = 0; c < rendered.channels; ++c)
                acc += C.at(y, x) * std::abs(rendered.at(y, x, c) - target.at(y, x, c));
    return acc / (rendered.pixel_count() * rendered.channels);
}

inline double mask_loss(const Image& alpha, const Image& mask) {
    require(alpha.same_shape(mask), "mask_loss: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < alpha.data.size(); ++i) acc += std::abs(alpha.data[i] - mask.data[i]);
    return acc / alpha.data.size();
}

// ---------------------------------------------------------------------------
// SSIM (11x11 Gaussian window, sigma 1.5, unit dynamic range)

namespace ssim_detail {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

inline std::vector<double> gaussian_window(int size, double sigma = 1.5) {
    std::vector<double> w(size);
    double sum = 0.0;
    int c = size / 2;
    for (int i = 0; i < size; ++i) {
        w[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Shrinks to the largest odd window fitting the image.
inline int effective_window(int h, int w, int requested = 11) {
    int m = std::min({requested, h, w});
    if (m % 2 == 0) --m;
    return std::max(m, 1);
}

struct Moments {
    // valid-region maps, (H-win+1) x (W-win+1) per channel
    std::vector<MatX> mu_a, mu_b, maa, mbb, mab;
    int win = 0;
};

inline MatX windowed_sum(const MatX& img, const std::vector<double>& w) {
    const int win = static_cast<int>(w.size());
    const int H = static_cast<int>(img.rows()), W = static_cast<int>(img.cols());
    MatX rows(H, W - win + 1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x + win <= W; ++x) {
            double s = 0.0;
            for (int k = 0; k < win; ++k) s += w[k] * img(y, x + k);
            rows(y, x) = s;
        }
    MatX out(H - win + 1, W - win + 1);
    for (int x = 0; x < out.cols(); ++x)
        for (int y = 0; y + win <= H; ++y) {
            double s = 0.0;
            for (int k = 0; k < win; ++k) s += w[k] * rows(y + k, x);
            out(y, x) = s;
        }
    return out;
}

inline MatX channel(const Image& img, int c) {
    MatX m(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) m(y, x) = img.at(y, x, c);
    return m;
}

}  // namespace ssim_detail

// Mean local SSIM over the valid region, averaged over channels.
inline double ssim(const Image& a, const Image& b) {
    using namespace ssim_detail;
    require(a.same_shape(b), "ssim: shape mismatch");
    const int win = effective_window(a.height, a.width);
    auto w = gaussian_window(win);
    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        MatX xa = channel(a, c), xb = channel(b, c);
        MatX mu_a = windowed_sum(xa, w), mu_b = windowed_sum(xb, w);
        MatX maa = windowed_sum(xa.cwiseProduct(xa), w);
        MatX mbb = windowed_sum(xb.cwiseProduct(xb), w);
        MatX mab = windowed_sum(xa.cwiseProduct(xb), w);
        double acc = 0.0;
        for (int y = 0; y < mu_a.rows(); ++y)
            for (int x = 0; x < mu_a.cols(); ++x) {
                double ma = mu_a(y, x), mb = mu_b(y, x);
                double va = maa(y, x) - ma * ma, vb = mbb(y, x) - mb * mb;
                double cov = mab(y, x) - ma * mb;
                double A1 = 2 * ma * mb + kC1, A2 = 2 * cov + kC2;
                double B1 = ma * ma + mb * mb + kC1, B2 = va + vb + kC2;
                acc += (A1 * A2) / (B1 * B2);
            }
        total += acc / (mu_a.rows() * mu_a.cols());
    }
    return total / a.channels;
}

// d(mean SSIM)/d(a), with b held fixed, scaled by `upstream`.
inline Image ssim_backward(const Image& a, const Image& b, double upstream) {
    using namespace ssim_detail;
    const int win = effective_window(a.height, a.width);
    auto w = gaussian_window(win);
    Image da(a.height, a.width, a.channels);
    for (int c = 0; c < a.channels; ++c) {
        MatX xa = channel(a, c), xb = channel(b, c);
        MatX mu_a = windowed_sum(xa, w), mu_b = windowed_sum(xb, w);
        MatX maa = windowed_sum(xa.cwiseProduct(xa), w);
        MatX mbb = windowed_sum(xb.cwiseProduct(xb), w);
        MatX mab = windowed_sum(xa.cwiseProduct(xb), w);
        const double norm = upstream / (mu_a.rows() * mu_a.cols() * a.channels);
        MatX c_mu = MatX::Zero(mu_a.rows(), mu_a.cols());
        MatX c_maa = MatX::Zero(mu_a.rows(), mu_a.cols());
        MatX c_mab = MatX::Zero(mu_a.rows(), mu_a.cols());
        for (int y = 0; y < mu_a.rows(); ++y)
            for (int x = 0; x < mu_a.cols(); ++x) {
                double ma = mu_a(y, x), mb = mu_b(y, x);
                double va = maa(y, x) - ma * ma, vb = mbb(y, x) - mb * mb;
                double cov = mab(y, x) - ma * mb;
                double A1 = 2 * ma * mb + kC1, A2 = 2 * cov + kC2;
                double B1 = ma * ma + mb * mb + kC1, B2 = va + vb + kC2;
                double S = (A1 * A2) / (B1 * B2);
                double dA1 = norm * A2 / (B1 * B2);
                double dA2 = norm * A1 / (B1 * B2);
                double dB1 = -norm * S / B1;
                double dB2 = -norm * S / B2;
                // A1=2 ma mb + C1, A2=2(mab-ma mb)+C2, B1=ma^2+mb^2+C1, B2=maa-ma^2+vb+C2
                c_mu(y, x) = 2 * mb * dA1 - 2 * mb * dA2 + 2 * ma * dB1 - 2 * ma * dB2;
                c_maa(y, x) = dB2;
                c_mab(y, x) = 2 * dA2;
            }
        // scatter back through the separable window
        for (int y = 0; y < mu_a.rows(); ++y)
            for (int x = 0; x < mu_a.cols(); ++x) {
                double cmu = c_mu(y, x), cmaa = c_maa(y, x), cmab = c_mab(y, x);
                if (cmu == 0 && cmaa == 0 && cmab == 0) continue;
                for (int ky = 0; ky < win; ++ky)
                    for (int kx = 0; kx < win; ++kx) {
                        double ww = w[ky] * w[kx];
                        int py = y + ky, px = x + kx;
                        da.at(py, px, c) += ww * (cmu + 2 * xa(py, px) * cmaa + xb(py, px) * cmab);
                    }
            }
    }
    return da;
}

// ---------------------------------------------------------------------------
// Total loss

struct LossResult {
    double total = 0.0;
    double l_confidence = 0.0;
    double l_mask = 0.0;
    double ssim_value = 0.0;
    double l_perceptual = 0.0;
    double l_conf_reg = 0.0;
    // upstream gradients for the rasterizer
    Image dcolor;
    Image dalpha;
    Image confidence_map;
    MlpGrads conf_grads;
};

// L = L_c + lambda_m L_m + lambda_s (1 - SSIM) + lambda_l L_perceptual, with
// per-pixel confidence C = mu + exp(E(I_r, D_r)) weighting the L1 term.
// Returns the value plus the gradients routed to images and the confidence
// net. The perceptual term is value-only.
inline LossResult total_loss(const Mlp& conf_net, const RenderOutput& render,
                             const Image& target, const Image& mask, const LossWeights& w,
                             const PerceptualScorer& perceptual = nullptr) {
    w.validate();
    require(render.color.same_shape(target), "total_loss: target shape mismatch");
    require(render.alpha.same_shape(mask), "total_loss: mask shape mismatch");
    const int H = target.height, W = target.width;

    LossResult out;
    out.conf_grads = MlpGrads::zeros_like(conf_net);
    ConfidenceMap conf = confidence(conf_net, render.color, render.depth, w.mu);
    out.confidence_map = conf.C;

    out.l_confidence = confidence_l1(conf.C, render.color, target);
    out.l_mask = mask_loss(render.alpha, mask);
    out.ssim_value = ssim(render.color, target);
    if (perceptual) out.l_perceptual = perceptual(render.color, target);
    out.total = out.l_confidence + w.lambda_m * out.l_mask +
                w.lambda_s * (1.0 - out.ssim_value) + w.lambda_l * out.l_perceptual;

    // gradients
    const double inv_nc = 1.0 / (static_cast<double>(H) * W * 3);
    const double inv_n = 1.0 / (static_cast<double>(H) * W);
    out.dcolor = Image(H, W, 3);
    out.dalpha = Image(H, W, 1);
    VecX de(1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double C = conf.C.at(y, x);
            double abs_sum = 0.0;
            for (int c = 0; c < 3; ++c) {
                double diff = render.color.at(y, x, c) - target.at(y, x, c);
                out.dcolor.at(y, x, c) = C * inv_nc * (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0));
                abs_sum += std::abs(diff);
            }
            size_t idx = static_cast<size_t>(y) * W + x;
            double dC = inv_nc * abs_sum;
            if (w.lambda_conf_reg > 0.0) {
                out.l_conf_reg += -std::log(C) * inv_n;
                dC += w.lambda_conf_reg * (-inv_n / C);
            }
            de(0) = dC * std::exp(conf.e_out[idx]);
            mlp_backward(conf_net, conf.caches[idx], de, out.conf_grads);

            double adiff = render.alpha.at(y, x) - mask.at(y, x);
            out.dalpha.at(y, x) =
                w.lambda_m * inv_n * (adiff > 0 ? 1.0 : (adiff < 0 ? -1.0 : 0.0));
        }
    if (w.lambda_conf_reg > 0.0) out.total += w.lambda_conf_reg * out.l_conf_reg;

    Image dssim = ssim_backward(render.color, target, -w.lambda_s);
    for (size_t i = 0; i < out.dcolor.data.size(); ++i) out.dcolor.data[i] += dssim.data[i];
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

inline double mse(const Image& a, const Image& b) {
    require(a.same_shape(b), "mse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / a.data.size();
}

// 10 log10(1/MSE) for unit-range images, capped at the 99 dB sentinel.
inline double psnr(const Image& a, const Image& b) {
    double m = mse(a, b);
    if (m <= 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

}  // namespace ava
