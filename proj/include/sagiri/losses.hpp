// Color- and content-reconstruction objectives: histogram distribution loss,
// frequency preservation loss, SSIM, and their weighted composites.
//
// Two routes are provided. The value route runs in double precision on
// ImageBuffers and is used for evaluation and finite-difference checks. The
// graph route runs on autodiff Vars and is the one training differentiates.
#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <mutex>

#include "sagiri/graph.hpp"
#include "sagiri/image.hpp"

namespace sagiri {

struct LossWeights {
    double lambda1 = 10.0;  // L_mse weight in the color composite
    double lambda2 = 1.0;   // L_cd
    double lambda3 = 0.1;   // L_fdp (color)
    double lambda4 = 1.0;   // L_mse weight in the content composite
    double lambda5 = 1.0;   // L_ssim
    double lambda6 = 0.01;  // L_fdp (content)

    void validate() const {
        for (double l : {lambda1, lambda2, lambda3, lambda4, lambda5, lambda6})
            if (!(l >= 0.0) || !std::isfinite(l))
                throw std::invalid_argument("loss weights must be finite and nonnegative");
    }
};

enum class HistMode { hard, soft };

struct Histogram {
    std::vector<std::vector<double>> bins;  // per channel, raw mass (sums to pixel count)
    int n = 0;
    HistMode mode = HistMode::soft;
    double lo = 0.0, hi = 1.0;
};

struct SsimConfig {
    double c1 = 0.01 * 0.01;  // (0.01*L)^2 with L = 1
    double c2 = 0.03 * 0.03;
    enum class Window { global, gaussian } window = Window::global;
    int win_size = 11;
    double win_sigma = 1.5;

    static SsimConfig global_stats() { return SsimConfig{}; }
    static SsimConfig gaussian(int size = 11, double sigma = 1.5) {
        SsimConfig c;
        c.window = Window::gaussian;
        c.win_size = size;
        c.win_sigma = sigma;
        return c;
    }
};

namespace detail_loss {

inline void check_pair(const ImageBuffer& a, const ImageBuffer& b) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels)
        throw std::invalid_argument("loss inputs must share a shape");
}

// hard bin index for v in [0,1]; non-finite values clamp to bin 0 so a
// diverged prediction surfaces as a non-finite composite loss, not a crash
inline int hard_bin(double v, int n) {
    if (!std::isfinite(v)) return 0;
    int i = static_cast<int>(std::floor(v * n));
    return std::max(0, std::min(n - 1, i));
}

// triangular kernel: v spreads unit mass over the two nearest bin centers
// (i + 0.5)/n; returns (bin, weight on bin, weight on bin+1)
struct SoftSplit {
    int j;
    double w0, w1;  // w1 = 0 when clamped to an end bin
};
inline SoftSplit soft_split(double v, int n) {
    double u = v * n - 0.5;
    if (!(u > 0.0)) return {0, 1.0, 0.0};  // also catches NaN
    if (u >= n - 1) return {n - 1, 1.0, 0.0};
    int j = static_cast<int>(std::floor(u));
    double frac = u - j;
    return {j, 1.0 - frac, frac};
}

// cached FFTW plans; planner is not thread-safe
inline fftw_plan plan_for(int H, int W, int sign) {
    static std::map<std::tuple<int, int, int>, fftw_plan> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_tuple(H, W, sign);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    std::vector<std::complex<double>> buf(static_cast<size_t>(H) * W);
    fftw_plan p = fftw_plan_dft_2d(H, W, reinterpret_cast<fftw_complex*>(buf.data()),
                                   reinterpret_cast<fftw_complex*>(buf.data()), sign,
                                   FFTW_ESTIMATE | FFTW_UNALIGNED);
    cache[key] = p;
    return p;
}

inline void fft2(std::vector<std::complex<double>>& buf, int H, int W, int sign) {
    fftw_plan p = plan_for(H, W, sign);
    fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(buf.data()),
                     reinterpret_cast<fftw_complex*>(buf.data()));
}

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(static_cast<size_t>(size));
    int r = size / 2;
    double sum = 0;
    for (int i = 0; i < size; ++i) {
        k[static_cast<size_t>(i)] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

}  // namespace detail_loss

// ---------------------------------------------------------------------------
// value route (double precision)
// ---------------------------------------------------------------------------

inline Histogram soft_histogram(const ImageBuffer& img, int n) {
    if (n < 2) throw std::invalid_argument("histogram needs at least 2 bins");
    Histogram h;
    h.n = n;
    h.mode = HistMode::soft;
    h.bins.assign(static_cast<size_t>(img.channels), std::vector<double>(static_cast<size_t>(n), 0.0));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                auto s = detail_loss::soft_split(img.at(y, x, c), n);
                h.bins[static_cast<size_t>(c)][static_cast<size_t>(s.j)] += s.w0;
                if (s.w1 > 0) h.bins[static_cast<size_t>(c)][static_cast<size_t>(s.j + 1)] += s.w1;
            }
    return h;
}

inline Histogram hard_histogram(const ImageBuffer& img, int n) {
    if (n < 2) throw std::invalid_argument("histogram needs at least 2 bins");
    Histogram h;
    h.n = n;
    h.mode = HistMode::hard;
    h.bins.assign(static_cast<size_t>(img.channels), std::vector<double>(static_cast<size_t>(n), 0.0));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                h.bins[static_cast<size_t>(c)][static_cast<size_t>(detail_loss::hard_bin(
                    img.at(y, x, c), n))] += 1.0;
    return h;
}

// sum over channels and bins of |H_pred - H_target|, histograms normalized by
// pixel count so the loss is resolution-invariant
inline double color_distribution_loss(const ImageBuffer& pred, const ImageBuffer& target, int n,
                                      HistMode mode = HistMode::hard) {
    detail_loss::check_pair(pred, target);
    Histogram hp = mode == HistMode::hard ? hard_histogram(pred, n) : soft_histogram(pred, n);
    Histogram ht = mode == HistMode::hard ? hard_histogram(target, n) : soft_histogram(target, n);
    double count = static_cast<double>(pred.pixel_count());
    double loss = 0;
    for (int c = 0; c < pred.channels; ++c)
        for (int i = 0; i < n; ++i)
            loss += std::abs(hp.bins[static_cast<size_t>(c)][static_cast<size_t>(i)] / count -
                             ht.bins[static_cast<size_t>(c)][static_cast<size_t>(i)] / count);
    return loss;
}

// mean over frequency bins and channels of |FFT(pred) - FFT(target)|,
// unnormalized forward transform
inline double frequency_preservation_loss(const ImageBuffer& pred, const ImageBuffer& target) {
    detail_loss::check_pair(pred, target);
    int H = pred.height, W = pred.width;
    std::vector<std::complex<double>> buf(static_cast<size_t>(H) * W);
    double acc = 0;
    for (int c = 0; c < pred.channels; ++c) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                buf[static_cast<size_t>(y) * W + x] =
                    static_cast<double>(pred.at(y, x, c)) - target.at(y, x, c);
        detail_loss::fft2(buf, H, W, FFTW_FORWARD);
        for (auto& z : buf) acc += std::abs(z);
    }
    return acc / (static_cast<double>(H) * W * pred.channels);
}

inline double mse(const ImageBuffer& pred, const ImageBuffer& target) {
    detail_loss::check_pair(pred, target);
    double acc = 0;
    for (size_t i = 0; i < pred.pixels.size(); ++i) {
        double d = static_cast<double>(pred.pixels[i]) - target.pixels[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.pixels.size());
}

inline double ssim_index(const ImageBuffer& x, const ImageBuffer& y, const SsimConfig& cfg = {}) {
    detail_loss::check_pair(x, y);
    if (cfg.window == SsimConfig::Window::global) {
        double acc = 0;
        size_t n = x.pixel_count();
        for (int c = 0; c < x.channels; ++c) {
            double mx = 0, my = 0;
            for (int yy = 0; yy < x.height; ++yy)
                for (int xx = 0; xx < x.width; ++xx) {
                    mx += x.at(yy, xx, c);
                    my += y.at(yy, xx, c);
                }
            mx /= static_cast<double>(n);
            my /= static_cast<double>(n);
            double vx = 0, vy = 0, cxy = 0;
            for (int yy = 0; yy < x.height; ++yy)
                for (int xx = 0; xx < x.width; ++xx) {
                    double dx = x.at(yy, xx, c) - mx, dy = y.at(yy, xx, c) - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            vx /= static_cast<double>(n);
            vy /= static_cast<double>(n);
            cxy /= static_cast<double>(n);
            acc += (2 * mx * my + cfg.c1) * (2 * cxy + cfg.c2) /
                   ((mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2));
        }
        return acc / x.channels;
    }
    // gaussian-window mode: windowed statistics, valid region only
    int size = cfg.win_size;
    if (x.height < size || x.width < size)
        throw std::invalid_argument("image smaller than the SSIM window");
    auto k = detail_loss::gaussian_kernel(size, cfg.win_sigma);
    int oh = x.height - size + 1, ow = x.width - size + 1;
    auto filt = [&](const std::vector<double>& src, std::vector<double>& dst) {
        std::vector<double> tmp(static_cast<size_t>(x.height) * ow);
        for (int yy = 0; yy < x.height; ++yy)
            for (int xx = 0; xx < ow; ++xx) {
                double acc = 0;
                for (int i = 0; i < size; ++i)
                    acc += k[static_cast<size_t>(i)] * src[static_cast<size_t>(yy) * x.width + xx + i];
                tmp[static_cast<size_t>(yy) * ow + xx] = acc;
            }
        dst.assign(static_cast<size_t>(oh) * ow, 0.0);
        for (int yy = 0; yy < oh; ++yy)
            for (int xx = 0; xx < ow; ++xx) {
                double acc = 0;
                for (int i = 0; i < size; ++i)
                    acc += k[static_cast<size_t>(i)] * tmp[static_cast<size_t>(yy + i) * ow + xx];
                dst[static_cast<size_t>(yy) * ow + xx] = acc;
            }
    };
    double total = 0;
    std::vector<double> px(x.pixel_count()), py(x.pixel_count()), pxx(x.pixel_count()),
        pyy(x.pixel_count()), pxy(x.pixel_count());
    std::vector<double> mx, my, mxx, myy, mxy;
    for (int c = 0; c < x.channels; ++c) {
        for (int yy = 0; yy < x.height; ++yy)
            for (int xx = 0; xx < x.width; ++xx) {
                size_t i = static_cast<size_t>(yy) * x.width + xx;
                px[i] = x.at(yy, xx, c);
                py[i] = y.at(yy, xx, c);
                pxx[i] = px[i] * px[i];
                pyy[i] = py[i] * py[i];
                pxy[i] = px[i] * py[i];
            }
        filt(px, mx);
        filt(py, my);
        filt(pxx, mxx);
        filt(pyy, myy);
        filt(pxy, mxy);
        double acc = 0;
        for (size_t i = 0; i < mx.size(); ++i) {
            double vx = mxx[i] - mx[i] * mx[i];
            double vy = myy[i] - my[i] * my[i];
            double cxy = mxy[i] - mx[i] * my[i];
            acc += (2 * mx[i] * my[i] + cfg.c1) * (2 * cxy + cfg.c2) /
                   ((mx[i] * mx[i] + my[i] * my[i] + cfg.c1) * (vx + vy + cfg.c2));
        }
        total += acc / static_cast<double>(mx.size());
    }
    return total / x.channels;
}

inline double compose_color_loss(const ImageBuffer& pred, const ImageBuffer& target,
                                 const LossWeights& w = {}, int n_bins = 64) {
    w.validate();
    detail_loss::check_pair(pred, target);
    return w.lambda1 * mse(pred, target) +
           w.lambda2 * color_distribution_loss(pred, target, n_bins, HistMode::soft) +
           w.lambda3 * frequency_preservation_loss(pred, target);
}

inline double compose_content_loss(const ImageBuffer& pred, const ImageBuffer& target,
                                   const LossWeights& w = {}, const SsimConfig& cfg = {}) {
    w.validate();
    detail_loss::check_pair(pred, target);
    return w.lambda4 * mse(pred, target) + w.lambda5 * (1.0 - ssim_index(pred, target, cfg)) +
           w.lambda6 * frequency_preservation_loss(pred, target);
}

// ---------------------------------------------------------------------------
// graph route (autodiff, float tensors shaped [N,C,H,W]; loss is the mean of
// per-image losses over the batch)
// ---------------------------------------------------------------------------

inline Var graph_soft_cd_loss(Var pred, const Tensor& target, int n_bins) {
    const auto& s = pred.val().shape;
    assert(s.size() == 4 && target.shape == s);
    if (n_bins < 2) throw std::invalid_argument("histogram needs at least 2 bins");
    int B = s[0], C = s[1];
    int64_t plane = static_cast<int64_t>(s[2]) * s[3];
    double count = static_cast<double>(plane);

    // per (b,c): normalized soft histograms of pred and target
    std::vector<double> hp(static_cast<size_t>(B) * C * n_bins, 0.0);
    std::vector<double> ht(hp.size(), 0.0);
    const float* pv = pred.val().ptr();
    const float* tv = target.ptr();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            size_t base = (static_cast<size_t>(b) * C + c) * n_bins;
            const float* pp = pv + (static_cast<int64_t>(b) * C + c) * plane;
            const float* tp = tv + (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                auto sp = detail_loss::soft_split(pp[i], n_bins);
                hp[base + static_cast<size_t>(sp.j)] += sp.w0 / count;
                if (sp.w1 > 0) hp[base + static_cast<size_t>(sp.j + 1)] += sp.w1 / count;
                auto st = detail_loss::soft_split(tp[i], n_bins);
                ht[base + static_cast<size_t>(st.j)] += st.w0 / count;
                if (st.w1 > 0) ht[base + static_cast<size_t>(st.j + 1)] += st.w1 / count;
            }
        }
    double loss = 0;
    std::vector<float> sign(hp.size());
    for (size_t i = 0; i < hp.size(); ++i) {
        double d = hp[i] - ht[i];
        loss += std::abs(d);
        sign[i] = d > 0 ? 1.0f : (d < 0 ? -1.0f : 0.0f);
    }
    loss /= B;

    Tensor out = Tensor::scalar(static_cast<float>(loss));
    return detail::make_op(std::move(out), {pred},
                           [B, C, plane, n_bins, count, sg = std::move(sign)](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float up = nd.grad.data[0] / static_cast<float>(B);
        const float* pv = nd.parents[0]->val.ptr();
        float* gx = nd.parents[0]->ensure_grad().ptr();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                size_t base = (static_cast<size_t>(b) * C + c) * static_cast<size_t>(n_bins);
                const float* pp = pv + (static_cast<int64_t>(b) * C + c) * plane;
                float* gp = gx + (static_cast<int64_t>(b) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    double u = static_cast<double>(pp[i]) * n_bins - 0.5;
                    if (!(u > 0.0) || u >= n_bins - 1) continue;  // clamped: locally constant
                    int j = static_cast<int>(std::floor(u));
                    float dmass = static_cast<float>(n_bins / count);
                    gp[i] += up * (sg[base + static_cast<size_t>(j + 1)] -
                                   sg[base + static_cast<size_t>(j)]) *
                             dmass;
                }
            }
    });
}

inline Var graph_fdp_loss(Var pred, const Tensor& target) {
    const auto& s = pred.val().shape;
    assert(s.size() == 4 && target.shape == s);
    int B = s[0], C = s[1], H = s[2], W = s[3];
    int64_t plane = static_cast<int64_t>(H) * W;
    double norm = static_cast<double>(C) * H * W;

    // keep the unit phasors D/|D| for the backward pass
    std::vector<std::complex<double>> phasors(static_cast<size_t>(B) * C * plane);
    std::vector<std::complex<double>> buf(static_cast<size_t>(plane));
    double loss = 0;
    const float* pv = pred.val().ptr();
    const float* tv = target.ptr();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            int64_t off = (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i)
                buf[static_cast<size_t>(i)] = static_cast<double>(pv[off + i]) - tv[off + i];
            detail_loss::fft2(buf, H, W, FFTW_FORWARD);
            for (int64_t i = 0; i < plane; ++i) {
                double m = std::abs(buf[static_cast<size_t>(i)]);
                loss += m;
                phasors[static_cast<size_t>(off + i)] =
                    m > 0 ? buf[static_cast<size_t>(i)] / m : std::complex<double>(0, 0);
            }
        }
    loss /= norm * B;

    Tensor out = Tensor::scalar(static_cast<float>(loss));
    return detail::make_op(std::move(out), {pred},
                           [B, C, H, W, plane, norm, ph = std::move(phasors)](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        double up = static_cast<double>(nd.grad.data[0]) / (norm * B);
        float* gx = nd.parents[0]->ensure_grad().ptr();
        std::vector<std::complex<double>> buf(static_cast<size_t>(plane));
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                int64_t off = (static_cast<int64_t>(b) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) buf[static_cast<size_t>(i)] = ph[static_cast<size_t>(off + i)];
                // d/dx mean|F x| = Re(F* (D/|D|)) / M; FFTW_BACKWARD is the
                // unnormalized adjoint of FFTW_FORWARD for real inputs
                detail_loss::fft2(buf, H, W, FFTW_BACKWARD);
                for (int64_t i = 0; i < plane; ++i)
                    gx[off + i] += static_cast<float>(up * buf[static_cast<size_t>(i)].real());
            }
    });
}

// global-statistics SSIM on [N,C,H,W]; returns scalar mean over batch/channels
inline Var graph_ssim_global(Var x, const Tensor& target, double c1 = 0.01 * 0.01,
                             double c2 = 0.03 * 0.03) {
    assert(x.val().shape == target.shape);
    Var y = constant(target);
    Var mx = mean_spatial(x);
    Var my = mean_spatial(y);
    Var mxx = mean_spatial(mul(x, x));
    Var myy = mean_spatial(mul(y, y));
    Var mxy = mean_spatial(mul(x, y));
    Var vx = sub(mxx, mul(mx, mx));
    Var vy = sub(myy, mul(my, my));
    Var cxy = sub(mxy, mul(mx, my));
    Var num = mul(add_scalar(mul_scalar(mul(mx, my), 2.0f), static_cast<float>(c1)),
                  add_scalar(mul_scalar(cxy, 2.0f), static_cast<float>(c2)));
    Var den = mul(add_scalar(add(mul(mx, mx), mul(my, my)), static_cast<float>(c1)),
                  add_scalar(add(vx, vy), static_cast<float>(c2)));
    return mean_all(div(num, den));
}

inline Var graph_color_loss(Var pred, const Tensor& target, const LossWeights& w = {},
                            int n_bins = 64) {
    w.validate();
    Var l = mul_scalar(mse_loss(pred, constant(target)), static_cast<float>(w.lambda1));
    l = add(l, mul_scalar(graph_soft_cd_loss(pred, target, n_bins), static_cast<float>(w.lambda2)));
    l = add(l, mul_scalar(graph_fdp_loss(pred, target), static_cast<float>(w.lambda3)));
    return l;
}

inline Var graph_content_loss(Var pred, const Tensor& target, const LossWeights& w = {},
                              const SsimConfig& cfg = {}) {
    w.validate();
    if (cfg.window != SsimConfig::Window::global)
        throw std::invalid_argument("graph content loss supports global SSIM statistics");
    Var l = mul_scalar(mse_loss(pred, constant(target)), static_cast<float>(w.lambda4));
    Var ssim = graph_ssim_global(pred, target, cfg.c1, cfg.c2);
    l = add(l, mul_scalar(sub(scalar_var(1.0f), ssim), static_cast<float>(w.lambda5)));
    l = add(l, mul_scalar(graph_fdp_loss(pred, target), static_cast<float>(w.lambda6)));
    return l;
}

}  // namespace sagiri
