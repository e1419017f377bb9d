#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>

#include "camf/parallel.hpp"
#include "camf/random.hpp"
#include "camf/tensor.hpp"

namespace camf {

// ---------------------------------------------------------------------------
// 3-d convolution (cross-correlation, the deep-learning convention)
// ---------------------------------------------------------------------------

template <class T>
struct Conv3dParams {
    Tensor<T> weight;  // [OC x IC/groups x KD x KH x KW]
    Tensor<T> bias;    // [OC] or empty
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> padding{0, 0, 0};
    int groups = 1;

    int out_channels() const { return int(weight.shape[0]); }
    int in_channels() const { return int(weight.shape[1]) * groups; }
    bool has_bias() const { return bias.store != nullptr && bias.numel() > 0; }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> r{&weight};
        if (has_bias()) r.push_back(&bias);
        return r;
    }
};

namespace detail {

// Output index range [lo, hi) such that in = out*stride + k_off stays inside
// [0, in_size).
inline void conv_span(long in_size, long k_off, long stride, long out_size, long& lo, long& hi) {
    lo = k_off < 0 ? (-k_off + stride - 1) / stride : 0;
    long last = in_size - 1 - k_off;
    hi = last < 0 ? 0 : std::min(out_size, last / stride + 1);
    if (lo > hi) lo = hi;
}

// dst[d][h][0..W) += stencil of src with 27 taps; 3x3x3, stride 1, pad 1,
// same extents. flip reverses the taps (the transposed form used for input
// gradients). Walks each row once per (kd, kh) with three fused taps.
template <class T>
void stencil3_acc(T* __restrict__ dst, const T* __restrict__ src, const T* taps, long D, long H, long W,
                  bool flip) {
    for (long kd = 0; kd < 3; ++kd)
        for (long kh = 0; kh < 3; ++kh) {
            const T* t = taps + ((flip ? (2 - kd) * 3 + (2 - kh) : kd * 3 + kh)) * 3;
            const T w0 = flip ? t[2] : t[0];
            const T w1 = t[1];
            const T w2 = flip ? t[0] : t[2];
            if (w0 == T(0) && w1 == T(0) && w2 == T(0)) continue;
            for (long d = 0; d < D; ++d) {
                const long id = d + kd - 1;
                if (id < 0 || id >= D) continue;
                for (long h = 0; h < H; ++h) {
                    const long ih = h + kh - 1;
                    if (ih < 0 || ih >= H) continue;
                    const T* __restrict__ xr = src + (id * H + ih) * W;
                    T* __restrict__ dr = dst + (d * H + h) * W;
                    dr[0] += w1 * xr[0] + w2 * xr[1];
                    for (long i = 1; i < W - 1; ++i) dr[i] += w0 * xr[i - 1] + w1 * xr[i] + w2 * xr[i + 1];
                    dr[W - 1] += w0 * xr[W - 2] + w1 * xr[W - 1];
                }
            }
        }
}

// taps27 += correlations of src rows against grad rows for the same stencil.
template <class T>
void stencil3_weight_acc(double* taps_acc, const T* __restrict__ src, const T* __restrict__ grad, long D, long H,
                         long W) {
    for (long kd = 0; kd < 3; ++kd)
        for (long kh = 0; kh < 3; ++kh) {
            double a0 = 0, a1 = 0, a2 = 0;
            for (long d = 0; d < D; ++d) {
                const long id = d + kd - 1;
                if (id < 0 || id >= D) continue;
                for (long h = 0; h < H; ++h) {
                    const long ih = h + kh - 1;
                    if (ih < 0 || ih >= H) continue;
                    const T* __restrict__ xr = src + (id * H + ih) * W;
                    const T* __restrict__ gr = grad + (d * H + h) * W;
                    a1 += double(xr[0]) * double(gr[0]);
                    a2 += double(xr[1]) * double(gr[0]);
                    for (long i = 1; i < W - 1; ++i) {
                        a0 += double(xr[i - 1]) * double(gr[i]);
                        a1 += double(xr[i]) * double(gr[i]);
                        a2 += double(xr[i + 1]) * double(gr[i]);
                    }
                    a0 += double(xr[W - 2]) * double(gr[W - 1]);
                    a1 += double(xr[W - 1]) * double(gr[W - 1]);
                }
            }
            double* t = taps_acc + (kd * 3 + kh) * 3;
            t[0] += a0;
            t[1] += a1;
            t[2] += a2;
        }
}

}  // namespace detail

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Conv3dParams<T>& p, GradTape<T>* tape = nullptr) {
    if (x.rank() != 5) throw std::invalid_argument("conv3d expects [NxCxDxHxW], got " + shape_str(x.shape));
    const long N = long(x.shape[0]), C = long(x.shape[1]);
    const long D = long(x.shape[2]), H = long(x.shape[3]), W = long(x.shape[4]);
    if (p.weight.rank() != 5) throw std::invalid_argument("conv3d weight must be rank-5");
    const long OC = p.out_channels(), ICG = long(p.weight.shape[1]);
    const long KD = long(p.weight.shape[2]), KH = long(p.weight.shape[3]), KW = long(p.weight.shape[4]);
    const long G = p.groups;
    if (C != ICG * G)
        throw std::invalid_argument("conv3d channel mismatch: input has " + std::to_string(C) +
                                    " channels, weight expects " + std::to_string(ICG * G));
    if (OC % G != 0) throw std::invalid_argument("conv3d out_channels not divisible by groups");
    const long sd = p.stride[0], sh = p.stride[1], sw = p.stride[2];
    const long pd = p.padding[0], ph = p.padding[1], pw = p.padding[2];
    if (KD > D + 2 * pd || KH > H + 2 * ph || KW > W + 2 * pw)
        throw std::invalid_argument("conv3d kernel larger than padded input");
    const long OD = (D + 2 * pd - KD) / sd + 1;
    const long OH = (H + 2 * ph - KH) / sh + 1;
    const long OW = (W + 2 * pw - KW) / sw + 1;
    if (OD < 1 || OH < 1 || OW < 1) throw std::invalid_argument("conv3d produces empty output");
    if (p.has_bias() && long(p.bias.numel()) != OC)
        throw std::invalid_argument("conv3d bias size does not match out_channels");

    Tensor<T> out = Tensor<T>::zeros({std::size_t(N), std::size_t(OC), std::size_t(OD), std::size_t(OH),
                                      std::size_t(OW)});
    const long OCG = OC / G;
    const T* xd = x.data();
    const T* wd = p.weight.data();
    T* od_ = out.data();

    // fused-tap fast path for the 3x3x3 stride-1 pad-1 shape
    const bool fast3 = KD == 3 && KH == 3 && KW == 3 && sd == 1 && sh == 1 && sw == 1 && pd == 1 && ph == 1 &&
                       pw == 1 && W >= 2;

    parallel_for(0, std::size_t(N * OC), [&](std::size_t job) {
        const long n = long(job) / OC, oc = long(job) % OC;
        const long g = oc / OCG;
        T* oblock = od_ + (n * OC + oc) * OD * OH * OW;
        if (p.has_bias()) {
            T b = p.bias.data()[oc];
            for (long i = 0; i < OD * OH * OW; ++i) oblock[i] = b;
        }
        if (fast3) {
            for (long icg = 0; icg < ICG; ++icg)
                detail::stencil3_acc(oblock, xd + (n * C + g * ICG + icg) * D * H * W,
                                     wd + (oc * ICG + icg) * 27, D, H, W, /*flip=*/false);
            return;
        }
        for (long icg = 0; icg < ICG; ++icg) {
            const T* xch = xd + (n * C + g * ICG + icg) * D * H * W;
            const T* wch = wd + (oc * ICG + icg) * KD * KH * KW;
            for (long kd = 0; kd < KD; ++kd) {
                long dlo, dhi;
                detail::conv_span(D, kd - pd, sd, OD, dlo, dhi);
                for (long kh = 0; kh < KH; ++kh) {
                    long hlo, hhi;
                    detail::conv_span(H, kh - ph, sh, OH, hlo, hhi);
                    for (long kw = 0; kw < KW; ++kw) {
                        long wlo, whi;
                        detail::conv_span(W, kw - pw, sw, OW, wlo, whi);
                        const T wv = wch[(kd * KH + kh) * KW + kw];
                        if (wv == T(0)) continue;
                        for (long odi = dlo; odi < dhi; ++odi) {
                            const long id = odi * sd - pd + kd;
                            for (long ohi = hlo; ohi < hhi; ++ohi) {
                                const long ih = ohi * sh - ph + kh;
                                const T* __restrict__ xrow = xch + (id * H + ih) * W + (wlo * sw - pw + kw);
                                T* __restrict__ orow = oblock + (odi * OH + ohi) * OW + wlo;
                                const long span = whi - wlo;
                                if (sw == 1) {
                                    for (long i = 0; i < span; ++i) orow[i] += wv * xrow[i];
                                } else {
                                    for (long i = 0; i < span; ++i) orow[i] += wv * xrow[i * sw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    detail::check_finite(out, "conv3d");

    Tensor<T> w = p.weight, b = p.bias;
    detail::record(tape, out, {&x, &p.weight, p.has_bias() ? &p.bias : &x},
                   [x, w, b, out, N, C, D, H, W, OC, ICG, KD, KH, KW, G, OCG, sd, sh, sw, pd, ph, pw, OD, OH, OW,
                    fast3]() {
        const T* gout = out.grad();
        const T* xd = x.data();
        const T* wd = w.data();
        if (x.has_grad()) {
            T* gx = const_cast<Tensor<T>&>(x).grad();
            parallel_for(0, std::size_t(N * C), [&](std::size_t job) {
                const long n = long(job) / C, ic = long(job) % C;
                const long g = ic / ICG, icg = ic % ICG;
                T* gxch = gx + (n * C + ic) * D * H * W;
                if (fast3) {
                    for (long ocg = 0; ocg < OCG; ++ocg) {
                        const long oc = g * OCG + ocg;
                        detail::stencil3_acc(gxch, gout + (n * OC + oc) * D * H * W, wd + (oc * ICG + icg) * 27, D,
                                             H, W, /*flip=*/true);
                    }
                    return;
                }
                for (long ocg = 0; ocg < OCG; ++ocg) {
                    const long oc = g * OCG + ocg;
                    const T* gblock = gout + (n * OC + oc) * OD * OH * OW;
                    const T* wch = wd + (oc * ICG + icg) * KD * KH * KW;
                    for (long kd = 0; kd < KD; ++kd) {
                        long dlo, dhi;
                        detail::conv_span(D, kd - pd, sd, OD, dlo, dhi);
                        for (long kh = 0; kh < KH; ++kh) {
                            long hlo, hhi;
                            detail::conv_span(H, kh - ph, sh, OH, hlo, hhi);
                            for (long kw = 0; kw < KW; ++kw) {
                                long wlo, whi;
                                detail::conv_span(W, kw - pw, sw, OW, wlo, whi);
                                const T wv = wch[(kd * KH + kh) * KW + kw];
                                if (wv == T(0)) continue;
                                for (long odi = dlo; odi < dhi; ++odi) {
                                    const long id = odi * sd - pd + kd;
                                    for (long ohi = hlo; ohi < hhi; ++ohi) {
                                        const long ih = ohi * sh - ph + kh;
                                        T* __restrict__ gxrow = gxch + (id * H + ih) * W + (wlo * sw - pw + kw);
                                        const T* __restrict__ grow = gblock + (odi * OH + ohi) * OW + wlo;
                                        const long span = whi - wlo;
                                        if (sw == 1) {
                                            for (long i = 0; i < span; ++i) gxrow[i] += wv * grow[i];
                                        } else {
                                            for (long i = 0; i < span; ++i) gxrow[i * sw] += wv * grow[i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if (w.has_grad()) {
            T* gw = const_cast<Tensor<T>&>(w).grad();
            parallel_for(0, std::size_t(OC), [&](std::size_t job) {
                const long oc = long(job);
                const long g = oc / OCG;
                if (fast3) {
                    std::vector<double> acc(std::size_t(ICG) * 27, 0.0);
                    for (long icg = 0; icg < ICG; ++icg)
                        for (long n = 0; n < N; ++n)
                            detail::stencil3_weight_acc(acc.data() + icg * 27,
                                                        xd + (n * C + g * ICG + icg) * D * H * W,
                                                        gout + (n * OC + oc) * D * H * W, D, H, W);
                    for (long i = 0; i < ICG * 27; ++i) gw[oc * ICG * 27 + i] += T(acc[std::size_t(i)]);
                    return;
                }
                for (long icg = 0; icg < ICG; ++icg) {
                    T* gwch = gw + (oc * ICG + icg) * KD * KH * KW;
                    for (long kd = 0; kd < KD; ++kd) {
                        long dlo, dhi;
                        detail::conv_span(D, kd - pd, sd, OD, dlo, dhi);
                        for (long kh = 0; kh < KH; ++kh) {
                            long hlo, hhi;
                            detail::conv_span(H, kh - ph, sh, OH, hlo, hhi);
                            for (long kw = 0; kw < KW; ++kw) {
                                long wlo, whi;
                                detail::conv_span(W, kw - pw, sw, OW, wlo, whi);
                                double acc = 0;
                                for (long n = 0; n < N; ++n) {
                                    const T* xch = xd + (n * C + g * ICG + icg) * D * H * W;
                                    const T* gblock = gout + (n * OC + oc) * OD * OH * OW;
                                    for (long odi = dlo; odi < dhi; ++odi) {
                                        const long id = odi * sd - pd + kd;
                                        for (long ohi = hlo; ohi < hhi; ++ohi) {
                                            const long ih = ohi * sh - ph + kh;
                                            const T* __restrict__ xrow = xch + (id * H + ih) * W + (wlo * sw - pw + kw);
                                            const T* __restrict__ grow = gblock + (odi * OH + ohi) * OW + wlo;
                                            const long span = whi - wlo;
                                            if (sw == 1) {
                                                for (long i = 0; i < span; ++i)
                                                    acc += double(xrow[i]) * double(grow[i]);
                                            } else {
                                                for (long i = 0; i < span; ++i)
                                                    acc += double(xrow[i * sw]) * double(grow[i]);
                                            }
                                        }
                                    }
                                }
                                gwch[(kd * KH + kh) * KW + kw] += T(acc);
                            }
                        }
                    }
                }
            });
        }
        if (b.store && b.has_grad()) {
            T* gb = const_cast<Tensor<T>&>(b).grad();
            for (long oc = 0; oc < OC; ++oc) {
                double acc = 0;
                for (long n = 0; n < N; ++n) {
                    const T* gblock = gout + (n * OC + oc) * OD * OH * OW;
                    for (long i = 0; i < OD * OH * OW; ++i) acc += double(gblock[i]);
                }
                gb[oc] += T(acc);
            }
        }
    });
    return out;
}

// Depthwise strip kernel along one axis (0=D, 1=H, 2=W), shape preserving.
template <class T>
Conv3dParams<T> strip_conv_params(int channels, int axis, int k) {
    if (k % 2 == 0) throw std::invalid_argument("strip kernel length must be odd, got " + std::to_string(k));
    if (axis < 0 || axis > 2) throw std::invalid_argument("strip axis must be 0, 1 or 2");
    Conv3dParams<T> p;
    Shape ws{std::size_t(channels), 1, 1, 1, 1};
    ws[2 + axis] = std::size_t(k);
    p.weight = Tensor<T>::param(ws);
    p.groups = channels;
    p.padding = {0, 0, 0};
    p.padding[axis] = (k - 1) / 2;
    return p;
}

template <class T>
Tensor<T> depthwise_strip_conv3d(const Tensor<T>& x, const Conv3dParams<T>& p, GradTape<T>* tape = nullptr) {
    if (p.groups != int(x.shape[1]))
        throw std::invalid_argument("depthwise strip conv requires groups == channels");
    long axes_above_one = 0;
    for (int a = 0; a < 3; ++a) {
        long k = long(p.weight.shape[2 + a]);
        if (k > 1) {
            ++axes_above_one;
            if (k % 2 == 0) throw std::invalid_argument("strip kernel length must be odd");
            if (p.padding[a] != (k - 1) / 2) throw std::invalid_argument("strip padding must be (k-1)/2");
        }
    }
    if (axes_above_one > 1) throw std::invalid_argument("strip kernel must extend along a single axis");
    return conv3d(x, p, tape);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

enum class PoolKind { max, avg };

template <class T>
Tensor<T> pool3d(const Tensor<T>& x, PoolKind kind, std::array<int, 3> k, std::array<int, 3> stride,
                 std::array<int, 3> pad, GradTape<T>* tape = nullptr) {
    if (x.rank() != 5) throw std::invalid_argument("pool3d expects [NxCxDxHxW]");
    for (int a = 0; a < 3; ++a) {
        if (k[a] <= 0) throw std::invalid_argument("pool3d kernel must be positive");
        if (stride[a] <= 0) throw std::invalid_argument("pool3d stride must be positive");
        if (long(k[a]) > long(x.shape[2 + a]) + 2 * pad[a])
            throw std::invalid_argument("pool3d kernel larger than padded input");
    }
    const long N = long(x.shape[0]), C = long(x.shape[1]);
    const long D = long(x.shape[2]), H = long(x.shape[3]), W = long(x.shape[4]);
    const long OD = (D + 2 * pad[0] - k[0]) / stride[0] + 1;
    const long OH = (H + 2 * pad[1] - k[1]) / stride[1] + 1;
    const long OW = (W + 2 * pad[2] - k[2]) / stride[2] + 1;
    Tensor<T> out = Tensor<T>::zeros({std::size_t(N), std::size_t(C), std::size_t(OD), std::size_t(OH),
                                      std::size_t(OW)});
    // argmax for max kind; in-bounds count for avg kind
    auto aux = std::make_shared<std::vector<std::int64_t>>(out.numel(), 0);
    const T* xd = x.data();
    T* od_ = out.data();
    std::size_t oi = 0;
    for (long n = 0; n < N; ++n)
        for (long c = 0; c < C; ++c) {
            const T* xch = xd + (n * C + c) * D * H * W;
            for (long odi = 0; odi < OD; ++odi)
                for (long ohi = 0; ohi < OH; ++ohi)
                    for (long owi = 0; owi < OW; ++owi, ++oi) {
                        const long d0 = odi * stride[0] - pad[0], h0 = ohi * stride[1] - pad[1],
                                   w0 = owi * stride[2] - pad[2];
                        if (kind == PoolKind::max) {
                            T best = -std::numeric_limits<T>::infinity();
                            std::int64_t best_idx = -1;
                            for (long dd = std::max(0l, d0); dd < std::min(D, d0 + k[0]); ++dd)
                                for (long hh = std::max(0l, h0); hh < std::min(H, h0 + k[1]); ++hh)
                                    for (long ww = std::max(0l, w0); ww < std::min(W, w0 + k[2]); ++ww) {
                                        T v = xch[(dd * H + hh) * W + ww];
                                        if (v > best) {
                                            best = v;
                                            best_idx = (dd * H + hh) * W + ww;
                                        }
                                    }
                            od_[oi] = best;
                            (*aux)[oi] = (n * C + c) * D * H * W + best_idx;
                        } else {
                            double acc = 0;
                            long cnt = 0;
                            for (long dd = std::max(0l, d0); dd < std::min(D, d0 + k[0]); ++dd)
                                for (long hh = std::max(0l, h0); hh < std::min(H, h0 + k[1]); ++hh)
                                    for (long ww = std::max(0l, w0); ww < std::min(W, w0 + k[2]); ++ww) {
                                        acc += double(xch[(dd * H + hh) * W + ww]);
                                        ++cnt;
                                    }
                            od_[oi] = T(acc / double(cnt));
                            (*aux)[oi] = cnt;
                        }
                    }
        }
    detail::check_finite(out, "pool3d");
    detail::record(tape, out, {&x}, [x, out, aux, kind, N, C, D, H, W, OD, OH, OW, k, stride, pad]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        if (kind == PoolKind::max) {
            for (std::size_t i = 0; i < out.numel(); ++i) gx[(*aux)[i]] += g[i];
        } else {
            std::size_t oi = 0;
            for (long n = 0; n < N; ++n)
                for (long c = 0; c < C; ++c) {
                    T* gxch = gx + (n * C + c) * D * H * W;
                    for (long odi = 0; odi < OD; ++odi)
                        for (long ohi = 0; ohi < OH; ++ohi)
                            for (long owi = 0; owi < OW; ++owi, ++oi) {
                                const long d0 = odi * stride[0] - pad[0], h0 = ohi * stride[1] - pad[1],
                                           w0 = owi * stride[2] - pad[2];
                                const T share = g[oi] / T((*aux)[oi]);
                                for (long dd = std::max(0l, d0); dd < std::min(D, d0 + k[0]); ++dd)
                                    for (long hh = std::max(0l, h0); hh < std::min(H, h0 + k[1]); ++hh)
                                        for (long ww = std::max(0l, w0); ww < std::min(W, w0 + k[2]); ++ww)
                                            gxch[(dd * H + hh) * W + ww] += share;
                            }
                }
        }
    });
    return out;
}

// cubic kernel convenience form
template <class T>
Tensor<T> pool3d(const Tensor<T>& x, PoolKind kind, int k, int stride, int pad = 0, GradTape<T>* tape = nullptr) {
    return pool3d(x, kind, {k, k, k}, {stride, stride, stride}, {pad, pad, pad}, tape);
}

template <class T>
Tensor<T> global_pool(const Tensor<T>& x, PoolKind kind, GradTape<T>* tape = nullptr) {
    if (x.rank() != 5) throw std::invalid_argument("global_pool expects [NxCxDxHxW]");
    const long N = long(x.shape[0]), C = long(x.shape[1]);
    const long V = long(x.numel()) / (N * C);
    Tensor<T> out = Tensor<T>::zeros({std::size_t(N), std::size_t(C), 1, 1, 1});
    auto argmax = std::make_shared<std::vector<std::int64_t>>();
    if (kind == PoolKind::max) argmax->assign(std::size_t(N * C), 0);
    for (long nc = 0; nc < N * C; ++nc) {
        const T* xch = x.data() + nc * V;
        if (kind == PoolKind::avg) {
            double acc = 0;
            for (long i = 0; i < V; ++i) acc += double(xch[i]);
            out.data()[nc] = T(acc / double(V));
        } else {
            long best = 0;
            for (long i = 1; i < V; ++i)
                if (xch[i] > xch[best]) best = i;
            out.data()[nc] = xch[best];
            (*argmax)[nc] = nc * V + best;
        }
    }
    detail::record(tape, out, {&x}, [x, out, argmax, kind, N, C, V]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        if (kind == PoolKind::avg) {
            for (long nc = 0; nc < N * C; ++nc) {
                const T share = g[nc] / T(V);
                T* gxch = gx + nc * V;
                for (long i = 0; i < V; ++i) gxch[i] += share;
            }
        } else {
            for (long nc = 0; nc < N * C; ++nc) gx[(*argmax)[nc]] += g[nc];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

enum class NormKind { instance, batch };

template <class T>
struct NormParams {
    NormKind kind = NormKind::instance;
    Tensor<T> gamma;  // [C]
    Tensor<T> beta;   // [C]
    T eps = T(1e-5);
    T momentum = T(0.1);
    Tensor<T> running_mean;  // batch kind only, [C]
    Tensor<T> running_var;

    static NormParams make(NormKind kind, int channels) {
        NormParams p;
        p.kind = kind;
        p.gamma = Tensor<T>::param({std::size_t(channels)});
        for (auto& v : *p.gamma.store) v = T(1);
        p.beta = Tensor<T>::param({std::size_t(channels)});
        if (kind == NormKind::batch) {
            p.running_mean = Tensor<T>::zeros({std::size_t(channels)});
            p.running_var = Tensor<T>::full({std::size_t(channels)}, T(1));
        }
        return p;
    }

    std::vector<Tensor<T>*> params() { return {&gamma, &beta}; }
};

// Per-(sample, channel) spatial standardization with learned affine. No
// running statistics; normalizes identically in train and eval.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const NormParams<T>& p, GradTape<T>* tape = nullptr) {
    if (x.rank() != 5) throw std::invalid_argument("instance_norm expects [NxCxDxHxW]");
    const long N = long(x.shape[0]), C = long(x.shape[1]);
    const long V = long(x.numel()) / (N * C);
    if (long(p.gamma.numel()) != C)
        throw std::invalid_argument("instance_norm gamma size " + std::to_string(p.gamma.numel()) +
                                    " does not match channels " + std::to_string(C));
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(std::size_t(N * C));
    const T* xd = x.data();
    T* od_ = out.data();
    for (long nc = 0; nc < N * C; ++nc) {
        const long c = nc % C;
        const T* xch = xd + nc * V;
        double mean = 0;
        for (long i = 0; i < V; ++i) mean += double(xch[i]);
        mean /= double(V);
        double var = 0;
        for (long i = 0; i < V; ++i) {
            double d = double(xch[i]) - mean;
            var += d * d;
        }
        var /= double(V);
        const T inv = T(1.0 / std::sqrt(var + double(p.eps)));
        (*inv_std)[nc] = inv;
        const T g = p.gamma.data()[c], b = p.beta.data()[c];
        T* oc = od_ + nc * V;
        T* xh = xhat->data() + nc * V;
        for (long i = 0; i < V; ++i) {
            xh[i] = (xch[i] - T(mean)) * inv;
            oc[i] = g * xh[i] + b;
        }
    }
    detail::check_finite(out, "instance_norm");
    Tensor<T> gamma = p.gamma, beta = p.beta;
    detail::record(tape, out, {&x, &p.gamma, &p.beta}, [x, gamma, beta, out, xhat, inv_std, N, C, V]() {
        const T* g = out.grad();
        for (long nc = 0; nc < N * C; ++nc) {
            const long c = nc % C;
            const T* gch = g + nc * V;
            const T* xh = xhat->data() + nc * V;
            double sum_g = 0, sum_gx = 0;
            for (long i = 0; i < V; ++i) {
                sum_g += double(gch[i]);
                sum_gx += double(gch[i]) * double(xh[i]);
            }
            if (gamma.has_grad()) const_cast<Tensor<T>&>(gamma).grad()[c] += T(sum_gx);
            if (beta.has_grad()) const_cast<Tensor<T>&>(beta).grad()[c] += T(sum_g);
            if (x.has_grad()) {
                T* gx = const_cast<Tensor<T>&>(x).grad() + nc * V;
                const T coef = gamma.data()[c] * (*inv_std)[nc];
                const T mg = T(sum_g / double(V)), mgx = T(sum_gx / double(V));
                for (long i = 0; i < V; ++i) gx[i] += coef * (gch[i] - mg - xh[i] * mgx);
            }
        }
    });
    return out;
}

// Per-channel normalization over (N, spatial); running statistics follow the
// standard momentum rule and are only touched when training.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, NormParams<T>& p, bool training, GradTape<T>* tape = nullptr) {
    if (x.rank() != 5) throw std::invalid_argument("batch_norm expects [NxCxDxHxW]");
    const long N = long(x.shape[0]), C = long(x.shape[1]);
    const long V = long(x.numel()) / (N * C);
    if (long(p.gamma.numel()) != C) throw std::invalid_argument("batch_norm gamma size mismatch");
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    const T* xd = x.data();
    T* od_ = out.data();

    if (!training) {
        // affine transform from stored running stats
        std::vector<T> invs(C);
        for (long c = 0; c < C; ++c) invs[c] = T(1.0 / std::sqrt(double(p.running_var.data()[c]) + double(p.eps)));
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < C; ++c) {
                const T* xch = xd + (n * C + c) * V;
                T* oc = od_ + (n * C + c) * V;
                const T m = p.running_mean.data()[c], inv = invs[c];
                const T g = p.gamma.data()[c], b = p.beta.data()[c];
                for (long i = 0; i < V; ++i) oc[i] = g * (xch[i] - m) * inv + b;
            }
        Tensor<T> gamma = p.gamma, beta = p.beta, rm = p.running_mean, rv = p.running_var;
        T eps = p.eps;
        detail::record(tape, out, {&x, &p.gamma, &p.beta}, [x, gamma, beta, rm, rv, out, eps, N, C, V]() {
            const T* g = out.grad();
            for (long c = 0; c < C; ++c) {
                const T inv = T(1.0 / std::sqrt(double(rv.data()[c]) + double(eps)));
                const T m = rm.data()[c];
                double sum_g = 0, sum_gx = 0;
                for (long n = 0; n < N; ++n) {
                    const T* gch = g + (n * C + c) * V;
                    const T* xch = x.data() + (n * C + c) * V;
                    for (long i = 0; i < V; ++i) {
                        sum_g += double(gch[i]);
                        sum_gx += double(gch[i]) * double((xch[i] - m) * inv);
                    }
                }
                if (gamma.has_grad()) const_cast<Tensor<T>&>(gamma).grad()[c] += T(sum_gx);
                if (beta.has_grad()) const_cast<Tensor<T>&>(beta).grad()[c] += T(sum_g);
                if (x.has_grad()) {
                    const T coef = gamma.data()[c] * inv;
                    for (long n = 0; n < N; ++n) {
                        T* gx = const_cast<Tensor<T>&>(x).grad() + (n * C + c) * V;
                        const T* gch = g + (n * C + c) * V;
                        for (long i = 0; i < V; ++i) gx[i] += coef * gch[i];
                    }
                }
            }
        });
        return out;
    }

    const long M = N * V;  // elements per channel
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(std::size_t(C));
    for (long c = 0; c < C; ++c) {
        double mean = 0;
        for (long n = 0; n < N; ++n) {
            const T* xch = xd + (n * C + c) * V;
            for (long i = 0; i < V; ++i) mean += double(xch[i]);
        }
        mean /= double(M);
        double var = 0;
        for (long n = 0; n < N; ++n) {
            const T* xch = xd + (n * C + c) * V;
            for (long i = 0; i < V; ++i) {
                double d = double(xch[i]) - mean;
                var += d * d;
            }
        }
        var /= double(M);
        const T inv = T(1.0 / std::sqrt(var + double(p.eps)));
        (*inv_std)[c] = inv;
        const T g = p.gamma.data()[c], b = p.beta.data()[c];
        for (long n = 0; n < N; ++n) {
            const T* xch = xd + (n * C + c) * V;
            T* oc = od_ + (n * C + c) * V;
            T* xh = xhat->data() + (n * C + c) * V;
            for (long i = 0; i < V; ++i) {
                xh[i] = (xch[i] - T(mean)) * inv;
                oc[i] = g * xh[i] + b;
            }
        }
        const double unbiased = M > 1 ? var * double(M) / double(M - 1) : var;
        p.running_mean.data()[c] = T((1.0 - double(p.momentum)) * double(p.running_mean.data()[c]) +
                                     double(p.momentum) * mean);
        p.running_var.data()[c] = T((1.0 - double(p.momentum)) * double(p.running_var.data()[c]) +
                                    double(p.momentum) * unbiased);
    }
    detail::check_finite(out, "batch_norm");
    Tensor<T> gamma = p.gamma, beta = p.beta;
    detail::record(tape, out, {&x, &p.gamma, &p.beta}, [x, gamma, beta, out, xhat, inv_std, N, C, V, M]() {
        const T* g = out.grad();
        for (long c = 0; c < C; ++c) {
            double sum_g = 0, sum_gx = 0;
            for (long n = 0; n < N; ++n) {
                const T* gch = g + (n * C + c) * V;
                const T* xh = xhat->data() + (n * C + c) * V;
                for (long i = 0; i < V; ++i) {
                    sum_g += double(gch[i]);
                    sum_gx += double(gch[i]) * double(xh[i]);
                }
            }
            if (gamma.has_grad()) const_cast<Tensor<T>&>(gamma).grad()[c] += T(sum_gx);
            if (beta.has_grad()) const_cast<Tensor<T>&>(beta).grad()[c] += T(sum_g);
            if (x.has_grad()) {
                const T coef = gamma.data()[c] * (*inv_std)[c];
                const T mg = T(sum_g / double(M)), mgx = T(sum_gx / double(M));
                for (long n = 0; n < N; ++n) {
                    T* gx = const_cast<Tensor<T>&>(x).grad() + (n * C + c) * V;
                    const T* gch = g + (n * C + c) * V;
                    const T* xh = xhat->data() + (n * C + c) * V;
                    for (long i = 0; i < V; ++i) gx[i] += coef * (gch[i] - mg - xh[i] * mgx);
                }
            }
        }
    });
    return out;
}

template <class T>
Tensor<T> normalize(const Tensor<T>& x, NormParams<T>& p, bool training, GradTape<T>* tape = nullptr) {
    return p.kind == NormKind::instance ? instance_norm(x, p, tape) : batch_norm(x, p, training, tape);
}

// ---------------------------------------------------------------------------
// activations / softmax
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x, GradTape<T>* tape = nullptr) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    detail::record(tape, out, {&x}, [x, out]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t i = 0; i < x.numel(); ++i)
            if (x.data()[i] > T(0)) gx[i] += g[i];
    });
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x, GradTape<T>* tape = nullptr) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
    detail::record(tape, out, {&x}, [x, out]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t i = 0; i < x.numel(); ++i) {
            T y = out.data()[i];
            gx[i] += g[i] * y * (T(1) - y);
        }
    });
    return out;
}

enum class Activation { relu, sigmoid };

template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, GradTape<T>* tape = nullptr) {
    return kind == Activation::relu ? relu(x, tape) : sigmoid(x, tape);
}

// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, GradTape<T>* tape = nullptr) {
    if (x.rank() < 1) throw std::invalid_argument("softmax needs rank >= 1");
    const std::size_t L = x.shape.back();
    const std::size_t rows = x.numel() / L;
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * L;
        T* orow = out.data() + r * L;
        T mx = xr[0];
        for (std::size_t i = 1; i < L; ++i) mx = std::max(mx, xr[i]);
        double sum = 0;
        for (std::size_t i = 0; i < L; ++i) {
            orow[i] = std::exp(xr[i] - mx);
            sum += double(orow[i]);
        }
        for (std::size_t i = 0; i < L; ++i) orow[i] = T(double(orow[i]) / sum);
    }
    detail::check_finite(out, "softmax");
    detail::record(tape, out, {&x}, [x, out, rows, L]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* yr = out.data() + r * L;
            const T* gr = g + r * L;
            double dot = 0;
            for (std::size_t i = 0; i < L; ++i) dot += double(gr[i]) * double(yr[i]);
            for (std::size_t i = 0; i < L; ++i) gx[r * L + i] += yr[i] * (gr[i] - T(dot));
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear / broadcast helpers
// ---------------------------------------------------------------------------

// out[n,k] = x[n,k] + b[k]
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b, GradTape<T>* tape = nullptr) {
    if (x.rank() != 2 || b.rank() != 1 || x.shape[1] != b.shape[0])
        throw std::invalid_argument("add_rowvec: " + shape_str(x.shape) + " + " + shape_str(b.shape));
    const std::size_t N = x.shape[0], K = x.shape[1];
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) out.data()[n * K + k] = x.data()[n * K + k] + b.data()[k];
    detail::record(tape, out, {&x, &b}, [x, b, out, N, K]() {
        const T* g = out.grad();
        if (x.has_grad()) {
            T* gx = const_cast<Tensor<T>&>(x).grad();
            for (std::size_t i = 0; i < out.numel(); ++i) gx[i] += g[i];
        }
        if (b.has_grad()) {
            T* gb = const_cast<Tensor<T>&>(b).grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t k = 0; k < K; ++k) gb[k] += g[n * K + k];
        }
    });
    return out;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, GradTape<T>* tape = nullptr) {
    return add_rowvec(matmul(x, w, tape), b, tape);
}

// out[n,c,v] = x[n,c,v] * s[n,c]; s may be shaped [NxC] or [NxCx1x1x1]
template <class T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s, GradTape<T>* tape = nullptr) {
    if (x.rank() != 5) throw std::invalid_argument("channel_scale expects [NxCxDxHxW]");
    const std::size_t N = x.shape[0], C = x.shape[1];
    if (s.numel() != N * C)
        throw std::invalid_argument("channel_scale: map " + shape_str(s.shape) + " does not cover " +
                                    std::to_string(N * C) + " channels");
    const std::size_t V = x.numel() / (N * C);
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T sv = s.data()[nc];
        const T* xch = x.data() + nc * V;
        T* oc = out.data() + nc * V;
        for (std::size_t i = 0; i < V; ++i) oc[i] = xch[i] * sv;
    }
    detail::record(tape, out, {&x, &s}, [x, s, out, N, C, V]() {
        const T* g = out.grad();
        if (x.has_grad()) {
            T* gx = const_cast<Tensor<T>&>(x).grad();
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                const T sv = s.data()[nc];
                for (std::size_t i = 0; i < V; ++i) gx[nc * V + i] += g[nc * V + i] * sv;
            }
        }
        if (s.has_grad()) {
            T* gs = const_cast<Tensor<T>&>(s).grad();
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                double acc = 0;
                for (std::size_t i = 0; i < V; ++i) acc += double(g[nc * V + i]) * double(x.data()[nc * V + i]);
                gs[nc] += T(acc);
            }
        }
    });
    return out;
}

// He-normal initialized convolution; bias (when present) starts at zero.
template <class T>
Conv3dParams<T> make_conv3d(int oc, int ic, int groups, std::array<int, 3> k, std::array<int, 3> stride,
                            std::array<int, 3> pad, bool with_bias, Rng& rng) {
    if (ic % groups != 0) throw std::invalid_argument("make_conv3d: in_channels not divisible by groups");
    Conv3dParams<T> p;
    const int icg = ic / groups;
    p.weight = Tensor<T>::param({std::size_t(oc), std::size_t(icg), std::size_t(k[0]), std::size_t(k[1]),
                                 std::size_t(k[2])});
    const double fan_in = double(icg) * k[0] * k[1] * k[2];
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < p.weight.numel(); ++i) p.weight.data()[i] = T(rng.normal() * std_dev);
    if (with_bias) p.bias = Tensor<T>::param({std::size_t(oc)});
    p.stride = stride;
    p.padding = pad;
    p.groups = groups;
    return p;
}

// out[n,c,v] = x[n,c,v] * m[n,v]; m shaped [Nx1xDxHxW]
template <class T>
Tensor<T> pixel_scale(const Tensor<T>& x, const Tensor<T>& m, GradTape<T>* tape = nullptr) {
    if (x.rank() != 5 || m.rank() != 5 || m.shape[1] != 1)
        throw std::invalid_argument("pixel_scale expects x [NxCxDxHxW] and map [Nx1xDxHxW]");
    const std::size_t N = x.shape[0], C = x.shape[1];
    const std::size_t V = x.numel() / (N * C);
    if (m.numel() != N * V) throw std::invalid_argument("pixel_scale: map spatial extent mismatch");
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* xch = x.data() + (n * C + c) * V;
            const T* mv = m.data() + n * V;
            T* oc = out.data() + (n * C + c) * V;
            for (std::size_t i = 0; i < V; ++i) oc[i] = xch[i] * mv[i];
        }
    detail::record(tape, out, {&x, &m}, [x, m, out, N, C, V]() {
        const T* g = out.grad();
        if (x.has_grad()) {
            T* gx = const_cast<Tensor<T>&>(x).grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const T* mv = m.data() + n * V;
                    const std::size_t base = (n * C + c) * V;
                    for (std::size_t i = 0; i < V; ++i) gx[base + i] += g[base + i] * mv[i];
                }
        }
        if (m.has_grad()) {
            T* gm = const_cast<Tensor<T>&>(m).grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < V; ++i) {
                    double acc = 0;
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t base = (n * C + c) * V;
                        acc += double(g[base + i]) * double(x.data()[base + i]);
                    }
                    gm[n * V + i] += T(acc);
                }
        }
    });
    return out;
}

}  // namespace camf
