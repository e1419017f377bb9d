#pragma once

#include "camf/nn_ops.hpp"

namespace camf {

// Cross-modal consistent feature enhancement: FF fusion of the two stage-1
// feature maps, prototype cross-attention enhancement, and the correlation /
// alignment losses that tie the prototype banks to the fused features.

template <class T>
struct FFParams {
    Conv3dParams<T> conv;  // 3x3x3, channel preserving
    NormParams<T> bn;      // batch kind

    static FFParams make(int channels, Rng& rng) {
        FFParams p;
        p.conv = make_conv3d<T>(channels, channels, 1, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, false, rng);
        p.bn = NormParams<T>::make(NormKind::batch, channels);
        return p;
    }

    std::vector<Tensor<T>*> params() {
        auto r = conv.params();
        for (auto* t : bn.params()) r.push_back(t);
        return r;
    }
};

// F1 = relu(BN(Conv(F_m + F_p)))
template <class T>
Tensor<T> ff_fuse(const Tensor<T>& f_m, const Tensor<T>& f_p, FFParams<T>& p, bool training,
                  GradTape<T>* tape = nullptr) {
    detail::require_same_shape(f_m, f_p, "ff_fuse");
    auto fused = add(f_m, f_p, tape);
    return relu(batch_norm(conv3d(fused, p.conv, tape), p.bn, training, tape), tape);
}

// Learnable parameter representation: a bank of prototype tokens R plus the
// linear maps of the cross-attention in which R serves as keys and values.
// LPR_m holds R_m (attended by PET features), LPR_p holds R_p (attended by
// MRI features).
template <class T>
struct LprParams {
    Tensor<T> R;              // [T_r x C]
    Tensor<T> wq, wk, wv;     // [C x C]

    static LprParams make(int prototypes, int channels, Rng& rng) {
        LprParams p;
        p.R = Tensor<T>::param({std::size_t(prototypes), std::size_t(channels)});
        for (std::size_t i = 0; i < p.R.numel(); ++i) p.R.data()[i] = T(rng.normal() * 0.5);
        auto init_map = [&](Tensor<T>& w) {
            w = Tensor<T>::param({std::size_t(channels), std::size_t(channels)});
            const double std_dev = std::sqrt(1.0 / double(channels));
            for (std::size_t i = 0; i < w.numel(); ++i) w.data()[i] = T(rng.normal() * std_dev);
        };
        init_map(p.wq);
        init_map(p.wk);
        init_map(p.wv);
        return p;
    }

    std::vector<Tensor<T>*> params() { return {&R, &wq, &wk, &wv}; }
};

// Enhance one modality's stage-1 features by attending to the OTHER
// modality's prototype bank:
//   tokens = flatten(f), Q = tokens Wq, K = R Wk, V = R Wv,
//   enhanced = softmax(Q K^T / sqrt(C)) V, out = f + enhanced.
template <class T>
Tensor<T> lpr_enhance(const Tensor<T>& f, const LprParams<T>& lpr_other, GradTape<T>* tape = nullptr) {
    if (f.rank() != 5) throw std::invalid_argument("lpr_enhance expects [NxCxDxHxW]");
    if (lpr_other.R.numel() == 0 || lpr_other.R.shape[0] == 0)
        throw std::invalid_argument("lpr_enhance: empty prototype bank");
    const std::size_t N = f.shape[0], C = f.shape[1];
    if (lpr_other.R.shape[1] != C)
        throw std::invalid_argument("lpr_enhance: prototype width " + std::to_string(lpr_other.R.shape[1]) +
                                    " != feature channels " + std::to_string(C));
    const Shape vol_shape{C, f.shape[2], f.shape[3], f.shape[4]};
    const T inv_sqrt_d = T(1.0 / std::sqrt(double(C)));

    auto K = matmul(lpr_other.R, lpr_other.wk, tape);
    auto V = matmul(lpr_other.R, lpr_other.wv, tape);
    auto Kt = transpose2d(K, tape);

    std::vector<Tensor<T>> per_sample;
    per_sample.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
        auto tokens = to_tokens(select0(f, n, tape), tape);
        auto Q = matmul(tokens, lpr_other.wq, tape);
        auto attn = softmax(scale(matmul(Q, Kt, tape), inv_sqrt_d, tape), tape);
        auto mixed = matmul(attn, V, tape);
        per_sample.push_back(from_tokens(mixed, vol_shape, tape));
    }
    return add(f, stack0(per_sample, tape), tape);
}

// Attention weights of one sample, for tests: rows sum to one.
template <class T>
Tensor<T> lpr_attention_rows(const Tensor<T>& f, const LprParams<T>& lpr_other, std::size_t n) {
    auto tokens = to_tokens(select0(f, n));
    auto Q = matmul(tokens, lpr_other.wq);
    auto Kt = transpose2d(matmul(lpr_other.R, lpr_other.wk));
    return softmax(scale(matmul(Q, Kt), T(1.0 / std::sqrt(double(f.shape[1])))));
}

// Feature-level cross-correlation: per-channel Pearson correlation over all
// positions, averaged over channels. Zero-variance channels contribute 0.
// channel_axis < 0 treats the whole tensor as one channel.
template <class T>
Tensor<T> fcc(const Tensor<T>& x, const Tensor<T>& y, int channel_axis = -1, GradTape<T>* tape = nullptr) {
    detail::require_same_shape(x, y, "fcc");
    std::size_t C = 1, pre = 1, post = 1;
    if (channel_axis >= 0) {
        if (std::size_t(channel_axis) >= x.rank()) throw std::invalid_argument("fcc: channel axis out of range");
        C = x.shape[channel_axis];
        for (int i = 0; i < channel_axis; ++i) pre *= x.shape[i];
        for (std::size_t i = channel_axis + 1; i < x.rank(); ++i) post *= x.shape[i];
    } else {
        post = x.numel();
    }
    const std::size_t P = pre * post;  // positions per channel
    if (P < 1) throw std::invalid_argument("fcc: empty tensors");

    // gather per channel as (a, b) centered series; keep stats for backward
    auto stats = std::make_shared<std::vector<double>>();  // per channel: mean_x, mean_y, sab, sa, sb, r
    stats->resize(C * 6);
    double total = 0;
    for (std::size_t c = 0; c < C; ++c) {
        double mx = 0, my = 0;
        for (std::size_t a = 0; a < pre; ++a)
            for (std::size_t b = 0; b < post; ++b) {
                std::size_t idx = (a * C + c) * post + b;
                mx += double(x.data()[idx]);
                my += double(y.data()[idx]);
            }
        mx /= double(P);
        my /= double(P);
        double sab = 0, sa = 0, sb = 0;
        for (std::size_t a = 0; a < pre; ++a)
            for (std::size_t b = 0; b < post; ++b) {
                std::size_t idx = (a * C + c) * post + b;
                double dx = double(x.data()[idx]) - mx;
                double dy = double(y.data()[idx]) - my;
                sab += dx * dy;
                sa += dx * dx;
                sb += dy * dy;
            }
        double r = 0;
        if (sa > 0 && sb > 0) r = sab / (std::sqrt(sa) * std::sqrt(sb));
        if (r > 1) r = 1;
        if (r < -1) r = -1;
        double* st = stats->data() + c * 6;
        st[0] = mx;
        st[1] = my;
        st[2] = sab;
        st[3] = sa;
        st[4] = sb;
        st[5] = r;
        total += r;
    }
    total /= double(C);
    if (total > 1) total = 1;
    if (total < -1) total = -1;
    Tensor<T> out = Tensor<T>::scalar(T(total));

    detail::record(tape, out, {&x, &y}, [x, y, out, stats, C, pre, post, P]() {
        const double g = double(out.grad()[0]) / double(C);
        for (std::size_t c = 0; c < C; ++c) {
            const double* st = stats->data() + c * 6;
            const double sa = st[3], sb = st[4];
            if (sa <= 0 || sb <= 0) continue;  // constant channel: zero gradient
            const double r = st[5];
            const double inv_sqrt_ab = 1.0 / (std::sqrt(sa) * std::sqrt(sb));
            for (std::size_t a = 0; a < pre; ++a)
                for (std::size_t b = 0; b < post; ++b) {
                    std::size_t idx = (a * C + c) * post + b;
                    double dx = double(x.data()[idx]) - st[0];
                    double dy = double(y.data()[idx]) - st[1];
                    if (x.has_grad())
                        const_cast<Tensor<T>&>(x).grad()[idx] += T(g * (dy * inv_sqrt_ab - r * dx / sa));
                    if (y.has_grad())
                        const_cast<Tensor<T>&>(y).grad()[idx] += T(g * (dx * inv_sqrt_ab - r * dy / sb));
                }
        }
    });
    return out;
}

// F1 [NxCxDxHxW] -> prototype geometry [T_r x C]: batch mean, token layout,
// adaptive average down (or up) to the prototype count.
template <class T>
Tensor<T> canonicalize_to_prototypes(const Tensor<T>& f1, std::size_t prototypes, GradTape<T>* tape = nullptr) {
    if (f1.rank() != 5) throw std::invalid_argument("canonicalize_to_prototypes expects [NxCxDxHxW]");
    auto averaged = mean_axis0(f1, tape);       // [C x D x H x W]
    auto tokens = to_tokens(averaged, tape);    // [T x C]
    return adaptive_avg_tokens(tokens, prototypes, tape);
}

// l_consi = -FCC(R_m, F1c) - FCC(R_p, F1c), in [-2, 2].
template <class T>
Tensor<T> consistency_loss(const LprParams<T>& lpr_m, const LprParams<T>& lpr_p, const Tensor<T>& f1,
                           GradTape<T>* tape = nullptr) {
    if (lpr_m.R.shape != lpr_p.R.shape)
        throw std::invalid_argument("consistency_loss: prototype banks disagree in shape");
    auto f1c = canonicalize_to_prototypes(f1, lpr_m.R.shape[0], tape);
    auto corr_m = fcc(lpr_m.R, f1c, /*channel_axis=*/1, tape);
    auto corr_p = fcc(lpr_p.R, f1c, /*channel_axis=*/1, tape);
    return scale(add(corr_m, corr_p, tape), T(-1), tape);
}

// l_mse = ||f_m' - f_p'||_F^2 / (D*H*W); by default also averaged over batch
// and channel so the value is insensitive to batch size. paper_exact restores
// the spatial-only denominator.
template <class T>
Tensor<T> mse_alignment_loss(const Tensor<T>& f_m_prime, const Tensor<T>& f_p_prime, bool paper_exact = false,
                             GradTape<T>* tape = nullptr) {
    detail::require_same_shape(f_m_prime, f_p_prime, "mse_alignment_loss");
    if (f_m_prime.rank() != 5) throw std::invalid_argument("mse_alignment_loss expects [NxCxDxHxW]");
    const std::size_t spatial = f_m_prime.shape[2] * f_m_prime.shape[3] * f_m_prime.shape[4];
    const std::size_t denom = paper_exact ? spatial : f_m_prime.numel();
    auto diff = sub(f_m_prime, f_p_prime, tape);
    return scale(sum_all(mul(diff, diff, tape), tape), T(1) / T(denom), tape);
}

}  // namespace camf
