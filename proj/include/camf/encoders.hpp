#pragma once

#include <array>

#include "camf/tca.hpp"

namespace camf {

// Primary feature extraction: 7x7x7 stride-2 convolution, instance norm,
// relu, 3x3x3 stride-2 max pool. Spatial extent shrinks by 4x, 1 -> 16
// channels.
template <class T>
struct PfeParams {
    Conv3dParams<T> conv;
    NormParams<T> norm;
    int pool_k = 3, pool_s = 2, pool_p = 1;

    static PfeParams make(Rng& rng, int in_ch = 1, int out_ch = 16) {
        PfeParams p;
        p.conv = make_conv3d<T>(out_ch, in_ch, 1, {7, 7, 7}, {2, 2, 2}, {3, 3, 3}, false, rng);
        p.norm = NormParams<T>::make(NormKind::instance, out_ch);
        return p;
    }

    std::vector<Tensor<T>*> params() {
        auto r = conv.params();
        for (auto* t : norm.params()) r.push_back(t);
        return r;
    }
};

template <class T>
Tensor<T> pfe_forward(const Tensor<T>& x, const PfeParams<T>& p, GradTape<T>* tape = nullptr) {
    auto y = relu(instance_norm(conv3d(x, p.conv, tape), p.norm, tape), tape);
    return pool3d(y, PoolKind::max, p.pool_k, p.pool_s, p.pool_p, tape);
}

// 3D ResNet basic block: conv-norm-relu-conv-norm plus shortcut, relu after
// the join. Downsample shortcut (1x1x1 conv + norm) when stride or channel
// count changes. Norms are batch kind: the deepest blocks run on 1-voxel
// grids at desk scale, where per-sample spatial statistics degenerate to a
// constant.
template <class T>
struct ResBasicBlockParams {
    Conv3dParams<T> conv1, conv2;
    NormParams<T> norm1, norm2;
    bool has_downsample = false;
    Conv3dParams<T> ds_conv;
    NormParams<T> ds_norm;

    static ResBasicBlockParams make(int in_ch, int out_ch, int stride, Rng& rng) {
        ResBasicBlockParams b;
        b.conv1 = make_conv3d<T>(out_ch, in_ch, 1, {3, 3, 3}, {stride, stride, stride}, {1, 1, 1}, false, rng);
        b.norm1 = NormParams<T>::make(NormKind::batch, out_ch);
        b.conv2 = make_conv3d<T>(out_ch, out_ch, 1, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, false, rng);
        b.norm2 = NormParams<T>::make(NormKind::batch, out_ch);
        b.has_downsample = stride != 1 || in_ch != out_ch;
        if (b.has_downsample) {
            b.ds_conv = make_conv3d<T>(out_ch, in_ch, 1, {1, 1, 1}, {stride, stride, stride}, {0, 0, 0}, false, rng);
            b.ds_norm = NormParams<T>::make(NormKind::batch, out_ch);
        }
        return b;
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> r;
        for (auto* t : conv1.params()) r.push_back(t);
        for (auto* t : norm1.params()) r.push_back(t);
        for (auto* t : conv2.params()) r.push_back(t);
        for (auto* t : norm2.params()) r.push_back(t);
        if (has_downsample) {
            for (auto* t : ds_conv.params()) r.push_back(t);
            for (auto* t : ds_norm.params()) r.push_back(t);
        }
        return r;
    }
};

template <class T>
Tensor<T> res_block_forward(const Tensor<T>& x, ResBasicBlockParams<T>& p, bool training = false,
                            GradTape<T>* tape = nullptr) {
    auto h = relu(normalize(conv3d(x, p.conv1, tape), p.norm1, training, tape), tape);
    auto main = normalize(conv3d(h, p.conv2, tape), p.norm2, training, tape);
    auto shortcut = p.has_downsample ? normalize(conv3d(x, p.ds_conv, tape), p.ds_norm, training, tape) : x;
    return relu(add(main, shortcut, tape), tape);
}

// Advanced feature extraction: four basic blocks, 16 -> 128 channels,
// strides 1,2,2,2 (spatial / 8).
template <class T>
struct AfeParams {
    std::array<ResBasicBlockParams<T>, 4> blocks;

    static AfeParams make(Rng& rng) {
        AfeParams a;
        a.blocks[0] = ResBasicBlockParams<T>::make(16, 32, 1, rng);
        a.blocks[1] = ResBasicBlockParams<T>::make(32, 64, 2, rng);
        a.blocks[2] = ResBasicBlockParams<T>::make(64, 128, 2, rng);
        a.blocks[3] = ResBasicBlockParams<T>::make(128, 128, 2, rng);
        return a;
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> r;
        for (auto& b : blocks)
            for (auto* t : b.params()) r.push_back(t);
        return r;
    }
};

template <class T>
Tensor<T> afe_forward(const Tensor<T>& x, AfeParams<T>& p, bool training = false, GradTape<T>* tape = nullptr) {
    Tensor<T> y = x;
    for (auto& b : p.blocks) y = res_block_forward(y, b, training, tape);
    return y;
}

// Full modality-specific extractor: PFE -> AFE -> TCA -> global average
// pool, flattened to one 128-vector per sample.
template <class T>
struct EncoderParams {
    PfeParams<T> pfe;
    AfeParams<T> afe;
    TcaParams<T> tca;

    static EncoderParams make(Rng& rng) {
        EncoderParams e;
        e.pfe = PfeParams<T>::make(rng);
        e.afe = AfeParams<T>::make(rng);
        e.tca = TcaParams<T>::make(128, rng);
        return e;
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> r;
        for (auto* t : pfe.params()) r.push_back(t);
        for (auto* t : afe.params()) r.push_back(t);
        for (auto* t : tca.params()) r.push_back(t);
        return r;
    }

    void set_requires_grad(bool on) {
        for (auto* t : params()) t->set_requires_grad(on);
    }
};

template <class T>
Tensor<T> fe_forward(const Tensor<T>& x, EncoderParams<T>& p, GradTape<T>* tape = nullptr, bool use_tca = true,
                     bool training = false) {
    auto deep = afe_forward(pfe_forward(x, p.pfe, tape), p.afe, training, tape);
    if (use_tca) deep = tca_forward(deep, p.tca, tape);
    auto pooled = global_pool(deep, PoolKind::avg, tape);
    return reshape(pooled, {pooled.shape[0], pooled.shape[1]}, tape);
}

// Stage-1 shared pass: the same parameter object serves both modalities, so
// weight sharing is identity of parameters rather than a copy.
template <class T>
Tensor<T> shared_forward_stage1(const Tensor<T>& x, const PfeParams<T>& shared_pfe, GradTape<T>* tape = nullptr) {
    return pfe_forward(x, shared_pfe, tape);
}

}  // namespace camf
