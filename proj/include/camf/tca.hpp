#pragma once

#include <vector>

#include "camf/nn_ops.hpp"

namespace camf {

// Triple collaborative attention: channel, spatial and pixel attention
// composed sequentially inside one residual connection.
//
// The spatial bank decomposes the 2-d kernel list (5x5, 1x7, 7x1, ...) into
// 3-d axis strips: the 5x5 entry becomes one branch of three sequential
// strips (5,1,1)(1,5,1)(1,1,5); each k in {7, 11, 21} contributes three
// parallel single-axis branches. Branch outputs are summed and fused by a
// 1x1x1 convolution.
template <class T>
struct TcaParams {
    int channels = 0;
    int reduction = 4;

    // CA: shared two-layer 1x1x1 MLP over pooled descriptors
    Conv3dParams<T> ca_fc1, ca_fc2;

    struct SaBranch {
        std::vector<Conv3dParams<T>> strips;  // applied in sequence
    };
    std::vector<SaBranch> sa_branches;
    Conv3dParams<T> sa_fuse;

    // PA: 1x1x1 squeeze then 3x3x3 to a single-channel map
    Conv3dParams<T> pa_conv1, pa_conv2;

    static TcaParams make(int channels, Rng& rng, int reduction = 4) {
        TcaParams p;
        p.channels = channels;
        p.reduction = reduction;
        const int squeezed = std::max(1, channels / reduction);
        p.ca_fc1 = make_conv3d<T>(squeezed, channels, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, rng);
        p.ca_fc2 = make_conv3d<T>(channels, squeezed, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, rng);

        auto he_strip = [&](int axis, int k) {
            auto sp = strip_conv_params<T>(channels, axis, k);
            const double std_dev = std::sqrt(2.0 / double(k));
            for (std::size_t i = 0; i < sp.weight.numel(); ++i) sp.weight.data()[i] = T(rng.normal() * std_dev);
            return sp;
        };
        SaBranch cube;
        for (int axis = 0; axis < 3; ++axis) cube.strips.push_back(he_strip(axis, 5));
        p.sa_branches.push_back(std::move(cube));
        for (int k : {7, 11, 21})
            for (int axis = 0; axis < 3; ++axis) {
                SaBranch b;
                b.strips.push_back(he_strip(axis, k));
                p.sa_branches.push_back(std::move(b));
            }
        p.sa_fuse = make_conv3d<T>(channels, channels, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, rng);

        p.pa_conv1 = make_conv3d<T>(squeezed, channels, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, rng);
        p.pa_conv2 = make_conv3d<T>(1, squeezed, 1, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, true, rng);
        return p;
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> r;
        for (auto* c : {&ca_fc1, &ca_fc2, &sa_fuse, &pa_conv1, &pa_conv2})
            for (auto* t : c->params()) r.push_back(t);
        for (auto& b : sa_branches)
            for (auto& s : b.strips)
                for (auto* t : s.params()) r.push_back(t);
        return r;
    }
};

// sigmoid(mlp(avgpool(x)) + mlp(maxpool(x))) with the MLP shared between the
// two pooled descriptors; values in (0, 1), one per (sample, channel).
template <class T>
Tensor<T> channel_attention(const Tensor<T>& x, const TcaParams<T>& p, GradTape<T>* tape = nullptr) {
    if (int(x.shape[1]) != p.channels)
        throw std::invalid_argument("channel_attention: input channels " + std::to_string(x.shape[1]) +
                                    " != params " + std::to_string(p.channels));
    auto mlp = [&](const Tensor<T>& pooled) {
        return conv3d(relu(conv3d(pooled, p.ca_fc1, tape), tape), p.ca_fc2, tape);
    };
    auto avg_path = mlp(global_pool(x, PoolKind::avg, tape));
    auto max_path = mlp(global_pool(x, PoolKind::max, tape));
    return sigmoid(add(avg_path, max_path, tape), tape);
}

// fuse1x1(sum of strip-branch outputs); spatial shape preserved.
template <class T>
Tensor<T> spatial_attention(const Tensor<T>& x, const TcaParams<T>& p, GradTape<T>* tape = nullptr) {
    Tensor<T> acc;
    for (const auto& branch : p.sa_branches) {
        Tensor<T> y = x;
        for (const auto& strip : branch.strips) y = depthwise_strip_conv3d(y, strip, tape);
        acc = acc.store ? add(acc, y, tape) : y;
    }
    return conv3d(acc, p.sa_fuse, tape);
}

// x gated by a sigmoid single-channel map from two stacked convolutions.
template <class T>
Tensor<T> pixel_attention(const Tensor<T>& x, const TcaParams<T>& p, GradTape<T>* tape = nullptr) {
    auto map = sigmoid(conv3d(relu(conv3d(x, p.pa_conv1, tape), tape), p.pa_conv2, tape), tape);
    return pixel_scale(x, map, tape);
}

// y = x + PA(SA(x * CA(x)))
template <class T>
Tensor<T> tca_forward(const Tensor<T>& x, const TcaParams<T>& p, GradTape<T>* tape = nullptr) {
    auto ca_map = channel_attention(x, p, tape);
    auto gated = channel_scale(x, ca_map, tape);
    auto refined = spatial_attention(gated, p, tape);
    auto pixel = pixel_attention(refined, p, tape);
    return add(x, pixel, tape);
}

}  // namespace camf
