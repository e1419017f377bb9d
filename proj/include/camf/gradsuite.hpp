#pragma once

#include <functional>
#include <iomanip>
#include <ostream>

#include "camf/model.hpp"

namespace camf {

// 64-bit finite-difference verification of every differentiable operation,
// one case per operator family. Each case builds random inputs from the seed
// at the op's minimal legal shape and returns the max relative error between
// analytic and central-difference gradients.

struct GradCase {
    std::string name;
    std::function<double(std::uint64_t)> run;
};

namespace gradsuite_detail {

using D = Tensor<double>;

inline D rand_t(Shape s, Rng& rng, double lo = -1, double hi = 1) {
    auto t = D::zeros(std::move(s));
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

// distinct well-separated values; keeps argmax selections stable under the
// finite-difference probes
inline D rand_separated(Shape s, Rng& rng) {
    auto t = D::zeros(std::move(s));
    std::vector<std::size_t> order(t.numel());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, rng);
    for (std::size_t i = 0; i < t.numel(); ++i)
        t.data()[order[i]] = 0.05 * double(i) + rng.uniform(-0.01, 0.01);
    return t;
}

inline D square_sum(GradTape<double>* t, const D& y) { return sum_all(mul(y, y, t), t); }

}  // namespace gradsuite_detail

inline std::vector<GradCase> gradient_suite() {
    using namespace gradsuite_detail;
    std::vector<GradCase> cases;
    auto push = [&](std::string name, std::function<double(std::uint64_t)> fn) {
        cases.push_back({std::move(name), std::move(fn)});
    };

    push("matmul", [](std::uint64_t seed) {
        Rng rng(seed);
        auto a = rand_t({3, 4}, rng), b = rand_t({4, 2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) { return square_sum(t, matmul(in[0], in[1], t)); }, {a, b},
            1e-6);
    });

    push("conv3d_stride_pad", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({1, 2, 4, 4, 4}, rng);
        auto w = rand_t({2, 2, 3, 3, 3}, rng);
        auto b = rand_t({2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                Conv3dParams<double> p;
                p.weight = in[1];
                p.bias = in[2];
                p.stride = {2, 2, 2};
                p.padding = {1, 1, 1};
                return square_sum(t, conv3d(in[0], p, t));
            },
            {x, w, b}, 1e-6);
    });

    push("conv3d_3cube_fastpath", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({1, 2, 3, 3, 4}, rng);
        auto w = rand_t({2, 2, 3, 3, 3}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                Conv3dParams<double> p;
                p.weight = in[1];
                p.padding = {1, 1, 1};
                return square_sum(t, conv3d(in[0], p, t));
            },
            {x, w}, 1e-6);
    });

    push("depthwise_strip", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({1, 2, 3, 3, 5}, rng);
        auto w = rand_t({2, 1, 1, 1, 5}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                Conv3dParams<double> p;
                p.weight = in[1];
                p.groups = 2;
                p.padding = {0, 0, 2};
                return square_sum(t, depthwise_strip_conv3d(in[0], p, t));
            },
            {x, w}, 1e-6);
    });

    push("maxpool_backward", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_separated({1, 2, 4, 4, 4}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                return square_sum(t, pool3d(in[0], PoolKind::max, 3, 2, 1, t));
            },
            {x}, 1e-6);
    });

    push("avgpool_backward", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({1, 2, 4, 4, 4}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                return square_sum(t, pool3d(in[0], PoolKind::avg, 2, 2, 0, t));
            },
            {x}, 1e-6);
    });

    push("global_pool", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_separated({2, 2, 2, 2, 2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                auto a = global_pool(in[0], PoolKind::avg, t);
                auto m = global_pool(in[0], PoolKind::max, t);
                return square_sum(t, add(a, m, t));
            },
            {x}, 1e-6);
    });

    push("instance_norm", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({2, 2, 2, 2, 2}, rng);
        auto g = rand_t({2}, rng, 0.5, 1.5);
        auto b = rand_t({2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                auto p = NormParams<double>::make(NormKind::instance, 2);
                p.gamma = in[1];
                p.beta = in[2];
                return square_sum(t, instance_norm(in[0], p, t));
            },
            {x, g, b}, 1e-6);
    });

    push("batch_norm", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({2, 2, 2, 2, 2}, rng);
        auto g = rand_t({2}, rng, 0.5, 1.5);
        auto b = rand_t({2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                auto p = NormParams<double>::make(NormKind::batch, 2);
                p.gamma = in[1];
                p.beta = in[2];
                return square_sum(t, batch_norm(in[0], p, /*training=*/true, t));
            },
            {x, g, b}, 1e-6);
    });

    push("relu", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({24}, rng);
        for (std::size_t i = 0; i < x.numel(); ++i)
            if (std::abs(x.data()[i]) < 0.05) x.data()[i] += x.data()[i] >= 0 ? 0.05 : -0.05;
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) { return square_sum(t, relu(in[0], t)); }, {x}, 1e-6);
    });

    push("sigmoid", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({24}, rng, -3, 3);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) { return square_sum(t, sigmoid(in[0], t)); }, {x}, 1e-6);
    });

    push("softmax", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({3, 5}, rng, -2, 2);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) { return square_sum(t, softmax(in[0], t)); }, {x}, 1e-6);
    });

    push("linear", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({3, 4}, rng), w = rand_t({4, 2}, rng), b = rand_t({2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) { return square_sum(t, linear(in[0], in[1], in[2], t)); },
            {x, w, b}, 1e-6);
    });

    push("lpr_cross_attention", [](std::uint64_t seed) {
        Rng rng(seed);
        auto f = rand_t({1, 2, 1, 2, 2}, rng);
        auto R = rand_t({3, 2}, rng);
        auto wq = rand_t({2, 2}, rng), wk = rand_t({2, 2}, rng), wv = rand_t({2, 2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                LprParams<double> l;
                l.R = in[1];
                l.wq = in[2];
                l.wk = in[3];
                l.wv = in[4];
                return square_sum(t, lpr_enhance(in[0], l, t));
            },
            {f, R, wq, wk, wv}, 1e-6);
    });

    push("fcc", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = rand_t({6, 2}, rng), y = rand_t({6, 2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) { return fcc(in[0], in[1], 1, t); }, {x, y}, 1e-6);
    });

    push("consistency_loss", [](std::uint64_t seed) {
        Rng rng(seed);
        auto rm = rand_t({3, 2}, rng), rp = rand_t({3, 2}, rng);
        auto f1 = rand_t({1, 2, 1, 2, 2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) {
                LprParams<double> m, p;
                m.R = in[0];
                p.R = in[1];
                return consistency_loss(m, p, in[2], t);
            },
            {rm, rp, f1}, 1e-6);
    });

    push("mse_alignment_loss", [](std::uint64_t seed) {
        Rng rng(seed);
        auto a = rand_t({1, 2, 2, 2, 2}, rng), b = rand_t({1, 2, 2, 2, 2}, rng);
        return gradcheck<double>(
            [](GradTape<double>* t, std::vector<D>& in) { return mse_alignment_loss(in[0], in[1], false, t); },
            {a, b}, 1e-6);
    });

    push("cross_entropy_logits", [](std::uint64_t seed) {
        Rng rng(seed);
        auto logits = rand_t({3, 2}, rng, -1.5, 1.5);
        std::vector<int> labels{int(rng.below(2)), int(rng.below(2)), int(rng.below(2))};
        return gradcheck<double>(
            [labels](GradTape<double>* t, std::vector<D>& in) { return cross_entropy_logits(in[0], labels, t); },
            {logits}, 1e-6);
    });

    push("total_loss_eq10", [](std::uint64_t seed) {
        Rng rng(seed);
        auto rm = rand_t({3, 2}, rng), rp = rand_t({3, 2}, rng);
        auto f1 = rand_t({1, 2, 1, 2, 2}, rng);
        auto em = rand_t({1, 2, 1, 2, 2}, rng), ep = rand_t({1, 2, 1, 2, 2}, rng);
        auto logits = rand_t({2, 2}, rng, -1, 1);
        std::vector<int> labels{int(rng.below(2)), int(rng.below(2))};
        return gradcheck<double>(
            [labels](GradTape<double>* t, std::vector<D>& in) {
                LprParams<double> m, p;
                m.R = in[0];
                p.R = in[1];
                auto consi = consistency_loss(m, p, in[2], t);
                auto mse = mse_alignment_loss(in[3], in[4], false, t);
                auto ce = cross_entropy_logits(in[5], labels, t);
                return total_loss(consi, mse, ce, 0.5, t);
            },
            {rm, rp, f1, em, ep, logits}, 1e-6);
    });

    push("tca_full", [](std::uint64_t seed) {
        Rng rng(seed);
        auto p = TcaParams<double>::make(4, rng);
        auto x = rand_t({1, 4, 4, 4, 4}, rng);
        std::vector<D> inputs{x, p.ca_fc1.weight, p.ca_fc2.weight, p.sa_fuse.weight, p.pa_conv1.weight,
                              p.pa_conv2.weight, p.sa_branches[0].strips[0].weight, p.sa_branches[1].strips[0].weight};
        return gradcheck<double>(
            [&p](GradTape<double>* t, std::vector<D>& in) {
                TcaParams<double> q = p;
                q.ca_fc1.weight = in[1];
                q.ca_fc2.weight = in[2];
                q.sa_fuse.weight = in[3];
                q.pa_conv1.weight = in[4];
                q.pa_conv2.weight = in[5];
                q.sa_branches[0].strips[0].weight = in[6];
                q.sa_branches[1].strips[0].weight = in[7];
                return square_sum(t, tca_forward(in[0], q, t));
            },
            inputs, 1e-6);
    });

    push("res_block_full", [](std::uint64_t seed) {
        Rng rng(seed);
        auto b = ResBasicBlockParams<double>::make(2, 4, 2, rng);
        auto x = rand_t({1, 2, 4, 4, 4}, rng);
        std::vector<D> inputs{x,
                              b.conv1.weight,
                              b.conv2.weight,
                              b.ds_conv.weight,
                              b.norm1.gamma,
                              b.norm1.beta,
                              b.norm2.gamma,
                              b.norm2.beta};
        return gradcheck<double>(
            [&b](GradTape<double>* t, std::vector<D>& in) {
                ResBasicBlockParams<double> q = b;
                q.conv1.weight = in[1];
                q.conv2.weight = in[2];
                q.ds_conv.weight = in[3];
                q.norm1.gamma = in[4];
                q.norm1.beta = in[5];
                q.norm2.gamma = in[6];
                q.norm2.beta = in[7];
                return square_sum(t, res_block_forward(in[0], q, /*training=*/true, t));
            },
            inputs, 1e-6);
    });

    return cases;
}

// Runs every case over the given seeds, printing one line per op. Returns
// true when every max relative error stays under tol.
inline bool run_gradient_suite(int seeds, double tol, std::ostream& os) {
    bool ok = true;
    for (const auto& c : gradient_suite()) {
        double worst = 0;
        for (int s = 0; s < seeds; ++s) worst = std::max(worst, c.run(std::uint64_t(s) + 1));
        const bool pass = worst < tol;
        ok = ok && pass;
        os << (pass ? "[pass] " : "[FAIL] ") << std::left << std::setw(24) << c.name << " max rel err "
           << std::scientific << std::setprecision(3) << worst << std::defaultfloat << " (" << seeds << " seeds)\n";
    }
    return ok;
}

}  // namespace camf
