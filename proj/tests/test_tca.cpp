#include <catch2/catch.hpp>

#include "camf/tca.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace camf;
using D = Tensor<double>;

namespace {

void zero_all(TcaParams<double>& p) {
    for (auto* t : p.params())
        for (std::size_t i = 0; i < t->numel(); ++i) t->data()[i] = 0.0;
}

}  // namespace

TEST_CASE("channel attention maps live in (0,1)") {
    Rng rng(3);
    auto p = TcaParams<double>::make(8, rng);
    auto x = testutil::rand_tensor<double>({2, 8, 3, 3, 3}, rng, -2, 2);
    auto map = channel_attention(x, p);
    REQUIRE(map.shape == Shape{2, 8, 1, 1, 1});
    for (std::size_t i = 0; i < map.numel(); ++i) {
        CHECK(map.data()[i] > 0.0);
        CHECK(map.data()[i] < 1.0);
    }
}

TEST_CASE("channel attention with zero mlp is exactly one half") {
    Rng rng(5);
    auto p = TcaParams<double>::make(4, rng);
    zero_all(p);
    auto x = testutil::rand_tensor<double>({1, 4, 2, 2, 2}, rng);
    auto map = channel_attention(x, p);
    for (std::size_t i = 0; i < map.numel(); ++i) CHECK(map.data()[i] == 0.5);
}

TEST_CASE("channel attention on constant-per-channel input doubles the shared mlp") {
    Rng rng(7);
    auto p = TcaParams<double>::make(4, rng);
    auto x = D::zeros({1, 4, 2, 2, 2});
    for (int c = 0; c < 4; ++c)
        for (int v = 0; v < 8; ++v) x.data()[std::size_t(c) * 8 + v] = 0.25 * (c + 1);
    auto map = channel_attention(x, p);

    // direct evaluation: avg pool == max pool == per-channel constant, so the
    // map is sigmoid(2 * mlp(constants)); evaluate the mlp with oracle convs
    std::vector<double> pooled(4);
    for (int c = 0; c < 4; ++c) pooled[c] = 0.25 * (c + 1);
    oracle::ConvSpec s1{1, 4, 1, 1, 1, 1, 1, 1, 1};
    int OD, OH, OW;
    auto h = oracle::conv3d(pooled, testutil::to_doubles(p.ca_fc1.weight), testutil::to_doubles(p.ca_fc1.bias), s1,
                            OD, OH, OW);
    for (auto& v : h) v = std::max(v, 0.0);
    oracle::ConvSpec s2{1, 1, 1, 1, 1, 4, 1, 1, 1};
    auto out = oracle::conv3d(h, testutil::to_doubles(p.ca_fc2.weight), testutil::to_doubles(p.ca_fc2.bias), s2, OD,
                              OH, OW);
    for (int c = 0; c < 4; ++c) {
        double expect = 1.0 / (1.0 + std::exp(-2.0 * out[c]));
        CHECK(map.data()[c] == Approx(expect).margin(1e-12));
    }
}

TEST_CASE("spatial attention sums branches and preserves shape") {
    Rng rng(11);
    auto p = TcaParams<double>::make(2, rng);
    auto x = testutil::rand_tensor<double>({1, 2, 4, 4, 4}, rng);

    SECTION("identity branches with identity fuse scale by branch count") {
        zero_all(p);
        for (auto& b : p.sa_branches)
            for (auto& strip : b.strips) {
                // centre tap = 1 per channel
                std::size_t k = strip.weight.numel() / 2;  // two channels, odd kernel
                std::size_t klen = strip.weight.numel() / 2;
                for (int c = 0; c < 2; ++c) strip.weight.data()[std::size_t(c) * klen + klen / 2] = 1.0;
                (void)k;
            }
        // identity fuse: diag(1)
        p.sa_fuse.weight.data()[0] = 1.0;  // [oc=0, ic=0]
        p.sa_fuse.weight.data()[3] = 1.0;  // [oc=1, ic=1]
        auto y = spatial_attention(x, p);
        REQUIRE(y.shape == x.shape);
        const double branches = double(p.sa_branches.size());
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == Approx(branches * x.data()[i]).margin(1e-9));
    }

    SECTION("zero branch weights give a zero map") {
        zero_all(p);
        auto y = spatial_attention(x, p);
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
    }
}

TEST_CASE("spatial attention one-hot smear matches the naive strip oracle") {
    Rng rng(13);
    auto p = TcaParams<double>::make(1, rng);
    // keep only the 5-cube branch: zero every single-axis branch
    for (std::size_t b = 1; b < p.sa_branches.size(); ++b)
        for (auto& strip : p.sa_branches[b].strips)
            for (std::size_t i = 0; i < strip.weight.numel(); ++i) strip.weight.data()[i] = 0.0;
    for (std::size_t i = 0; i < p.sa_fuse.weight.numel(); ++i) p.sa_fuse.weight.data()[i] = 0.0;
    p.sa_fuse.weight.data()[0] = 1.0;
    p.sa_fuse.bias.data()[0] = 0.0;

    auto x = D::zeros({1, 1, 7, 7, 7});
    x.data()[(3 * 7 + 3) * 7 + 3] = 1.0;
    auto y = spatial_attention(x, p);

    // oracle: three sequential one-axis convolutions
    auto cur = testutil::to_doubles(x);
    int OD, OH, OW;
    for (int axis = 0; axis < 3; ++axis) {
        oracle::ConvSpec s;
        s.N = 1;
        s.C = 1;
        s.D = s.H = s.W = 7;
        s.OC = 1;
        s.KD = axis == 0 ? 5 : 1;
        s.KH = axis == 1 ? 5 : 1;
        s.KW = axis == 2 ? 5 : 1;
        s.pd = axis == 0 ? 2 : 0;
        s.ph = axis == 1 ? 2 : 0;
        s.pw = axis == 2 ? 2 : 0;
        cur = oracle::conv3d(cur, testutil::to_doubles(p.sa_branches[0].strips[axis].weight), {}, s, OD, OH, OW);
    }
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == Approx(cur[i]).margin(1e-12));
}

TEST_CASE("pixel attention gates the input") {
    Rng rng(17);
    auto p = TcaParams<double>::make(4, rng);
    auto x = testutil::rand_tensor<double>({2, 4, 3, 3, 3}, rng, -2, 2);

    SECTION("zero convs halve the input") {
        zero_all(p);
        auto y = pixel_attention(x, p);
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == Approx(0.5 * x.data()[i]).margin(1e-12));
    }

    SECTION("sigmoid map contracts magnitudes") {
        auto y = pixel_attention(x, p);
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.data()[i]) <= std::abs(x.data()[i]));
    }

    SECTION("matches direct composition oracle") {
        auto y = pixel_attention(x, p);
        oracle::ConvSpec s1{2, 4, 3, 3, 3, 1, 1, 1, 1};
        int OD, OH, OW;
        auto h = oracle::conv3d(testutil::to_doubles(x), testutil::to_doubles(p.pa_conv1.weight),
                                testutil::to_doubles(p.pa_conv1.bias), s1, OD, OH, OW);
        for (auto& v : h) v = std::max(v, 0.0);
        oracle::ConvSpec s2{2, 1, 3, 3, 3, 1, 3, 3, 3, 1, 1, 1, 1, 1, 1};
        auto m = oracle::conv3d(h, testutil::to_doubles(p.pa_conv2.weight), testutil::to_doubles(p.pa_conv2.bias),
                                s2, OD, OH, OW);
        for (auto& v : m) v = 1.0 / (1.0 + std::exp(-v));
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 4; ++c)
                for (int v = 0; v < 27; ++v) {
                    std::size_t xi = (std::size_t(n) * 4 + c) * 27 + v;
                    CHECK(y.data()[xi] == Approx(x.data()[xi] * m[std::size_t(n) * 27 + v]).margin(1e-12));
                }
    }
}

TEST_CASE("tca with all weights zero is the identity, bit for bit") {
    Rng rng(19);
    auto p = TcaParams<double>::make(4, rng);
    zero_all(p);
    auto x = testutil::rand_tensor<double>({2, 4, 3, 3, 3}, rng);
    auto y = tca_forward(x, p);
    REQUIRE(y.shape == x.shape);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("tca preserves shape at working size") {
    Rng rng(23);
    auto p = TcaParams<double>::make(16, rng);
    auto x = testutil::rand_tensor<double>({2, 16, 8, 8, 8}, rng);
    auto y = tca_forward(x, p);
    CHECK(y.shape == x.shape);
    auto ca = channel_attention(x, p);
    for (std::size_t i = 0; i < ca.numel(); ++i) {
        CHECK(ca.data()[i] > 0.0);
        CHECK(ca.data()[i] < 1.0);
    }
}

TEST_CASE("full tca gradcheck") {
    Rng rng(29);
    auto p = TcaParams<double>::make(4, rng);
    auto x = testutil::rand_tensor<double>({1, 4, 4, 4, 4}, rng);
    // check input plus a representative parameter from each attention leg
    auto f = [&p](GradTape<double>* t, std::vector<D>& ins) {
        TcaParams<double> q = p;
        q.ca_fc1.weight = ins[1];
        q.sa_fuse.weight = ins[2];
        q.pa_conv2.weight = ins[3];
        q.sa_branches[0].strips[1].weight = ins[4];
        auto y = tca_forward(ins[0], q, t);
        return sum_all(mul(y, y, t), t);
    };
    double err = gradcheck<double>(
        f, {x, p.ca_fc1.weight, p.sa_fuse.weight, p.pa_conv2.weight, p.sa_branches[0].strips[1].weight}, 1e-6);
    CHECK(err < 1e-5);
}
