#include <catch2/catch.hpp>

#include "camf/ccfe.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace camf;
using D = Tensor<double>;

TEST_CASE("ff_fuse is symmetric and reduces to the single modality on zero input") {
    Rng rng(3);
    auto p = FFParams<double>::make(4, rng);
    auto a = testutil::rand_tensor<double>({2, 4, 3, 3, 3}, rng);
    auto b = testutil::rand_tensor<double>({2, 4, 3, 3, 3}, rng);

    auto ab = ff_fuse(a, b, p, /*training=*/true);
    auto ba = ff_fuse(b, a, p, /*training=*/true);
    REQUIRE(ab.shape == a.shape);
    for (std::size_t i = 0; i < ab.numel(); ++i) CHECK(ab.data()[i] == ba.data()[i]);

    auto zero = D::zeros(a.shape);
    auto with_zero = ff_fuse(a, zero, p, true);
    auto fused = add(a, zero);
    auto direct = relu(batch_norm(conv3d(fused, p.conv), p.bn, true));
    for (std::size_t i = 0; i < with_zero.numel(); ++i) CHECK(with_zero.data()[i] == direct.data()[i]);
}

TEST_CASE("ff_fuse matches a composed oracle at eval") {
    Rng rng(5);
    auto p = FFParams<double>::make(2, rng);
    for (std::size_t c = 0; c < 2; ++c) {
        p.bn.running_mean.data()[c] = 0.1 * double(c + 1);
        p.bn.running_var.data()[c] = 0.5 + 0.25 * double(c);
    }
    auto a = testutil::rand_tensor<double>({1, 2, 2, 2, 2}, rng);
    auto b = testutil::rand_tensor<double>({1, 2, 2, 2, 2}, rng);
    auto y = ff_fuse(a, b, p, /*training=*/false);

    std::vector<double> sum(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) sum[i] = a.data()[i] + b.data()[i];
    oracle::ConvSpec s{1, 2, 2, 2, 2, 2, 3, 3, 3, 1, 1, 1, 1, 1, 1};
    int OD, OH, OW;
    auto conv = oracle::conv3d(sum, testutil::to_doubles(p.conv.weight), {}, s, OD, OH, OW);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t v = 0; v < 8; ++v) {
            double norm = (conv[c * 8 + v] - p.bn.running_mean.data()[c]) /
                          std::sqrt(p.bn.running_var.data()[c] + 1e-5);
            double expect = std::max(norm * p.bn.gamma.data()[c] + p.bn.beta.data()[c], 0.0);
            CHECK(y.data()[c * 8 + v] == Approx(expect).margin(1e-10));
        }
}

TEST_CASE("lpr attention rows sum to one") {
    Rng rng(7);
    auto lpr = LprParams<double>::make(6, 4, rng);
    auto f = testutil::rand_tensor<double>({2, 4, 2, 2, 2}, rng);
    for (std::size_t n = 0; n < 2; ++n) {
        auto attn = lpr_attention_rows(f, lpr, n);
        REQUIRE(attn.shape == Shape{8, 6});
        for (std::size_t t = 0; t < 8; ++t) {
            double row = 0;
            for (std::size_t r = 0; r < 6; ++r) row += attn.data()[t * 6 + r];
            CHECK(row == Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("single prototype broadcasts its value vector to every token") {
    Rng rng(9);
    auto lpr = LprParams<double>::make(1, 3, rng);
    auto f = testutil::rand_tensor<double>({1, 3, 1, 2, 2}, rng);
    auto out = lpr_enhance(f, lpr);
    REQUIRE(out.shape == f.shape);
    // V = R Wv is a single row; enhanced - f must equal that row at every voxel
    auto v = matmul(lpr.R, lpr.wv);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t t = 0; t < 4; ++t)
            CHECK(out.data()[c * 4 + t] - f.data()[c * 4 + t] == Approx(v.data()[c]).margin(1e-12));
}

TEST_CASE("lpr enhancement matches a hand-rolled scalar oracle") {
    Rng rng(11);
    const std::size_t C = 2, Tr = 2;
    auto lpr = LprParams<double>::make(Tr, C, rng);
    auto f = testutil::rand_tensor<double>({1, C, 1, 1, 2}, rng);  // two tokens

    auto out = lpr_enhance(f, lpr);

    // tokens[t][c] = f[c][t]
    double tok[2][2] = {{f.data()[0], f.data()[2]}, {f.data()[1], f.data()[3]}};
    const double* wq = lpr.wq.data();
    const double* wk = lpr.wk.data();
    const double* wv = lpr.wv.data();
    const double* R = lpr.R.data();
    for (std::size_t t = 0; t < 2; ++t) {
        double q[2], score[2], k[2][2], v[2][2];
        for (std::size_t c = 0; c < C; ++c) {
            q[c] = tok[t][0] * wq[0 * C + c] + tok[t][1] * wq[1 * C + c];
        }
        for (std::size_t r = 0; r < Tr; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                k[r][c] = R[r * C + 0] * wk[0 * C + c] + R[r * C + 1] * wk[1 * C + c];
                v[r][c] = R[r * C + 0] * wv[0 * C + c] + R[r * C + 1] * wv[1 * C + c];
            }
        for (std::size_t r = 0; r < Tr; ++r) score[r] = (q[0] * k[r][0] + q[1] * k[r][1]) / std::sqrt(double(C));
        double mx = std::max(score[0], score[1]);
        double e0 = std::exp(score[0] - mx), e1 = std::exp(score[1] - mx);
        double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        for (std::size_t c = 0; c < C; ++c) {
            double mixed = a0 * v[0][c] + a1 * v[1][c];
            CHECK(out.data()[c * 2 + t] == Approx(tok[t][c] + mixed).margin(1e-12));
        }
    }
}

TEST_CASE("lpr rejects an empty prototype bank and zero Wv nullifies the attention path") {
    Rng rng(13);
    auto f = testutil::rand_tensor<double>({1, 3, 1, 1, 2}, rng);
    LprParams<double> empty;
    empty.R = D::zeros({0, 3});
    empty.wq = D::zeros({3, 3});
    empty.wk = D::zeros({3, 3});
    empty.wv = D::zeros({3, 3});
    CHECK_THROWS_AS(lpr_enhance(f, empty), std::invalid_argument);

    auto lpr = LprParams<double>::make(4, 3, rng);
    for (std::size_t i = 0; i < lpr.wv.numel(); ++i) lpr.wv.data()[i] = 0.0;
    auto out = lpr_enhance(f, lpr);
    for (std::size_t i = 0; i < f.numel(); ++i) CHECK(out.data()[i] == f.data()[i]);
}

TEST_CASE("lpr gradcheck") {
    Rng rng(17);
    auto lpr = LprParams<double>::make(3, 2, rng);
    auto f = testutil::rand_tensor<double>({1, 2, 1, 2, 2}, rng);
    auto fn = [&lpr](GradTape<double>* t, std::vector<D>& ins) {
        LprParams<double> q = lpr;
        q.R = ins[1];
        q.wq = ins[2];
        q.wk = ins[3];
        q.wv = ins[4];
        auto y = lpr_enhance(ins[0], q, t);
        return sum_all(mul(y, y, t), t);
    };
    CHECK(gradcheck<double>(fn, {f, lpr.R, lpr.wq, lpr.wk, lpr.wv}, 1e-6) < 1e-5);
}

TEST_CASE("fcc algebra") {
    Rng rng(19);
    auto x = testutil::rand_tensor<double>({8, 3}, rng);
    CHECK(fcc(x, x, 1).item() == 1.0);

    auto neg = scale(x, -1.0);
    CHECK(fcc(x, neg, 1).item() == -1.0);

    // per-channel positive affine maps leave the correlation at one
    auto y = x.clone();
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t c = 0; c < 3; ++c) y.data()[t * 3 + c] = (1.5 + double(c)) * x.data()[t * 3 + c] + 0.3 * double(c) - 1.0;
    CHECK(fcc(x, y, 1).item() == Approx(1.0).margin(1e-12));

    auto a = testutil::rand_tensor<double>({8, 3}, rng);
    CHECK(fcc(x, a, 1).item() == Approx(fcc(a, x, 1).item()).margin(1e-12));
    CHECK(fcc(x, a, 1).item() <= 1.0);
    CHECK(fcc(x, a, 1).item() >= -1.0);
}

TEST_CASE("fcc on a single-channel volume matches the scalar-loop oracle") {
    Rng rng(23);
    for (int it = 0; it < 50; ++it) {
        auto x = testutil::rand_tensor<double>({2, 2, 2}, rng);
        auto y = testutil::rand_tensor<double>({2, 2, 2}, rng);
        double got = fcc(x, y).item();
        double want = oracle::pearson(testutil::to_doubles(x), testutil::to_doubles(y));
        CHECK(std::abs(got - want) < 1e-10);
    }
}

TEST_CASE("fcc zero-variance channels contribute zero") {
    auto x = D::full({4, 2}, 1.0);
    auto y = D::from({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    CHECK(fcc(x, y, 1).item() == 0.0);

    // one live channel, one constant: mean of (r, 0)
    auto x2 = D::from({4, 2}, {1, 7, 2, 7, 3, 7, 4, 7});
    auto y2 = D::from({4, 2}, {2, 1, 4, 2, 6, 3, 8, 4});
    CHECK(fcc(x2, y2, 1).item() == Approx(0.5).margin(1e-12));
}

TEST_CASE("fcc gradcheck") {
    Rng rng(29);
    auto x = testutil::rand_tensor<double>({6, 2}, rng);
    auto y = testutil::rand_tensor<double>({6, 2}, rng);
    auto f = [](GradTape<double>* t, std::vector<D>& ins) { return fcc(ins[0], ins[1], 1, t); };
    CHECK(gradcheck<double>(f, {x, y}, 1e-6) < 1e-5);
}

TEST_CASE("consistency loss reaches its exact bounds") {
    Rng rng(31);
    auto f1 = testutil::rand_tensor<double>({2, 3, 2, 2, 2}, rng);
    auto canon = canonicalize_to_prototypes(f1, 4);
    REQUIRE(canon.shape == Shape{4, 3});

    LprParams<double> m, p;
    m.R = canon.clone();
    p.R = canon.clone();
    auto blank = D::zeros({3, 3});
    m.wq = p.wq = m.wk = p.wk = m.wv = p.wv = blank;
    CHECK(consistency_loss(m, p, f1).item() == -2.0);

    m.R = scale(canon, -1.0);
    p.R = scale(canon, -1.0);
    CHECK(consistency_loss(m, p, f1).item() == 2.0);
}

TEST_CASE("consistency loss gradcheck with respect to prototypes and features") {
    Rng rng(37);
    auto f1 = testutil::rand_tensor<double>({1, 2, 1, 2, 2}, rng);
    auto rm = testutil::rand_tensor<double>({3, 2}, rng);
    auto rp = testutil::rand_tensor<double>({3, 2}, rng);
    auto f = [](GradTape<double>* t, std::vector<D>& ins) {
        LprParams<double> m, p;
        m.R = ins[0];
        p.R = ins[1];
        return consistency_loss(m, p, ins[2], t);
    };
    CHECK(gradcheck<double>(f, {rm, rp, f1}, 1e-6) < 1e-5);
}

TEST_CASE("consistency loss declines monotonically under plain gradient steps on R") {
    Rng rng(41);
    auto f1 = testutil::rand_tensor<double>({1, 4, 2, 2, 2}, rng);
    LprParams<double> m, p;
    m.R = D::param({8, 4});
    p.R = D::param({8, 4});
    for (std::size_t i = 0; i < m.R.numel(); ++i) {
        m.R.data()[i] = rng.uniform(-1, 1);
        p.R.data()[i] = rng.uniform(-1, 1);
    }
    double prev = 1e300, first = 0;
    for (int step = 0; step < 50; ++step) {
        GradTape<double> tape;
        auto loss = consistency_loss(m, p, f1, &tape);
        if (step == 0) first = loss.item();
        CHECK(loss.item() <= prev + 1e-12);
        prev = loss.item();
        m.R.zero_grad();
        p.R.zero_grad();
        backward(loss, tape);
        for (std::size_t i = 0; i < m.R.numel(); ++i) {
            m.R.data()[i] -= 1e-2 * m.R.grad()[i];
            p.R.data()[i] -= 1e-2 * p.R.grad()[i];
        }
    }
    CHECK(prev < first);
}

TEST_CASE("mse alignment loss") {
    Rng rng(43);
    auto a = testutil::rand_tensor<double>({1, 1, 2, 2, 2}, rng);
    CHECK(mse_alignment_loss(a, a).item() == 0.0);

    auto b = a.clone();
    for (std::size_t i = 0; i < b.numel(); ++i) b.data()[i] += 1.0;
    CHECK(mse_alignment_loss(a, b).item() == Approx(1.0).margin(1e-12));

    auto x = testutil::rand_tensor<double>({2, 3, 2, 2, 2}, rng);
    auto y = testutil::rand_tensor<double>({2, 3, 2, 2, 2}, rng);
    double acc = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += (x.data()[i] - y.data()[i]) * (x.data()[i] - y.data()[i]);
    CHECK(mse_alignment_loss(x, y).item() == Approx(acc / double(x.numel())).margin(1e-12));
    CHECK(mse_alignment_loss(x, y, /*paper_exact=*/true).item() == Approx(acc / 8.0).margin(1e-12));

    CHECK_THROWS_AS(mse_alignment_loss(a, x), std::invalid_argument);

    auto f = [](GradTape<double>* t, std::vector<D>& ins) { return mse_alignment_loss(ins[0], ins[1], false, t); };
    CHECK(gradcheck<double>(f, {x, y}, 1e-6) < 1e-5);
}
