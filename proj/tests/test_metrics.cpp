#include <catch2/catch.hpp>

#include "camf/metrics.hpp"
#include "camf/random.hpp"
#include "oracles.hpp"

using namespace camf;

TEST_CASE("confusion counting hand case") {
    // TP=2, FP=1, TN=2, FN=1
    std::vector<int> labels{1, 1, 1, 0, 0, 0};
    std::vector<int> preds{1, 1, 0, 1, 0, 0};
    auto c = confusion_from(preds, labels);
    CHECK(c.tp == 2);
    CHECK(c.fp == 1);
    CHECK(c.tn == 2);
    CHECK(c.fn == 1);
    auto m = metrics_from(c, 0.5);
    CHECK(m.acc == Approx(4.0 / 6.0));
    CHECK(m.sen == Approx(2.0 / 3.0));
    CHECK(m.spe == Approx(2.0 / 3.0));
    CHECK(m.pre == Approx(2.0 / 3.0));
}

TEST_CASE("perfect and inverted scores bound the AUC") {
    std::vector<int> labels{0, 0, 1, 1};
    std::vector<double> perfect{0.1, 0.2, 0.8, 0.9};
    CHECK(roc_auc(perfect, labels) == 1.0);
    std::vector<double> inverted{0.9, 0.8, 0.2, 0.1};
    CHECK(roc_auc(inverted, labels) == 0.0);

    auto m = metrics_from(confusion_from({0, 0, 1, 1}, labels), roc_auc(perfect, labels));
    CHECK(m.acc == 1.0);
    CHECK(m.auc == 1.0);
    CHECK(m.pre == 1.0);
    CHECK(m.spe == 1.0);
    CHECK(m.sen == 1.0);
}

TEST_CASE("auc matches the pair-counting oracle on random instances") {
    Rng rng(7);
    for (int it = 0; it < 50; ++it) {
        std::size_t n = 6 + rng.below(20);
        std::vector<double> scores;
        std::vector<int> labels;
        bool pos = false, neg = false;
        for (std::size_t i = 0; i < n; ++i) {
            scores.push_back(rng.uniform());  // continuous, tie-free
            int l = int(rng.below(2));
            labels.push_back(l);
            (l ? pos : neg) = true;
        }
        if (!pos || !neg) {
            labels[0] = 1;
            labels[1] = 0;
        }
        CHECK(roc_auc(scores, labels) == Approx(oracle::auc_pairs(scores, labels)).margin(1e-12));
    }
}

TEST_CASE("auc groups ties") {
    std::vector<int> labels{1, 0, 1, 0};
    std::vector<double> tied{0.5, 0.5, 0.5, 0.5};
    CHECK(roc_auc(tied, labels) == Approx(0.5));
    CHECK(roc_auc(tied, labels) == Approx(oracle::auc_pairs(tied, labels)));
}

TEST_CASE("random scores hover near one half over 200 samples") {
    Rng rng(11);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
        scores.push_back(rng.uniform());
        labels.push_back(i % 2);
    }
    double auc = roc_auc(scores, labels);
    CHECK(auc > 0.42);
    CHECK(auc < 0.58);
}

TEST_CASE("single-class auc and empty ratios are NaN, excluded from aggregation") {
    CHECK(std::isnan(roc_auc({0.1, 0.9}, {1, 1})));
    Confusion c;
    c.tn = 4;  // no positives at all
    auto m = metrics_from(c, std::numeric_limits<double>::quiet_NaN());
    CHECK(std::isnan(m.sen));
    CHECK(std::isnan(m.pre));
    CHECK(m.acc == 1.0);

    auto agg = mean_std({1.0, std::numeric_limits<double>::quiet_NaN(), 0.5});
    CHECK(agg.excluded == 1);
    CHECK(agg.mean == Approx(0.75));

    auto none = mean_std({std::numeric_limits<double>::quiet_NaN()});
    CHECK(std::isnan(none.mean));
    CHECK(none.excluded == 1);
}

TEST_CASE("metrics are invariant under sample permutation") {
    Rng rng(13);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 31; ++i) {
        scores.push_back(rng.uniform());
        labels.push_back(int(rng.below(2)));
    }
    labels[0] = 1;
    labels[1] = 0;
    std::vector<int> preds;
    for (double s : scores) preds.push_back(s > 0.5 ? 1 : 0);
    auto base_m = metrics_from(confusion_from(preds, labels), roc_auc(scores, labels));

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, rng);
    std::vector<double> s2;
    std::vector<int> l2, p2;
    for (auto i : order) {
        s2.push_back(scores[i]);
        l2.push_back(labels[i]);
        p2.push_back(preds[i]);
    }
    auto perm_m = metrics_from(confusion_from(p2, l2), roc_auc(s2, l2));
    CHECK(perm_m.acc == base_m.acc);
    CHECK(perm_m.auc == base_m.auc);
    CHECK(perm_m.pre == base_m.pre);
    CHECK(perm_m.spe == base_m.spe);
    CHECK(perm_m.sen == base_m.sen);
}
