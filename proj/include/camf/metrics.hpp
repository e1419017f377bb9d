#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace camf {

struct Confusion {
    long tp = 0, fp = 0, tn = 0, fn = 0;
    long total() const { return tp + fp + tn + fn; }
};

inline Confusion confusion_from(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size()) throw std::invalid_argument("confusion: size mismatch");
    Confusion c;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] == 1)
            preds[i] == 1 ? ++c.tp : ++c.fn;
        else
            preds[i] == 1 ? ++c.fp : ++c.tn;
    }
    return c;
}

// ACC / AUC / PRE / SPE / SEN; ratios with a zero denominator are NaN and
// excluded from aggregation.
struct Metrics {
    double acc = std::numeric_limits<double>::quiet_NaN();
    double auc = std::numeric_limits<double>::quiet_NaN();
    double pre = std::numeric_limits<double>::quiet_NaN();
    double spe = std::numeric_limits<double>::quiet_NaN();
    double sen = std::numeric_limits<double>::quiet_NaN();
};

inline double safe_ratio(long num, long den) {
    return den == 0 ? std::numeric_limits<double>::quiet_NaN() : double(num) / double(den);
}

inline Metrics metrics_from(const Confusion& c, double auc) {
    Metrics m;
    m.acc = safe_ratio(c.tp + c.tn, c.total());
    m.pre = safe_ratio(c.tp, c.tp + c.fp);
    m.spe = safe_ratio(c.tn, c.tn + c.fp);
    m.sen = safe_ratio(c.tp, c.tp + c.fn);
    m.auc = auc;
    return m;
}

// Trapezoidal area under the ROC curve with ties grouped at equal scores.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: size mismatch");
    long P = 0, N = 0;
    for (int l : labels) (l == 1 ? P : N) += 1;
    if (P == 0 || N == 0) return std::numeric_limits<double>::quiet_NaN();

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double area = 0;
    long tp = 0, fp = 0, tp_prev = 0, fp_prev = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            labels[order[i]] == 1 ? ++tp : ++fp;
            ++i;
        }
        area += double(fp - fp_prev) * double(tp + tp_prev) / 2.0;
        tp_prev = tp;
        fp_prev = fp;
    }
    return area / (double(P) * double(N));
}

struct MeanStd {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double stddev = std::numeric_limits<double>::quiet_NaN();
    int excluded = 0;  // NaN entries dropped from the aggregate
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd r;
    std::vector<double> clean;
    for (double x : xs)
        if (std::isfinite(x))
            clean.push_back(x);
        else
            ++r.excluded;
    if (clean.empty()) return r;
    double mean = std::accumulate(clean.begin(), clean.end(), 0.0) / double(clean.size());
    double var = 0;
    for (double x : clean) var += (x - mean) * (x - mean);
    r.mean = mean;
    r.stddev = std::sqrt(var / double(clean.size()));
    return r;
}

}  // namespace camf
