#pragma once

#include "camf/nn_ops.hpp"

namespace camf {

// Shared-specific feature fusion: [F_sh, SF_m, SF_p] concatenation feeding a
// linear head, cross-entropy, and the total training objective.

template <class T>
struct ClassifierParams {
    Tensor<T> w;  // [in x classes]
    Tensor<T> b;  // [classes]

    static ClassifierParams make(int in_features, int classes, Rng& rng) {
        ClassifierParams p;
        p.w = Tensor<T>::param({std::size_t(in_features), std::size_t(classes)});
        const double std_dev = std::sqrt(1.0 / double(in_features));
        for (std::size_t i = 0; i < p.w.numel(); ++i) p.w.data()[i] = T(rng.normal() * std_dev);
        p.b = Tensor<T>::param({std::size_t(classes)});
        return p;
    }

    std::vector<Tensor<T>*> params() { return {&w, &b}; }
};

// Fixed order: shared, MRI-specific, PET-specific.
template <class T>
Tensor<T> joint_fuse(const Tensor<T>& f_sh, const Tensor<T>& sf_m, const Tensor<T>& sf_p,
                     GradTape<T>* tape = nullptr) {
    return concat_axis1(std::vector<Tensor<T>>{f_sh, sf_m, sf_p}, tape);
}

template <class T>
Tensor<T> classify(const Tensor<T>& f_joint, const ClassifierParams<T>& p, GradTape<T>* tape = nullptr) {
    if (f_joint.shape[1] != p.w.shape[0])
        throw std::invalid_argument("classify: joint width " + std::to_string(f_joint.shape[1]) +
                                    " != classifier input " + std::to_string(p.w.shape[0]));
    return linear(f_joint, p.w, p.b, tape);
}

template <class T>
Tensor<T> class_probabilities(const Tensor<T>& logits) {
    return softmax(logits);
}

namespace detail {
template <class T>
void check_labels(const Tensor<T>& scores, const std::vector<int>& labels) {
    if (scores.rank() != 2) throw std::invalid_argument("cross entropy expects [N x classes]");
    if (labels.size() != scores.shape[0]) throw std::invalid_argument("cross entropy: one label per row required");
    for (int l : labels)
        if (l < 0 || std::size_t(l) >= scores.shape[1])
            throw std::invalid_argument("cross entropy: label " + std::to_string(l) + " outside class range");
}
}  // namespace detail

// Mean over the batch of -log softmax(logits)[label], computed from logits
// through log-sum-exp.
template <class T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& labels,
                               GradTape<T>* tape = nullptr) {
    detail::check_labels(logits, labels);
    const std::size_t N = logits.shape[0], K = logits.shape[1];
    double acc = 0;
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = logits.data() + n * K;
        double mx = double(row[0]);
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, double(row[k]));
        double sum = 0;
        for (std::size_t k = 0; k < K; ++k) sum += std::exp(double(row[k]) - mx);
        const double lse = mx + std::log(sum);
        acc += lse - double(row[labels[n]]);
        for (std::size_t k = 0; k < K; ++k) (*probs)[n * K + k] = std::exp(double(row[k]) - lse);
    }
    Tensor<T> out = Tensor<T>::scalar(T(acc / double(N)));
    detail::record(tape, out, {&logits}, [logits, out, probs, labels, N, K]() {
        if (!logits.has_grad()) return;
        const T g = out.grad()[0] / T(N);
        T* gl = const_cast<Tensor<T>&>(logits).grad();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k)
                gl[n * K + k] += g * T((*probs)[n * K + k] - (std::size_t(labels[n]) == k ? 1.0 : 0.0));
    });
    return out;
}

// Probability-level form with a log-eps guard; used where scores are already
// normalized.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels, GradTape<T>* tape = nullptr) {
    detail::check_labels(probs, labels);
    const std::size_t N = probs.shape[0], K = probs.shape[1];
    const double guard = 1e-12;
    double acc = 0;
    for (std::size_t n = 0; n < N; ++n) acc += -std::log(std::max(double(probs.data()[n * K + labels[n]]), guard));
    Tensor<T> out = Tensor<T>::scalar(T(acc / double(N)));
    detail::record(tape, out, {&probs}, [probs, out, labels, N, K, guard]() {
        if (!probs.has_grad()) return;
        const T g = out.grad()[0] / T(N);
        T* gp = const_cast<Tensor<T>&>(probs).grad();
        for (std::size_t n = 0; n < N; ++n) {
            const double p = std::max(double(probs.data()[n * K + labels[n]]), guard);
            gp[n * K + labels[n]] += g * T(-1.0 / p);
        }
    });
    return out;
}

// l_total = l_consi + lambda * l_mse + l_c
template <class T>
Tensor<T> total_loss(const Tensor<T>& l_consi, const Tensor<T>& l_mse, const Tensor<T>& l_c, T lambda,
                     GradTape<T>* tape = nullptr) {
    return add(add(l_consi, scale(l_mse, lambda, tape), tape), l_c, tape);
}

}  // namespace camf
