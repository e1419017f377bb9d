#pragma once

#include <vector>

#include "camf/random.hpp"
#include "camf/tensor.hpp"

namespace testutil {

template <class T>
camf::Tensor<T> rand_tensor(camf::Shape shape, camf::Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = camf::Tensor<T>::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = T(rng.uniform(lo, hi));
    return t;
}

// Values bounded away from zero; keeps relu/max kinks off the sample points.
template <class T>
camf::Tensor<T> rand_tensor_nonzero(camf::Shape shape, camf::Rng& rng, double margin = 0.05) {
    auto t = rand_tensor<T>(std::move(shape), rng);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        double v = double(t.data()[i]);
        if (v >= 0 && v < margin) t.data()[i] = T(v + margin);
        if (v < 0 && v > -margin) t.data()[i] = T(v - margin);
    }
    return t;
}

template <class T>
std::vector<double> to_doubles(const camf::Tensor<T>& t) {
    std::vector<double> v(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) v[i] = double(t.data()[i]);
    return v;
}

}  // namespace testutil
