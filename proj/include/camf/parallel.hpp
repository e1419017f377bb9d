#pragma once

#include <cstddef>
#include <thread>
#include <vector>

namespace camf {

// Worker count for kernel-internal parallelism. Kernels only ever split
// disjoint output partitions across workers, so results are bit-identical
// for any thread count.
inline int& num_threads() {
    static int n = 1;
    return n;
}

inline void set_num_threads(int n) {
    if (n <= 0) n = int(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    num_threads() = n;
}

template <class F>
void parallel_for(std::size_t begin, std::size_t end, const F& body) {
    std::size_t count = end > begin ? end - begin : 0;
    int workers = num_threads();
    if (workers <= 1 || count < 2) {
        for (std::size_t i = begin; i < end; ++i) body(i);
        return;
    }
    if (std::size_t(workers) > count) workers = int(count);
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    std::size_t chunk = (count + workers - 1) / workers;
    for (int w = 1; w < workers; ++w) {
        std::size_t lo = begin + chunk * w;
        std::size_t hi = lo + chunk < end ? lo + chunk : end;
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body]() {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    std::size_t hi0 = begin + chunk < end ? begin + chunk : end;
    for (std::size_t i = begin; i < hi0; ++i) body(i);
    for (auto& t : pool) t.join();
}

}  // namespace camf
