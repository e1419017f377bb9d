#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace camf {

// Deterministic splitmix64 generator. Bit-identical streams on every
// platform, which keeps dataset generation and weight init reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; no cached spare so the state is a single u64.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

    // Independent stream for item i; order of consumption does not matter.
    Rng fork(std::uint64_t i) const {
        Rng r(state_ ^ (0x632be59bd9b4e019ull * (i + 1)));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
};

template <class V>
void shuffle(std::vector<V>& xs, Rng& rng) {
    for (std::size_t i = xs.size(); i > 1; --i) {
        std::size_t j = std::size_t(rng.below(i));
        std::swap(xs[i - 1], xs[j]);
    }
}

}  // namespace camf
