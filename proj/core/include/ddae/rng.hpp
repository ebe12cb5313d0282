#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ddae {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

// Child seed for a named stage. Every stochastic step in the pipeline gets its
// seed this way so that partial re-runs see the same streams as full runs.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view stage);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. Distributions are implemented here because the std:: ones are
// allowed to differ between library implementations.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }
    double uniform();                         // [0, 1), 53 bits
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t below(std::uint64_t n);     // [0, n), unbiased
    double normal();                          // standard normal, Box-Muller
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ddae
