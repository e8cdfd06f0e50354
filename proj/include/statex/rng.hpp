#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

#include "statex/tensor.hpp"

namespace statex {

// Counter-based generator: draw i of stream s is a pure function of
// (seed, s, i), so derived streams never depend on the order in which
// other streams were consumed.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

    // Independent stream keyed by a name, e.g. a tensor name.
    Rng derive(std::string_view name) const;
    Rng derive(std::uint64_t id) const;

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n);
    double normal();

    template <typename T> void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(index(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

// I.i.d. normal draws with mean 0 and standard deviation `std`.
Tensor seeded_normal(Rng & rng, Shape shape, double std);
// Normal draws rejected outside +-`bound` standard deviations.
Tensor seeded_truncated_normal(Rng & rng, Shape shape, double std, double bound = 3.0);
Tensor seeded_uniform(Rng & rng, Shape shape, double lo, double hi);

} // namespace statex
