#include "statex/rng.hpp"

#include "statex/error.hpp"

#include <cmath>
#include <numbers>

namespace statex {

std::uint64_t mix64(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Rng Rng::derive(std::string_view name) const {
    return derive(hash_name(name));
}

Rng Rng::derive(std::uint64_t id) const {
    return Rng(seed_, mix64(stream_ ^ mix64(id)));
}

std::uint64_t Rng::next_u64() {
    std::uint64_t key = mix64(seed_ ^ mix64(stream_ + 0x632be59bd9b4e019ULL));
    return mix64(key + 0x9e3779b97f4a7c15ULL * ++counter_);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::index(std::uint64_t n) {
    if (n == 0) {
        throw ConfigError("Rng::index: empty range");
    }
    // rejection sampling keeps the result exactly uniform
    std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor seeded_normal(Rng & rng, Shape shape, double std) {
    if (!(std >= 0.0)) {
        throw ConfigError("seeded_normal: std must be >= 0");
    }
    Tensor t(std::move(shape));
    for (auto & v : t.values()) {
        v = std * rng.normal();
    }
    return t;
}

Tensor seeded_truncated_normal(Rng & rng, Shape shape, double std, double bound) {
    if (!(std >= 0.0) || !(bound > 0.0)) {
        throw ConfigError("seeded_truncated_normal: need std >= 0 and bound > 0");
    }
    Tensor t(std::move(shape));
    for (auto & v : t.values()) {
        double z;
        do {
            z = rng.normal();
        } while (std::abs(z) > bound);
        v = std * z;
    }
    return t;
}

Tensor seeded_uniform(Rng & rng, Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto & v : t.values()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

} // namespace statex
