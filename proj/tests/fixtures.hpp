#pragma once

#include "statex/model.hpp"
#include "statex/rng.hpp"

namespace statex::fixtures {

inline ModelConfig config(Family family, std::size_t layers, std::size_t d, std::size_t heads, std::size_t dk,
                          std::size_t dv, std::size_t vocab) {
    ModelConfig c;
    c.family = family;
    c.n_layers = layers;
    c.d_model = d;
    c.n_heads = heads;
    c.d_k = dk;
    c.d_v = dv;
    c.vocab = vocab;
    c.ffn_ratio = 2.0;
    c.delimiter_token = 0;
    return c.finalize();
}

// Adds noise to every tensor so that norms, biases and gates are all
// exercised away from their initial values. Mamba2 decay rates stay positive.
inline Checkpoint perturbed(Checkpoint ckpt, std::uint64_t seed, double std = 0.3) {
    Rng rng(seed);
    for (auto & [name, t] : ckpt.tensors) {
        Rng r = rng.derive(name);
        const bool positive = name.size() >= 2 && name.compare(name.size() - 2, 2, ".a") == 0;
        for (auto & v : t.values()) {
            v += positive ? r.uniform(0.0, 1.0) : std * r.normal();
        }
    }
    return ckpt;
}

inline std::vector<int> tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> out(n);
    for (auto & t : out) {
        t = static_cast<int>(rng.index(vocab));
    }
    return out;
}

} // namespace statex::fixtures
