#include "statex/config.hpp"

#include "statex/error.hpp"

#include <cmath>

namespace statex {

std::string_view family_name(Family f) {
    return f == Family::Gla ? "gla" : "mamba2";
}

Family parse_family(std::string_view s) {
    if (s == "gla" || s == "GLA") {
        return Family::Gla;
    }
    if (s == "mamba2" || s == "Mamba2") {
        return Family::Mamba2;
    }
    throw ConfigError("family: unknown value '" + std::string(s) + "' (expected gla or mamba2)");
}

std::string_view delta_activation_name(DeltaActivation a) {
    return a == DeltaActivation::Softplus ? "softplus" : "silu";
}

DeltaActivation parse_delta_activation(std::string_view s) {
    if (s == "softplus") {
        return DeltaActivation::Softplus;
    }
    if (s == "silu") {
        return DeltaActivation::Silu;
    }
    throw ConfigError("delta_activation: unknown value '" + std::string(s) + "'");
}

ModelConfig & ModelConfig::finalize() {
    if (layers.empty()) {
        layers.assign(n_layers, LayerShape{n_heads, d_k, d_v});
    }
    validate();
    return *this;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string & field, const std::string & why) {
        throw ConfigError(field + ": " + why);
    };
    if (n_layers == 0) {
        fail("layers", "must be >= 1");
    }
    if (d_model == 0) {
        fail("dim", "must be >= 1");
    }
    if (n_heads == 0 || d_k == 0 || d_v == 0) {
        fail("heads/dk/dv", "must be >= 1");
    }
    if (vocab < 2) {
        fail("vocab", "must be >= 2");
    }
    if (delimiter_token < 0 || static_cast<std::size_t>(delimiter_token) >= vocab) {
        fail("delimiter_token", "must be a valid token id");
    }
    if (family == Family::Gla && !(ffn_ratio > 0.0)) {
        fail("ffn_ratio", "must be > 0");
    }
    if (layers.size() != n_layers) {
        fail("layers", "per-layer geometry has " + std::to_string(layers.size()) + " entries for " +
                           std::to_string(n_layers) + " layers");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto & s = layers[l];
        if (s.heads == 0 || s.d_k == 0 || s.d_v == 0) {
            fail("layer " + std::to_string(l), "empty geometry");
        }
        if (family == Family::Gla && s.heads * s.d_k > d_model) {
            fail("layer " + std::to_string(l), "GLA requires heads*d_k <= d_model");
        }
    }
}

std::size_t ModelConfig::ffn_hidden() const {
    return static_cast<std::size_t>(std::llround(ffn_ratio * static_cast<double>(d_model)));
}

std::size_t ModelConfig::state_size() const {
    std::size_t total = 0;
    for (const auto & s : layers) {
        total += s.state_size();
    }
    return total;
}

std::string layer_prefix(const ModelConfig & cfg, std::size_t layer) {
    return "layers." + std::to_string(layer) + (cfg.family == Family::Gla ? ".gla." : ".ssm.");
}

std::string ffn_prefix(std::size_t layer) {
    return "layers." + std::to_string(layer) + ".ffn.";
}

ShapeMap mixer_schema(Family family, const LayerShape & s, std::size_t d) {
    const std::size_t hk = s.heads * s.d_k;
    const std::size_t hv = s.heads * s.d_v;
    if (family == Family::Gla) {
        return {
            {"norm", {d}},       {"w_q", {d, hk}},  {"w_k", {d, hk}},  {"w_a", {d, hk}},
            {"w_v", {d, hv}},    {"w_r", {d, hv}},  {"b_r", {hv}},     {"out_norm", {hv}},
            {"w_o", {hv, d}},
        };
    }
    return {
        {"norm", {d}},          {"w_v", {d, hv}},      {"w_k", {d, s.d_k}}, {"w_q", {d, s.d_k}},
        {"w_dt", {d, s.heads}}, {"dt_bias", {s.heads}}, {"a", {s.heads}},    {"d_skip", {s.heads}},
        {"w_z", {d, hv}},       {"out_norm", {hv}},     {"w_o", {hv, d}},
    };
}

ShapeMap ffn_schema(std::size_t d, std::size_t hidden) {
    return {{"norm", {d}}, {"w_gate", {d, hidden}}, {"w_up", {d, hidden}}, {"w_down", {hidden, d}}};
}

ShapeMap model_schema(const ModelConfig & cfg) {
    ShapeMap out;
    out["embed"] = {cfg.vocab, cfg.d_model};
    out["final_norm"] = {cfg.d_model};
    out["lm_head"] = {cfg.d_model, cfg.vocab};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (auto & [name, shape] : mixer_schema(cfg.family, cfg.layer(l), cfg.d_model)) {
            out[layer_prefix(cfg, l) + name] = shape;
        }
        if (cfg.family == Family::Gla) {
            for (auto & [name, shape] : ffn_schema(cfg.d_model, cfg.ffn_hidden())) {
                out[ffn_prefix(l) + name] = shape;
            }
        }
    }
    return out;
}

std::size_t parameter_count(const ModelConfig & cfg) {
    std::size_t n = 0;
    for (auto & [name, shape] : model_schema(cfg)) {
        n += shape_numel(shape);
    }
    return n;
}

} // namespace statex
