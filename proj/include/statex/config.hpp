#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "statex/tensor.hpp"

namespace statex {

enum class Family { Gla, Mamba2 };

// How the Mamba2 step size is produced from its pre-activation.
enum class DeltaActivation { Softplus, Silu };

std::string_view family_name(Family f);
Family parse_family(std::string_view s);
std::string_view delta_activation_name(DeltaActivation a);
DeltaActivation parse_delta_activation(std::string_view s);

// Token-mixing geometry of one layer. For Mamba2, d_k is the width of the
// key/query shared by all heads.
struct LayerShape {
    std::size_t heads = 0;
    std::size_t d_k = 0;
    std::size_t d_v = 0;

    std::size_t state_size() const { return heads * d_k * d_v; }
    friend bool operator==(const LayerShape &, const LayerShape &) = default;
};

struct ModelConfig {
    Family family = Family::Gla;
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_k = 0;
    std::size_t d_v = 0;
    std::size_t vocab = 0;
    double ffn_ratio = 2.0;
    int delimiter_token = 0;
    DeltaActivation delta_activation = DeltaActivation::Softplus;
    // Per-layer geometry; differs from the base values only in expanded layers.
    std::vector<LayerShape> layers;

    // Fills `layers` with the base geometry where it is empty, then validates.
    ModelConfig & finalize();
    void validate() const;

    const LayerShape & layer(std::size_t l) const { return layers.at(l); }
    std::size_t ffn_hidden() const;
    std::size_t state_size() const;

    friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

using TensorMap = std::map<std::string, Tensor>;
using ShapeMap = std::map<std::string, Shape>;

std::string layer_prefix(const ModelConfig & cfg, std::size_t layer);
std::string ffn_prefix(std::size_t layer);

// Tensor names of one token-mixing block (local names, no prefix).
ShapeMap mixer_schema(Family family, const LayerShape & shape, std::size_t d_model);
ShapeMap ffn_schema(std::size_t d_model, std::size_t hidden);
// Every tensor of a model, keyed by its global name.
ShapeMap model_schema(const ModelConfig & cfg);
std::size_t parameter_count(const ModelConfig & cfg);

} // namespace statex
