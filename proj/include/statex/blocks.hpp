#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "statex/config.hpp"
#include "statex/tensor.hpp"

namespace statex {

// GLA decay gate: alpha = sigmoid(x W_a)^(1/kGateTau).
inline constexpr double kGateTau = 16.0;
// Decays are floored here so no state channel is ever fully erased.
inline constexpr double kAlphaFloor = 1e-6;

enum class Scan { Step, Chunked };

struct ScanOptions {
    Scan scan = Scan::Step;
    std::size_t chunk = 64;
};

// Tensors of one block under local names ("w_q", "norm", ...).
struct LayerParams {
    Family family = Family::Gla;
    LayerShape shape;
    std::size_t d_model = 0;
    std::size_t index = 0;
    TensorMap tensors;

    const Tensor & at(std::string_view name) const;
};

// Read-only lookup of block tensors stored under a name prefix.
class ParamView {
public:
    ParamView(const TensorMap & map, std::string prefix) : map_(&map), prefix_(std::move(prefix)) {}
    const Tensor & operator()(std::string_view name) const;

private:
    const TensorMap * map_;
    std::string prefix_;
};

class GradView {
public:
    GradView(TensorMap & map, std::string prefix) : map_(&map), prefix_(std::move(prefix)) {}
    Tensor & operator()(std::string_view name) const;

private:
    TensorMap * map_;
    std::string prefix_;
};

// Per-sequence recurrent states, one flat heads*d_k*d_v buffer per sequence.
using SequenceStates = std::vector<std::vector<double>>;

struct GlaCache {
    Tensor x, inv_norm, xn, q, k, v, za, alpha, zr, o_raw, inv_out, o_norm, r, gated;
    std::vector<std::vector<std::vector<double>>> snapshots;
};

struct Mamba2Cache {
    Tensor x, inv_norm, xn, v, k, q, zdt, delta, alpha, zz, z, qh, kh, ah, o, p, inv_out, p_norm;
    std::vector<std::vector<std::vector<double>>> snapshots;
};

struct FfnCache {
    Tensor x, inv_norm, xn, gate, up, hidden;
};

// x has (sequences * seq_len) rows. Outputs exclude the residual.
Tensor gla_forward(const ParamView & p, const LayerShape & shape, const Tensor & x, std::size_t seq_len,
                   const ScanOptions & opt, GlaCache * cache = nullptr, SequenceStates * states = nullptr);
Tensor gla_backward(const ParamView & p, const LayerShape & shape, const Tensor & dy, std::size_t seq_len,
                    const GlaCache & cache, const GradView & grads);

Tensor mamba2_forward(const ParamView & p, const LayerShape & shape, DeltaActivation act, const Tensor & x,
                      std::size_t seq_len, const ScanOptions & opt, Mamba2Cache * cache = nullptr,
                      SequenceStates * states = nullptr);
Tensor mamba2_backward(const ParamView & p, const LayerShape & shape, DeltaActivation act, const Tensor & dy,
                       std::size_t seq_len, const Mamba2Cache & cache, const GradView & grads);

Tensor ffn_forward(const ParamView & p, const Tensor & x, FfnCache * cache = nullptr);
Tensor ffn_backward(const ParamView & p, const Tensor & dy, const FfnCache & cache, const GradView & grads);

// Single GLA head step: S = diag(alpha) S_prev + k^T v, y = q S.
std::pair<Tensor, Tensor> gla_head_step(const Tensor & s_prev, const Tensor & q, const Tensor & k, const Tensor & v,
                                        const Tensor & alpha);

// Block forwards over one sequence x_seq: T x d.
Tensor gla_block_forward(const Tensor & x_seq, const LayerParams & params);
Tensor mamba2_block_forward(const Tensor & x_seq, const LayerParams & params,
                            DeltaActivation act = DeltaActivation::Softplus);
// Same outputs as the step forms, evaluated chunk by chunk.
Tensor chunked_scan(const Tensor & x_seq, const LayerParams & params, std::size_t chunk,
                    DeltaActivation act = DeltaActivation::Softplus);

} // namespace statex
