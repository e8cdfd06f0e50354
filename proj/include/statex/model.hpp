#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "statex/blocks.hpp"
#include "statex/checkpoint.hpp"
#include "statex/rng.hpp"

namespace statex {

inline constexpr double kInitStd = 0.02;

// Initial value for one tensor, drawn from a stream keyed by its name so the
// result does not depend on initialization order.
Tensor init_parameter(const ModelConfig & cfg, const std::string & name, const Shape & shape, const Rng & base);
// Softplus-inverse warm start for the Mamba2 step-size bias, log-spaced in [1e-3, 1e-1].
Tensor default_dt_bias(std::size_t heads);

Checkpoint init_checkpoint(ModelConfig cfg, std::uint64_t seed);

// B sequences of length seq_len; inputs and targets hold B*seq_len ids.
struct Batch {
    std::size_t seq_len = 0;
    std::vector<int> inputs;
    std::vector<int> targets;

    std::size_t sequences() const { return seq_len ? inputs.size() / seq_len : 0; }
};

// Logits (T x vocab) for one token sequence.
Tensor model_forward(const Checkpoint & ckpt, std::span<const int> tokens, const ScanOptions & opt = {});
// Logits for a stacked batch of equal-length sequences.
Tensor model_forward_batch(const Checkpoint & ckpt, std::span<const int> tokens, std::size_t seq_len,
                           const ScanOptions & opt = {});

double model_loss(const Checkpoint & ckpt, const Batch & batch);
// Mean cross-entropy; writes d(loss)/d(param) into `grads` (overwritten).
double model_loss_and_grad(const Checkpoint & ckpt, const Batch & batch, TensorMap & grads);
TensorMap zero_like(const TensorMap & tensors);

// Per-layer, per-head d_k x d_v matrices; zero at sequence start.
class RecurrentState {
public:
    explicit RecurrentState(const ModelConfig & cfg);

    std::size_t layers() const { return buffers_.size(); }
    const LayerShape & shape(std::size_t layer) const { return shapes_.at(layer); }
    ConstMatrixMap head(std::size_t layer, std::size_t head) const;
    std::vector<double> & buffer(std::size_t layer) { return buffers_.at(layer); }
    void reset();

private:
    std::vector<LayerShape> shapes_;
    std::vector<std::vector<double>> buffers_;
};

// Token-by-token inference over the recurrent state.
class Decoder {
public:
    explicit Decoder(const Checkpoint & ckpt);

    // Consumes tokens, returns logits after the last one.
    Tensor feed(std::span<const int> tokens);
    Tensor step(int token);
    std::vector<int> greedy(std::span<const int> prompt, std::size_t n);
    const RecurrentState & state() const { return state_; }
    void reset() { state_.reset(); }

private:
    const Checkpoint & ckpt_;
    RecurrentState state_;
};

int argmax(std::span<const double> row);

} // namespace statex
