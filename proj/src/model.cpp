#include "statex/model.hpp"

#include "statex/error.hpp"
#include "statex/ops.hpp"

#include <algorithm>
#include <cmath>

namespace statex {

namespace {

bool ends_with(const std::string & s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void check_tokens(std::span<const int> tokens, std::size_t vocab) {
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw ConfigError("token id " + std::to_string(t) + " out of range for vocab " + std::to_string(vocab));
        }
    }
}

Tensor embed(const Checkpoint & ckpt, std::span<const int> tokens) {
    const Tensor & table = ckpt.at("embed");
    const std::size_t d = ckpt.config.d_model;
    Tensor x({tokens.size(), d});
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        std::copy_n(table.data() + static_cast<std::size_t>(tokens[t]) * d, d, x.data() + t * d);
    }
    return x;
}

void check_layer(const Tensor & y, std::size_t layer) {
    if (!y.all_finite()) {
        throw NumericError("non-finite activations in layer " + std::to_string(layer));
    }
}

// Residual stack without the LM head. `states` carries recurrent state across calls.
Tensor backbone(const Checkpoint & ckpt, Tensor x, std::size_t seq_len, const ScanOptions & opt,
                std::vector<SequenceStates> * states) {
    const auto & cfg = ckpt.config;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        ParamView mixer(ckpt.tensors, layer_prefix(cfg, l));
        SequenceStates * st = states ? &(*states)[l] : nullptr;
        Tensor y = cfg.family == Family::Gla
                       ? gla_forward(mixer, cfg.layer(l), x, seq_len, opt, nullptr, st)
                       : mamba2_forward(mixer, cfg.layer(l), cfg.delta_activation, x, seq_len, opt, nullptr, st);
        check_layer(y, l);
        x.mat() += y.mat();
        if (cfg.family == Family::Gla) {
            Tensor f = ffn_forward(ParamView(ckpt.tensors, ffn_prefix(l)), x);
            check_layer(f, l);
            x.mat() += f.mat();
        }
    }
    return x;
}

Tensor head(const Checkpoint & ckpt, const Tensor & x) {
    Tensor xf = ops::rms_norm(x, ckpt.at("final_norm"), ckpt.config.d_model);
    return ops::matmul(xf, ckpt.at("lm_head"));
}

} // namespace

Tensor default_dt_bias(std::size_t heads) {
    Tensor b({heads});
    const double lo = std::log(1e-3);
    const double hi = std::log(1e-1);
    for (std::size_t h = 0; h < heads; ++h) {
        double frac = (static_cast<double>(h) + 0.5) / static_cast<double>(heads);
        b[h] = ops::softplus_inv(std::exp(lo + frac * (hi - lo)));
    }
    return b;
}

Tensor init_parameter(const ModelConfig & cfg, const std::string & name, const Shape & shape, const Rng & base) {
    Rng rng = base.derive(name);
    if (ends_with(name, "norm")) {
        return Tensor::ones(shape);
    }
    if (ends_with(name, ".b_r")) {
        return Tensor::zeros(shape);
    }
    if (ends_with(name, ".dt_bias")) {
        return default_dt_bias(shape_numel(shape));
    }
    if (ends_with(name, ".a")) {
        return seeded_uniform(rng, shape, 1.0, 16.0);
    }
    if (ends_with(name, ".d_skip")) {
        return Tensor::ones(shape);
    }
    double std = kInitStd;
    if (ends_with(name, ".w_o") || ends_with(name, ".w_down")) {
        std /= std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    }
    return seeded_truncated_normal(rng, shape, std);
}

Checkpoint init_checkpoint(ModelConfig cfg, std::uint64_t seed) {
    cfg.finalize();
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.meta.seed = seed;
    ckpt.meta.stage = "init";
    Rng base(seed);
    for (const auto & [name, shape] : model_schema(cfg)) {
        ckpt.tensors.emplace(name, init_parameter(cfg, name, shape, base));
    }
    return ckpt;
}

Tensor model_forward(const Checkpoint & ckpt, std::span<const int> tokens, const ScanOptions & opt) {
    return model_forward_batch(ckpt, tokens, tokens.size(), opt);
}

Tensor model_forward_batch(const Checkpoint & ckpt, std::span<const int> tokens, std::size_t seq_len,
                           const ScanOptions & opt) {
    check_tokens(tokens, ckpt.config.vocab);
    if (tokens.empty()) {
        throw ConfigError("model_forward: empty token sequence");
    }
    Tensor x = backbone(ckpt, embed(ckpt, tokens), seq_len, opt, nullptr);
    return head(ckpt, x);
}

TensorMap zero_like(const TensorMap & tensors) {
    TensorMap out;
    for (const auto & [name, t] : tensors) {
        out.emplace(name, Tensor(t.shape()));
    }
    return out;
}

double model_loss(const Checkpoint & ckpt, const Batch & batch) {
    Tensor logits = model_forward_batch(ckpt, batch.inputs, batch.seq_len);
    return ops::cross_entropy(logits, batch.targets);
}

double model_loss_and_grad(const Checkpoint & ckpt, const Batch & batch, TensorMap & grads) {
    const auto & cfg = ckpt.config;
    check_tokens(batch.inputs, cfg.vocab);
    if (batch.inputs.size() != batch.targets.size() || batch.seq_len == 0 ||
        batch.inputs.size() % batch.seq_len != 0) {
        throw ShapeError("batch: inputs/targets/seq_len inconsistent");
    }
    if (grads.size() != ckpt.tensors.size()) {
        grads = zero_like(ckpt.tensors);
    } else {
        for (auto & [name, g] : grads) {
            g.fill(0.0);
        }
    }
    const std::size_t seq_len = batch.seq_len;
    const ScanOptions opt{};

    std::vector<GlaCache> gla(cfg.family == Family::Gla ? cfg.n_layers : 0);
    std::vector<Mamba2Cache> ssm(cfg.family == Family::Mamba2 ? cfg.n_layers : 0);
    std::vector<FfnCache> ffn(cfg.family == Family::Gla ? cfg.n_layers : 0);

    Tensor x = embed(ckpt, batch.inputs);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        ParamView mixer(ckpt.tensors, layer_prefix(cfg, l));
        Tensor y = cfg.family == Family::Gla
                       ? gla_forward(mixer, cfg.layer(l), x, seq_len, opt, &gla[l])
                       : mamba2_forward(mixer, cfg.layer(l), cfg.delta_activation, x, seq_len, opt, &ssm[l]);
        check_layer(y, l);
        x.mat() += y.mat();
        if (cfg.family == Family::Gla) {
            Tensor f = ffn_forward(ParamView(ckpt.tensors, ffn_prefix(l)), x, &ffn[l]);
            check_layer(f, l);
            x.mat() += f.mat();
        }
    }
    Tensor inv_final;
    Tensor xf = ops::rms_norm(x, ckpt.at("final_norm"), cfg.d_model, &inv_final);
    Tensor logits = ops::matmul(xf, ckpt.at("lm_head"));
    Tensor dlogits;
    double loss = ops::cross_entropy(logits, batch.targets, &dlogits);
    if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss");
    }

    Tensor dxf(xf.shape());
    ops::matmul_backward(dlogits, xf, ckpt.at("lm_head"), &dxf, &grads.at("lm_head"));
    Tensor dx = ops::rms_norm_backward(dxf, x, ckpt.at("final_norm"), cfg.d_model, inv_final, &grads.at("final_norm"));

    for (std::size_t l = cfg.n_layers; l-- > 0;) {
        if (cfg.family == Family::Gla) {
            Tensor df = ffn_backward(ParamView(ckpt.tensors, ffn_prefix(l)), dx, ffn[l], GradView(grads, ffn_prefix(l)));
            dx.mat() += df.mat();
            Tensor dm = gla_backward(ParamView(ckpt.tensors, layer_prefix(cfg, l)), cfg.layer(l), dx, seq_len, gla[l],
                                     GradView(grads, layer_prefix(cfg, l)));
            dx.mat() += dm.mat();
            ffn[l] = {};
            gla[l] = {};
        } else {
            Tensor dm = mamba2_backward(ParamView(ckpt.tensors, layer_prefix(cfg, l)), cfg.layer(l),
                                        cfg.delta_activation, dx, seq_len, ssm[l], GradView(grads, layer_prefix(cfg, l)));
            dx.mat() += dm.mat();
            ssm[l] = {};
        }
    }

    Tensor & gembed = grads.at("embed");
    const std::size_t d = cfg.d_model;
    for (std::size_t t = 0; t < batch.inputs.size(); ++t) {
        double * row = gembed.data() + static_cast<std::size_t>(batch.inputs[t]) * d;
        const double * src = dx.data() + t * d;
        for (std::size_t j = 0; j < d; ++j) {
            row[j] += src[j];
        }
    }
    return loss;
}

// ----------------------------------------------------------------------------

RecurrentState::RecurrentState(const ModelConfig & cfg) : shapes_(cfg.layers) {
    buffers_.reserve(shapes_.size());
    for (const auto & s : shapes_) {
        buffers_.emplace_back(s.state_size(), 0.0);
    }
}

ConstMatrixMap RecurrentState::head(std::size_t layer, std::size_t h) const {
    const auto & s = shapes_.at(layer);
    if (h >= s.heads) {
        throw ShapeError("RecurrentState: head " + std::to_string(h) + " out of range");
    }
    return ConstMatrixMap(buffers_[layer].data() + h * s.d_k * s.d_v, static_cast<Eigen::Index>(s.d_k),
                          static_cast<Eigen::Index>(s.d_v));
}

void RecurrentState::reset() {
    for (auto & b : buffers_) {
        std::fill(b.begin(), b.end(), 0.0);
    }
}

Decoder::Decoder(const Checkpoint & ckpt) : ckpt_(ckpt), state_(ckpt.config) {}

Tensor Decoder::feed(std::span<const int> tokens) {
    if (tokens.empty()) {
        throw ConfigError("Decoder::feed: no tokens");
    }
    check_tokens(tokens, ckpt_.config.vocab);
    std::vector<SequenceStates> states(state_.layers());
    for (std::size_t l = 0; l < state_.layers(); ++l) {
        states[l].push_back(std::move(state_.buffer(l)));
    }
    Tensor x = backbone(ckpt_, embed(ckpt_, tokens), tokens.size(), ScanOptions{}, &states);
    for (std::size_t l = 0; l < state_.layers(); ++l) {
        state_.buffer(l) = std::move(states[l][0]);
    }
    // only the last position is needed
    const std::size_t d = ckpt_.config.d_model;
    Tensor last({1, d}, std::vector<double>(x.data() + (tokens.size() - 1) * d, x.data() + tokens.size() * d));
    return head(ckpt_, last);
}

Tensor Decoder::step(int token) {
    const int t[1] = {token};
    return feed(t);
}

std::vector<int> Decoder::greedy(std::span<const int> prompt, std::size_t n) {
    std::vector<int> out;
    if (n == 0) {
        return out;
    }
    Tensor logits = feed(prompt);
    for (std::size_t i = 0; i < n; ++i) {
        int next = argmax(logits.span());
        out.push_back(next);
        if (i + 1 < n) {
            logits = step(next);
        }
    }
    return out;
}

int argmax(std::span<const double> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

} // namespace statex
