#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "statex/blocks.hpp"
#include "statex/checkpoint.hpp"

namespace statex {

enum class ReinitPolicy { Reinit, Inherit };

std::string_view reinit_policy_name(ReinitPolicy p);
ReinitPolicy parse_reinit_policy(std::string_view s);

// Which layers to expand and how.
struct ExpansionPlan {
    Family family = Family::Gla;
    // Number of expanded layers.
    std::size_t m = 4;
    // GLA: head count after merging (must divide the layer's head count).
    std::size_t gla_merge_to = 1;
    // Mamba2: key-dimension multiplier.
    std::size_t ssm_E = 4;
    ReinitPolicy reinit_policy = ReinitPolicy::Reinit;
    // Seed for redrawn tensors.
    std::uint64_t seed = 0;

    // State multiplier F of one expanded layer whose head count is `heads`.
    std::size_t factor(std::size_t heads) const;
};

struct AccountingReport {
    Family family = Family::Gla;
    std::size_t layers = 0;
    std::size_t m = 0;
    std::size_t factor = 1;
    std::vector<std::size_t> layer_indices;
    std::vector<std::size_t> state_before;
    std::vector<std::size_t> state_after;
    std::size_t total_before = 0;
    std::size_t total_after = 0;
    double ratio = 1.0;
    std::size_t params_before = 0;
    std::size_t params_after = 0;
    std::int64_t param_delta = 0;
    // Context against published totals for the 1.3B shapes, when applicable.
    std::string note;
};

// Layers {0, step, 2*step, ...} with step = floor(L/m); exactly m entries.
std::vector<std::size_t> select_layers(std::size_t layers, std::size_t m);

LayerParams extract_layer(const Checkpoint & ckpt, std::size_t layer);
// Writes a block's tensors and geometry back into the checkpoint.
void insert_layer(Checkpoint & ckpt, const LayerParams & params);

// Merges groups of H/target adjacent heads into single heads. Head h's
// projection columns become block h of its merged head, so no tensor
// values change; only the head geometry does.
LayerParams merge_heads(const LayerParams & params, std::size_t heads, std::size_t target);
// Widens the shared key/query projections to E*d_k; new columns are zero.
LayerParams expand_key_dim(const LayerParams & params, std::size_t E);

// Redraws the token-mixing tensors of the plan's layers. GLA: every tensor
// of the GLA block. Mamba2: A, theta_k, theta_q, and dt_bias reset to its
// initial value. Everything else is left untouched.
Checkpoint reinitialize(const Checkpoint & ckpt, const ExpansionPlan & plan);

ModelConfig expanded_config(const ModelConfig & before, const ExpansionPlan & plan);
AccountingReport account(const ModelConfig & before, const ExpansionPlan & plan);

struct StatexResult {
    Checkpoint checkpoint;
    AccountingReport report;
};

StatexResult apply_statex(const Checkpoint & ckpt, const ExpansionPlan & plan);

std::string format_report(const AccountingReport & report);
std::string report_csv(const AccountingReport & report);

} // namespace statex
