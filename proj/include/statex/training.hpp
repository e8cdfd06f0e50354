#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "statex/checkpoint.hpp"
#include "statex/statex.hpp"

namespace statex {

struct TrainConfig {
    double max_lr = 3e-4;
    double warmup_frac = 0.05;
    double min_lr = 0.0;
    std::size_t total_tokens = 1 << 20;
    std::size_t batch_tokens = 8192;
    std::size_t ctx_len = 256;
    std::uint64_t seed = 0;
    double grad_clip = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const;
    std::size_t total_steps() const { return total_tokens / batch_tokens; }
    std::size_t sequences_per_step() const { return batch_tokens / ctx_len; }
};

// Linear warmup to max_lr over warmup_frac*total_steps, then cosine to min_lr.
double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig & cfg);

struct LossRecord {
    std::size_t step = 0;
    std::size_t tokens = 0;
    double lr = 0.0;
    double loss = 0.0;

    friend bool operator==(const LossRecord &, const LossRecord &) = default;
};

struct LossLog {
    std::vector<LossRecord> records;

    void add(const LossRecord & r);
    std::string csv() const;
    static LossLog parse_csv(const std::string & text);
    // Mean loss over records [begin, end).
    double mean(std::size_t begin, std::size_t end) const;

    friend bool operator==(const LossLog &, const LossLog &) = default;
};

using Document = std::vector<int>;
using Corpus = std::vector<Document>;

// Concatenates documents with the delimiter between them and cuts
// ctx_len-token chunks; the trailing partial chunk is dropped.
std::vector<std::vector<int>> build_batches(const Corpus & corpus, int delimiter, std::size_t ctx_len);

// One document per non-empty line, whitespace-separated token ids.
Corpus read_token_corpus(const std::filesystem::path & path);

struct TrainResult {
    Checkpoint checkpoint;
    LossLog log;
};

using StepHook = std::function<void(const LossRecord &)>;

// Next-token cross-entropy with AdamW and global-norm clipping. Each chunk
// of ctx_len tokens yields ctx_len-1 input/target pairs. Chunks are visited
// in a seeded order, reshuffled every pass.
TrainResult train(Checkpoint ckpt, const Corpus & corpus, const TrainConfig & cfg, const StepHook & hook = {});

struct PipelineSpec {
    Checkpoint initial;
    TrainConfig pretrain;
    Corpus pretrain_corpus;
    std::optional<ExpansionPlan> plan;
    TrainConfig posttrain;
    Corpus posttrain_corpus;
    // Written as <stage>.ckpt and <stage>_loss.csv when set.
    std::optional<std::filesystem::path> out_dir;
};

struct PipelineResult {
    Checkpoint pretrained;
    Checkpoint expanded;
    Checkpoint final;
    LossLog pretrain_log;
    LossLog posttrain_log;
    std::optional<AccountingReport> report;
};

// Pre-train, optionally expand, then post-train. Without a plan this is the
// long-context post-training baseline.
PipelineResult run_pipeline(const PipelineSpec & spec);

// Post-train only, from an existing pre-trained checkpoint.
PipelineResult post_train(const Checkpoint & pretrained, const std::optional<ExpansionPlan> & plan,
                          const TrainConfig & cfg, const Corpus & corpus);

} // namespace statex
