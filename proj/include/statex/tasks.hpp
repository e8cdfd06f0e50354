#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "statex/checkpoint.hpp"
#include "statex/rng.hpp"
#include "statex/training.hpp"

namespace statex {

// Character tokenizer: one token per 7-bit ASCII byte; id 0 is reserved for
// the document delimiter.
inline constexpr std::size_t kCharVocab = 128;
std::vector<int> encode_text(std::string_view text);
std::string decode_tokens(std::span<const int> tokens);

inline constexpr std::size_t kDefaultEvalSamples = 256;

enum class PasskeyStyle { RepeatFiller, DistractorFiller };
enum class Metric { Contains, ExactTokenAccuracy };

std::string_view metric_name(Metric m);
Metric parse_metric(std::string_view s);
PasskeyStyle parse_passkey_style(std::string_view s);

struct TaskSample {
    std::string task;
    std::vector<int> prompt;
    std::vector<int> answer;
    // Teacher-forced tasks: the prediction at prompt[answer_positions[i]]
    // is scored against answer[i]. Empty for generated answers.
    std::vector<std::size_t> answer_positions;
    std::size_t ctx_len = 0;
    std::size_t n_pairs = 0;
    // Needle insertion slot and the number of available slots.
    std::size_t key_position = 0;
    std::size_t depth_slots = 0;
};

// The passkey sits at a uniformly drawn sentence boundary of the filler.
TaskSample gen_passkey(std::size_t ctx_len, std::size_t digits, PasskeyStyle style, Rng & rng);

// Token layout over exactly ctx_len tokens:
//   k1 v1 ... kn vn  q1 a1 ... qn an  [pad ...]
// Keys are distinct ids in [1, vocab_kv], values are in [vocab_kv+1,
// 2*vocab_kv], and every key is queried once in random order.
TaskSample gen_mqar(std::size_t n_pairs, std::size_t vocab_kv, std::size_t ctx_len, Rng & rng);
inline std::size_t mqar_vocab(std::size_t vocab_kv) { return 2 * vocab_kv + 1; }

// Training documents of doc_len tokens with n_pairs drawn from [lo, hi].
Corpus mqar_corpus(std::size_t n_docs, std::size_t lo, std::size_t hi, std::size_t vocab_kv, std::size_t doc_len,
                   Rng & rng);

class Predictor {
public:
    virtual ~Predictor() = default;
    // Teacher-forced metrics return one token per answer position; generated
    // metrics return the decoded continuation of the prompt.
    virtual std::vector<std::vector<int>> predict(std::span<const TaskSample> samples, Metric metric) = 0;
};

// Greedy predictions from a checkpoint.
class ModelPredictor : public Predictor {
public:
    explicit ModelPredictor(const Checkpoint & ckpt, std::size_t extra_tokens = 2)
        : ckpt_(ckpt), extra_(extra_tokens) {}
    std::vector<std::vector<int>> predict(std::span<const TaskSample> samples, Metric metric) override;

private:
    const Checkpoint & ckpt_;
    std::size_t extra_;
};

// Returns the ground truth; a scorer sanity check.
class EchoPredictor : public Predictor {
public:
    std::vector<std::vector<int>> predict(std::span<const TaskSample> samples, Metric metric) override;
};

struct EvalRow {
    std::size_t length = 0;
    std::size_t samples = 0;
    // Scored units: samples for contains, answer tokens for exact-token.
    std::size_t units = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
};

struct EvalReport {
    std::string task;
    Metric metric = Metric::ExactTokenAccuracy;
    std::vector<EvalRow> rows;

    std::string csv() const;
    std::string table() const;
    double overall() const;
};

EvalReport evaluate(Predictor & predictor, const std::vector<TaskSample> & samples, Metric metric,
                    std::vector<std::vector<int>> * predictions = nullptr);
EvalReport evaluate(const Checkpoint & ckpt, const std::vector<TaskSample> & samples, Metric metric,
                    std::vector<std::vector<int>> * predictions = nullptr);

// One JSON object per line for inspection.
std::string samples_jsonl(const std::vector<TaskSample> & samples,
                          const std::vector<std::vector<int>> * predictions = nullptr);

} // namespace statex
