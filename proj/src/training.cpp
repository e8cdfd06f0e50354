#include "statex/training.hpp"

#include "statex/model.hpp"

#include <cmath>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace statex {

void TrainConfig::validate() const {
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) {
        throw ConfigError("warmup_frac: must be in [0, 1)");
    }
    if (ctx_len < 2) {
        throw ConfigError("ctx_len: must be >= 2");
    }
    if (batch_tokens == 0 || batch_tokens % ctx_len != 0) {
        throw ConfigError("batch_tokens: must be a positive multiple of ctx_len (" + std::to_string(ctx_len) + ")");
    }
    if (total_tokens < batch_tokens) {
        throw ConfigError("total_tokens: must be at least batch_tokens");
    }
    if (max_lr < 0.0 || min_lr < 0.0 || min_lr > max_lr) {
        throw ConfigError("max_lr/min_lr: need 0 <= min_lr <= max_lr");
    }
    if (!(grad_clip > 0.0)) {
        throw ConfigError("grad_clip: must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
        throw ConfigError("optimizer: betas must be in [0, 1) and eps positive");
    }
}

double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig & cfg) {
    const double warmup = cfg.warmup_frac * static_cast<double>(total_steps);
    const double s = static_cast<double>(std::min(step, total_steps));
    if (s < warmup) {
        return cfg.max_lr * s / warmup;
    }
    const double span = static_cast<double>(total_steps) - warmup;
    if (span <= 0.0) {
        return cfg.max_lr;
    }
    const double progress = (s - warmup) / span;
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void LossLog::add(const LossRecord & r) {
    if (!records.empty() && r.step <= records.back().step) {
        throw ConfigError("loss log: steps must be strictly increasing");
    }
    records.push_back(r);
}

std::string LossLog::csv() const {
    std::string out = "step,tokens,lr,loss\n";
    char line[128];
    for (const auto & r : records) {
        std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g\n", r.step, r.tokens, r.lr, r.loss);
        out += line;
    }
    return out;
}

LossLog LossLog::parse_csv(const std::string & text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("step,tokens,lr,loss", 0) != 0) {
        throw IoError("loss log: missing header 'step,tokens,lr,loss'");
    }
    LossLog log;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        LossRecord r;
        if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf", &r.step, &r.tokens, &r.lr, &r.loss) != 4) {
            throw IoError("loss log: malformed line '" + line + "'");
        }
        log.add(r);
    }
    return log;
}

double LossLog::mean(std::size_t begin, std::size_t end) const {
    end = std::min(end, records.size());
    if (begin >= end) {
        throw ConfigError("loss log: empty window");
    }
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        s += records[i].loss;
    }
    return s / static_cast<double>(end - begin);
}

std::vector<std::vector<int>> build_batches(const Corpus & corpus, int delimiter, std::size_t ctx_len) {
    if (corpus.empty()) {
        throw ConfigError("corpus: empty");
    }
    if (ctx_len < 2) {
        throw ConfigError("ctx_len: must be >= 2");
    }
    std::vector<std::vector<int>> chunks;
    std::vector<int> cur;
    cur.reserve(ctx_len);
    auto push = [&](int t) {
        cur.push_back(t);
        if (cur.size() == ctx_len) {
            chunks.push_back(std::move(cur));
            cur.clear();
            cur.reserve(ctx_len);
        }
    };
    for (std::size_t d = 0; d < corpus.size(); ++d) {
        if (d > 0) {
            push(delimiter);
        }
        for (int t : corpus[d]) {
            push(t);
        }
    }
    return chunks;
}

Corpus read_token_corpus(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("corpus: cannot open '" + path.string() + "'");
    }
    Corpus corpus;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        Document doc;
        std::string tok;
        while (ls >> tok) {
            try {
                std::size_t used = 0;
                long v = std::stol(tok, &used);
                if (used != tok.size() || v < 0) {
                    throw std::invalid_argument(tok);
                }
                doc.push_back(static_cast<int>(v));
            } catch (const std::logic_error &) {
                throw IoError("corpus: '" + path.string() + "' line " + std::to_string(lineno) +
                              ": bad token id '" + tok + "'");
            }
        }
        if (!doc.empty()) {
            corpus.push_back(std::move(doc));
        }
    }
    if (corpus.empty()) {
        throw ConfigError("corpus: '" + path.string() + "' has no documents");
    }
    return corpus;
}

namespace {

struct Adam {
    TensorMap m;
    TensorMap v;
    std::size_t t = 0;
};

bool decays(const Tensor & t) { return t.ndim() == 2; }

// Activations are large short-lived buffers; keeping them on the heap
// instead of fresh mmaps avoids page-faulting every step.
void keep_heap_warm() {
#if defined(__GLIBC__)
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)once;
#endif
}

} // namespace

TrainResult train(Checkpoint ckpt, const Corpus & corpus, const TrainConfig & cfg, const StepHook & hook) {
    cfg.validate();
    keep_heap_warm();
    const auto chunks = build_batches(corpus, ckpt.config.delimiter_token, cfg.ctx_len);
    const std::size_t per_step = cfg.sequences_per_step();
    if (chunks.size() < per_step) {
        throw ConfigError("corpus: yields " + std::to_string(chunks.size()) + " chunks of " +
                          std::to_string(cfg.ctx_len) + " tokens, fewer than one batch (" + std::to_string(per_step) +
                          ")");
    }
    for (const auto & c : chunks) {
        for (int t : c) {
            if (t < 0 || static_cast<std::size_t>(t) >= ckpt.config.vocab) {
                throw ConfigError("corpus: token id " + std::to_string(t) + " outside vocab " +
                                  std::to_string(ckpt.config.vocab));
            }
        }
    }

    const std::size_t steps = cfg.total_steps();
    Rng order_rng = Rng(cfg.seed).derive("batch-order");
    std::vector<std::size_t> order(chunks.size());
    std::size_t cursor = order.size();

    Adam opt{zero_like(ckpt.tensors), zero_like(ckpt.tensors), 0};
    TensorMap grads = zero_like(ckpt.tensors);
    LossLog log;
    Batch batch;
    batch.seq_len = cfg.ctx_len - 1;

    for (std::size_t step = 0; step < steps; ++step) {
        batch.inputs.clear();
        batch.targets.clear();
        for (std::size_t b = 0; b < per_step; ++b) {
            if (cursor == order.size()) {
                for (std::size_t i = 0; i < order.size(); ++i) {
                    order[i] = i;
                }
                order_rng.shuffle(std::span<std::size_t>(order));
                cursor = 0;
            }
            const auto & c = chunks[order[cursor++]];
            batch.inputs.insert(batch.inputs.end(), c.begin(), c.end() - 1);
            batch.targets.insert(batch.targets.end(), c.begin() + 1, c.end());
        }

        double loss = 0.0;
        try {
            loss = model_loss_and_grad(ckpt, batch, grads);
        } catch (const NumericError & e) {
            throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }

        double norm2 = 0.0;
        for (const auto & [name, g] : grads) {
            for (double v : g.values()) {
                norm2 += v * v;
            }
        }
        const double norm = std::sqrt(norm2);
        if (!std::isfinite(norm)) {
            throw NumericError("step " + std::to_string(step) + ": non-finite gradient norm");
        }
        const double scale = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

        const double lr = cosine_lr(step + 1, steps, cfg);
        ++opt.t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
        for (auto & [name, p] : ckpt.tensors) {
            auto pv = p.span();
            auto gv = grads.at(name).span();
            auto mv = opt.m.at(name).span();
            auto vv = opt.v.at(name).span();
            const double wd = decays(p) ? cfg.weight_decay : 0.0;
            for (std::size_t i = 0; i < pv.size(); ++i) {
                const double g = gv[i] * scale;
                mv[i] = cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * g;
                vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g * g;
                const double mhat = mv[i] / bc1;
                const double vhat = vv[i] / bc2;
                pv[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * pv[i]);
            }
        }
        ckpt.meta.tokens_seen += cfg.batch_tokens;
        LossRecord rec{step, ckpt.meta.tokens_seen, lr, loss};
        log.add(rec);
        if (hook) {
            hook(rec);
        }
    }
    return {std::move(ckpt), std::move(log)};
}

PipelineResult post_train(const Checkpoint & pretrained, const std::optional<ExpansionPlan> & plan,
                          const TrainConfig & cfg, const Corpus & corpus) {
    PipelineResult r;
    r.pretrained = pretrained;
    if (plan) {
        auto ex = apply_statex(pretrained, *plan);
        r.expanded = std::move(ex.checkpoint);
        r.report = std::move(ex.report);
    } else {
        r.expanded = pretrained;
    }
    auto out = train(r.expanded, corpus, cfg);
    r.final = std::move(out.checkpoint);
    r.final.meta.stage = plan ? "statex" : "lpt";
    r.posttrain_log = std::move(out.log);
    return r;
}

PipelineResult run_pipeline(const PipelineSpec & spec) {
    auto pre = train(spec.initial, spec.pretrain_corpus, spec.pretrain);
    pre.checkpoint.meta.stage = "pretrain";
    PipelineResult r = post_train(pre.checkpoint, spec.plan, spec.posttrain, spec.posttrain_corpus);
    r.pretrain_log = std::move(pre.log);
    if (spec.out_dir) {
        std::filesystem::create_directories(*spec.out_dir);
        auto write = [&](const std::string & name, const std::string & text) {
            std::ofstream out(*spec.out_dir / name, std::ios::binary);
            out << text;
            if (!out) {
                throw IoError("cannot write '" + (*spec.out_dir / name).string() + "'");
            }
        };
        save(r.pretrained, *spec.out_dir / "pretrain.ckpt");
        write("pretrain_loss.csv", r.pretrain_log.csv());
        if (r.report) {
            save(r.expanded, *spec.out_dir / "expanded.ckpt");
            write("accounting.txt", format_report(*r.report));
            write("accounting.csv", report_csv(*r.report));
        }
        save(r.final, *spec.out_dir / "posttrain.ckpt");
        write("posttrain_loss.csv", r.posttrain_log.csv());
    }
    return r;
}

} // namespace statex
