#include <CLI11.hpp>

#include <Eigen/Core>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "statex/checkpoint.hpp"
#include "statex/model.hpp"
#include "statex/runconfig.hpp"
#include "statex/statex.hpp"
#include "statex/tasks.hpp"
#include "statex/training.hpp"

using namespace statex;
namespace fs = std::filesystem;

namespace {

// Flags shared by every command; each one overrides a RunConfig field.
struct Overrides {
    std::string config;
    std::string preset;
    std::optional<std::string> family, reinit, corpus, post_corpus, task, style, lengths;
    std::optional<std::size_t> layers, dim, heads, dk, dv, vocab, m, E, merge_to, ctx_len, total_tokens, batch_tokens,
        post_ctx_len, post_tokens, post_batch_tokens, digits, samples, n_pairs, kv;
    std::optional<std::uint64_t> seed;
    std::optional<double> max_lr, warmup_frac, post_max_lr;
};

void add_overrides(CLI::App * cmd, Overrides & o) {
    cmd->add_option("--config", o.config, "JSON run config");
    cmd->add_option("--preset", o.preset, "tiny (with --family), tiny-gla, tiny-mamba2, paper-shape-gla, paper-shape-mamba2");
    cmd->add_option("--family", o.family, "gla or mamba2");
    cmd->add_option("--layers", o.layers);
    cmd->add_option("--dim", o.dim);
    cmd->add_option("--heads", o.heads);
    cmd->add_option("--dk", o.dk);
    cmd->add_option("--dv", o.dv);
    cmd->add_option("--vocab", o.vocab);
    cmd->add_option("--m", o.m, "number of expanded layers");
    cmd->add_option("--E", o.E, "Mamba2 key-dimension multiplier");
    cmd->add_option("--merge-to", o.merge_to, "GLA head count after merging");
    cmd->add_option("--reinit", o.reinit, "reinit or inherit");
    cmd->add_option("--seed", o.seed);
    cmd->add_option("--ctx-len", o.ctx_len);
    cmd->add_option("--max-lr", o.max_lr);
    cmd->add_option("--warmup-frac", o.warmup_frac);
    cmd->add_option("--total-tokens", o.total_tokens);
    cmd->add_option("--batch-tokens", o.batch_tokens);
    cmd->add_option("--corpus", o.corpus, "token-id corpus file (one document per line)");
    cmd->add_option("--post-ctx-len", o.post_ctx_len);
    cmd->add_option("--post-tokens", o.post_tokens);
    cmd->add_option("--post-batch-tokens", o.post_batch_tokens);
    cmd->add_option("--post-max-lr", o.post_max_lr);
    cmd->add_option("--post-corpus", o.post_corpus);
    cmd->add_option("--task", o.task, "mqar or passkey");
    cmd->add_option("--digits", o.digits);
    cmd->add_option("--style", o.style, "passkey filler: repeat or distractor");
    cmd->add_option("--lengths", o.lengths, "comma-separated context lengths");
    cmd->add_option("--samples", o.samples, "samples per length");
    cmd->add_option("--n-pairs", o.n_pairs);
    cmd->add_option("--kv", o.kv, "MQAR key/value vocabulary size");
}

std::vector<std::size_t> parse_lengths(const std::string & s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(item, &used);
            if (used != item.size() || v == 0) {
                throw std::invalid_argument(item);
            }
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::logic_error &) {
            throw ConfigError("lengths: not a positive integer: '" + item + "'");
        }
    }
    if (out.empty()) {
        throw ConfigError("lengths: empty list");
    }
    return out;
}

RunConfig resolve(const Overrides & o) {
    std::string name = o.preset.empty() ? "tiny" : o.preset;
    if (name == "tiny") {
        name = "tiny-" + std::string(family_name(parse_family(o.family.value_or("gla"))));
    }
    Json j = to_json(preset(name));
    if (!o.config.empty()) {
        merge_strict(j, read_json_file(o.config));
    }
    auto set = [&](const char * section, const char * key, const auto & v) {
        if (v) {
            j[section][key] = *v;
        }
    };
    if (o.seed) {
        j["seed"] = *o.seed;
    }
    set("model", "family", o.family);
    set("model", "layers", o.layers);
    set("model", "dim", o.dim);
    set("model", "heads", o.heads);
    set("model", "dk", o.dk);
    set("model", "dv", o.dv);
    set("model", "vocab", o.vocab);
    set("plan", "m", o.m);
    set("plan", "E", o.E);
    set("plan", "merge_to", o.merge_to);
    set("plan", "reinit", o.reinit);
    set("train", "ctx_len", o.ctx_len);
    set("train", "max_lr", o.max_lr);
    set("train", "warmup_frac", o.warmup_frac);
    set("train", "total_tokens", o.total_tokens);
    set("train", "batch_tokens", o.batch_tokens);
    set("data", "corpus", o.corpus);
    set("posttrain", "ctx_len", o.post_ctx_len);
    set("posttrain", "total_tokens", o.post_tokens);
    set("posttrain", "batch_tokens", o.post_batch_tokens);
    set("posttrain", "max_lr", o.post_max_lr);
    set("posttrain_data", "corpus", o.post_corpus);
    set("task", "name", o.task);
    set("task", "digits", o.digits);
    set("task", "style", o.style);
    set("task", "samples", o.samples);
    set("task", "n_pairs", o.n_pairs);
    set("task", "kv", o.kv);
    if (o.lengths) {
        j["task"]["lengths"] = parse_lengths(*o.lengths);
    }
    return from_json(j);
}

void prepare_out(const std::string & out) {
    if (out.empty()) {
        throw ConfigError("out: output directory required");
    }
    if (fs::exists(out) && !fs::is_empty(out)) {
        throw ConfigError("out: directory '" + out + "' is not empty");
    }
    fs::create_directories(out);
}

void write_text(const fs::path & path, const std::string & text) {
    std::ofstream f(path, std::ios::binary);
    f << text;
    if (!f) {
        throw IoError("cannot write '" + path.string() + "'");
    }
}

void write_config(const fs::path & dir, const RunConfig & rc) {
    write_text(dir / "config.json", to_json(rc).dump(2) + "\n");
}

Checkpoint load_or_init(const std::string & init, const RunConfig & rc) {
    if (init.empty()) {
        return init_checkpoint(rc.model, rc.seed);
    }
    if (!fs::exists(init)) {
        throw ConfigError("init: file not found: '" + init + "'");
    }
    return load(init);
}

EvalReport run_eval(const Checkpoint & ck, const RunConfig & rc, const std::vector<TaskSample> & samples,
                    const std::string & out) {
    std::vector<std::vector<int>> preds;
    EvalReport rep = evaluate(ck, samples, task_metric(rc.task), &preds);
    std::cout << rep.table();
    if (!out.empty()) {
        write_text(fs::path(out) / "eval.csv", rep.csv());
        write_text(fs::path(out) / "eval_samples.jsonl", samples_jsonl(samples, &preds));
    }
    return rep;
}

void print_progress(const LossRecord & r, std::size_t total) {
    if (r.step % 100 == 0 || r.step + 1 == total) {
        std::fprintf(stderr, "step %zu/%zu lr %.3g loss %.4f\n", r.step, total, r.lr, r.loss);
    }
}

int cmd_train(const Overrides & o, const std::string & out, const std::string & init) {
    RunConfig rc = resolve(o);
    Checkpoint ck = load_or_init(init, rc);
    Corpus corpus = load_corpus(rc.data, rc.train, rc.seed, "train-data", "data");
    prepare_out(out);
    write_config(out, rc);
    const std::size_t total = rc.train.total_steps();
    TrainResult res = train(ck, corpus, rc.train, [&](const LossRecord & r) { print_progress(r, total); });
    res.checkpoint.meta.stage = init.empty() ? "pretrain" : "posttrain";
    save(res.checkpoint, fs::path(out) / "model.ckpt");
    write_text(fs::path(out) / "loss.csv", res.log.csv());
    std::cout << "trained " << res.log.records.size() << " steps, final loss " << res.log.records.back().loss
              << ", wrote " << out << "\n";
    return 0;
}

int cmd_expand(const Overrides & o, const std::string & out, const std::string & in) {
    RunConfig rc = resolve(o);
    std::string report;
    std::string csv;
    if (in.empty()) {
        // Accounting only: paper-shape models are too large to materialize.
        AccountingReport r = account(rc.model, rc.plan);
        report = format_report(r);
        csv = report_csv(r);
    } else {
        if (!fs::exists(in)) {
            throw ConfigError("in: file not found: '" + in + "'");
        }
        Checkpoint ck = load(in);
        ExpansionPlan plan = rc.plan;
        if (o.family && parse_family(*o.family) != ck.config.family) {
            throw ConfigError("family: --family " + *o.family + " does not match checkpoint family " +
                              std::string(family_name(ck.config.family)));
        }
        plan.family = ck.config.family;
        StatexResult sx = apply_statex(ck, plan);
        report = format_report(sx.report);
        csv = report_csv(sx.report);
        if (!out.empty()) {
            prepare_out(out);
            save(sx.checkpoint, fs::path(out) / "expanded.ckpt");
        }
    }
    if (!out.empty()) {
        if (!fs::exists(out)) {
            prepare_out(out);
        }
        write_text(fs::path(out) / "accounting.txt", report);
        write_text(fs::path(out) / "accounting.csv", csv);
        write_config(out, rc);
    }
    std::cout << report;
    return 0;
}

int cmd_eval(const Overrides & o, const std::string & out, const std::string & ckpt) {
    RunConfig rc = resolve(o);
    if (!fs::exists(ckpt)) {
        throw ConfigError("ckpt: file not found: '" + ckpt + "'");
    }
    Checkpoint ck = load(ckpt);
    if (rc.task.name == "passkey" && ck.config.vocab < kCharVocab) {
        throw ConfigError("task: passkey needs a character vocabulary of " + std::to_string(kCharVocab) +
                          ", checkpoint has " + std::to_string(ck.config.vocab));
    }
    const auto samples = task_samples(rc.task, rc.seed);
    if (!out.empty()) {
        prepare_out(out);
        write_config(out, rc);
    }
    run_eval(ck, rc, samples, out);
    return 0;
}

int cmd_pipeline(const Overrides & o, const std::string & out, const std::string & pretrained, bool lpt) {
    RunConfig rc = resolve(o);
    const Corpus post = load_corpus(rc.posttrain_data, rc.posttrain, rc.seed, "posttrain-data", "posttrain_data");
    const auto samples = task_samples(rc.task, rc.seed);
    std::optional<ExpansionPlan> plan;
    if (!lpt) {
        plan = rc.plan;
    }
    prepare_out(out);
    write_config(out, rc);
    PipelineResult res;
    if (pretrained.empty()) {
        PipelineSpec spec;
        spec.initial = init_checkpoint(rc.model, rc.seed);
        spec.pretrain = rc.train;
        spec.pretrain_corpus = load_corpus(rc.data, rc.train, rc.seed, "train-data", "data");
        spec.plan = plan;
        spec.posttrain = rc.posttrain;
        spec.posttrain_corpus = post;
        spec.out_dir = out;
        res = run_pipeline(spec);
    } else {
        if (!fs::exists(pretrained)) {
            throw ConfigError("pretrained: file not found: '" + pretrained + "'");
        }
        res = post_train(load(pretrained), plan, rc.posttrain, post);
        if (res.report) {
            save(res.expanded, fs::path(out) / "expanded.ckpt");
            write_text(fs::path(out) / "accounting.txt", format_report(*res.report));
            write_text(fs::path(out) / "accounting.csv", report_csv(*res.report));
        }
        save(res.final, fs::path(out) / "posttrain.ckpt");
        write_text(fs::path(out) / "posttrain_loss.csv", res.posttrain_log.csv());
    }
    run_eval(res.final, rc, samples, out);
    return 0;
}

// Loss CSV of a run directory, preferring the post-training log.
std::optional<fs::path> loss_file(const fs::path & dir) {
    for (const char * name : {"posttrain_loss.csv", "loss.csv"}) {
        if (fs::exists(dir / name)) {
            return dir / name;
        }
    }
    return std::nullopt;
}

std::string read_text(const fs::path & p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) {
        throw IoError("cannot read '" + p.string() + "'");
    }
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// "task,metric,length" -> accuracy, from an eval.csv.
std::map<std::string, double> read_eval(const fs::path & p) {
    std::map<std::string, double> out;
    std::stringstream ss(read_text(p));
    std::string line;
    std::getline(ss, line);
    while (std::getline(ss, line)) {
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            f.push_back(cell);
        }
        if (f.size() != 7) {
            throw IoError("malformed eval row in '" + p.string() + "': " + line);
        }
        out[f[0] + ":" + f[1] + ":" + f[2]] = std::stod(f[6]);
    }
    return out;
}

int cmd_compare(const std::string & a, const std::string & b, const std::string & out) {
    std::ostringstream os;
    os << "kind,key,a,b,delta\n";
    char buf[128];
    auto row = [&](const std::string & kind, const std::string & key, double x, double y) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", x, y, y - x);
        os << kind << ',' << key << ',' << buf << '\n';
    };
    bool any = false;
    const bool ea = fs::exists(fs::path(a) / "eval.csv");
    const bool eb = fs::exists(fs::path(b) / "eval.csv");
    if (ea != eb) {
        throw IoError("compare: eval.csv present in only one of '" + a + "' and '" + b + "'");
    }
    if (ea) {
        const auto ra = read_eval(fs::path(a) / "eval.csv");
        const auto rb = read_eval(fs::path(b) / "eval.csv");
        for (const auto & [key, x] : ra) {
            auto it = rb.find(key);
            if (it != rb.end()) {
                row("accuracy", key, x, it->second);
            }
        }
        any = true;
    }
    const auto la = loss_file(a);
    const auto lb = loss_file(b);
    if (la.has_value() != lb.has_value()) {
        throw IoError("compare: loss log present in only one of '" + a + "' and '" + b + "'");
    }
    if (la) {
        const LossLog xa = LossLog::parse_csv(read_text(*la));
        const LossLog xb = LossLog::parse_csv(read_text(*lb));
        const std::size_t n = std::min(xa.records.size(), xb.records.size());
        for (std::size_t i = 0; i < n; ++i) {
            row("loss", std::to_string(xa.records[i].step), xa.records[i].loss, xb.records[i].loss);
        }
        any = true;
    }
    if (!any) {
        throw IoError("compare: no eval.csv or loss log in '" + a + "' and '" + b + "'");
    }
    std::cout << os.str();
    if (!out.empty()) {
        prepare_out(out);
        write_text(fs::path(out) / "compare.csv", os.str());
    }
    return 0;
}

void apply_thread_cap() {
    const char * env = std::getenv("STATEX_THREADS");
    if (!env) {
        return;
    }
    char * end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*env == '\0' || *end != '\0' || n < 1) {
        throw ConfigError("STATEX_THREADS: expected a positive integer, got '" + std::string(env) + "'");
    }
    Eigen::setNbThreads(static_cast<int>(n));
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"State expansion experiments for gated linear attention and Mamba2 language models"};
    app.require_subcommand(1);

    Overrides o;
    std::string out, in, ckpt, init, pretrained, run_a, run_b;
    bool lpt = false;

    auto * train = app.add_subcommand("train", "train a model, writing model.ckpt, loss.csv and config.json");
    add_overrides(train, o);
    train->add_option("--out", out, "output directory")->required();
    train->add_option("--init", init, "start from this checkpoint instead of a fresh model");

    auto * expand = app.add_subcommand("expand", "expand a checkpoint's state, or account a config without one");
    add_overrides(expand, o);
    expand->add_option("--in", in, "checkpoint to expand");
    expand->add_option("--out", out, "output directory");

    auto * eval = app.add_subcommand("eval", "evaluate a checkpoint on a recall task");
    add_overrides(eval, o);
    eval->add_option("--ckpt", ckpt, "checkpoint")->required();
    eval->add_option("--out", out, "output directory");

    auto * pipeline = app.add_subcommand("pipeline", "pre-train, expand, post-train and evaluate");
    add_overrides(pipeline, o);
    pipeline->add_option("--out", out, "output directory")->required();
    pipeline->add_option("--pretrained", pretrained, "skip pre-training and start from this checkpoint");
    pipeline->add_flag("--lpt", lpt, "post-train without expansion");

    auto * compare = app.add_subcommand("compare", "compare two run directories as CSV");
    compare->add_option("run_a", run_a)->required();
    compare->add_option("run_b", run_b)->required();
    compare->add_option("--out", out, "output directory");

    auto * inspect_cmd = app.add_subcommand("inspect", "list tensor names, shapes and checksums");
    inspect_cmd->add_option("ckpt", ckpt)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp & e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp & e) {
        return app.exit(e);
    } catch (const CLI::ParseError & e) {
        app.exit(e);
        return 2;
    }

    try {
        apply_thread_cap();
        if (*train) {
            return cmd_train(o, out, init);
        }
        if (*expand) {
            return cmd_expand(o, out, in);
        }
        if (*eval) {
            return cmd_eval(o, out, ckpt);
        }
        if (*pipeline) {
            return cmd_pipeline(o, out, pretrained, lpt);
        }
        if (*compare) {
            return cmd_compare(run_a, run_b, out);
        }
        if (*inspect_cmd) {
            if (!fs::exists(ckpt)) {
                throw ConfigError("ckpt: file not found: '" + ckpt + "'");
            }
            std::cout << inspect(load(ckpt));
            return 0;
        }
    } catch (const ConfigError & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError & e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
