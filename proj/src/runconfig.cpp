#include "statex/runconfig.hpp"

#include <fstream>

namespace statex {

namespace {

Json train_json(const TrainConfig & t) {
    return Json{{"max_lr", t.max_lr},           {"warmup_frac", t.warmup_frac}, {"min_lr", t.min_lr},
                {"total_tokens", t.total_tokens}, {"batch_tokens", t.batch_tokens}, {"ctx_len", t.ctx_len},
                {"grad_clip", t.grad_clip},     {"beta1", t.beta1},             {"beta2", t.beta2},
                {"eps", t.eps},                 {"weight_decay", t.weight_decay}};
}

TrainConfig train_from(const Json & j) {
    TrainConfig t;
    t.max_lr = j.at("max_lr").get<double>();
    t.warmup_frac = j.at("warmup_frac").get<double>();
    t.min_lr = j.at("min_lr").get<double>();
    t.total_tokens = j.at("total_tokens").get<std::size_t>();
    t.batch_tokens = j.at("batch_tokens").get<std::size_t>();
    t.ctx_len = j.at("ctx_len").get<std::size_t>();
    t.grad_clip = j.at("grad_clip").get<double>();
    t.beta1 = j.at("beta1").get<double>();
    t.beta2 = j.at("beta2").get<double>();
    t.eps = j.at("eps").get<double>();
    t.weight_decay = j.at("weight_decay").get<double>();
    return t;
}

Json data_json(const DataConfig & d) {
    return Json{{"corpus", d.corpus},
                {"synthetic", d.synthetic},
                {"kv", d.kv},
                {"min_pairs", d.min_pairs},
                {"max_pairs", d.max_pairs}};
}

DataConfig data_from(const Json & j) {
    DataConfig d;
    d.corpus = j.at("corpus").get<std::string>();
    d.synthetic = j.at("synthetic").get<std::string>();
    d.kv = j.at("kv").get<std::size_t>();
    d.min_pairs = j.at("min_pairs").get<std::size_t>();
    d.max_pairs = j.at("max_pairs").get<std::size_t>();
    return d;
}

ModelConfig model(Family f, std::size_t layers, std::size_t dim, std::size_t heads, std::size_t dk, std::size_t dv,
                  std::size_t vocab) {
    ModelConfig c;
    c.family = f;
    c.n_layers = layers;
    c.d_model = dim;
    c.n_heads = heads;
    c.d_k = dk;
    c.d_v = dv;
    c.vocab = vocab;
    return c.finalize();
}

// Recall curriculum shared by the tiny presets: short-context MQAR with few
// pairs for pre-training, then longer contexts with up to 15 pairs.
RunConfig tiny(Family f) {
    RunConfig rc;
    rc.model = model(f, 4, 128, 4, 4, 32, mqar_vocab(16));
    rc.train.max_lr = 1e-3;
    rc.train.total_tokens = 1'200'000;
    rc.train.batch_tokens = 256;
    rc.train.ctx_len = 16;
    rc.data = DataConfig{"", "mqar", 16, 1, 3};
    rc.posttrain = rc.train;
    rc.posttrain.total_tokens = 1'000'000;
    rc.posttrain.batch_tokens = 1024;
    rc.posttrain.ctx_len = 64;
    rc.posttrain_data = DataConfig{"", "mqar", 16, 1, 15};
    rc.plan.family = f;
    rc.plan.m = 2;
    rc.task.lengths = {64};
    rc.task.n_pairs = 12;
    return rc;
}

RunConfig paper_shape(Family f) {
    RunConfig rc;
    rc.model = f == Family::Gla ? model(f, 24, 2048, 4, 256, 512, 50304) : model(f, 48, 2048, 64, 128, 64, 50304);
    rc.plan.family = f;
    rc.plan.m = 4;
    return rc;
}

} // namespace

RunConfig & RunConfig::sync_seeds() {
    train.seed = seed;
    posttrain.seed = seed;
    plan.seed = seed;
    plan.family = model.family;
    return *this;
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    posttrain.validate();
    if (task.name != "mqar" && task.name != "passkey") {
        throw ConfigError("task.name: expected mqar or passkey, got '" + task.name + "'");
    }
    if (task.lengths.empty()) {
        throw ConfigError("task.lengths: must not be empty");
    }
}

Json to_json(const RunConfig & rc) {
    const ModelConfig & m = rc.model;
    Json j;
    j["seed"] = rc.seed;
    j["model"] = Json{{"family", family_name(m.family)},
                      {"layers", m.n_layers},
                      {"dim", m.d_model},
                      {"heads", m.n_heads},
                      {"dk", m.d_k},
                      {"dv", m.d_v},
                      {"vocab", m.vocab},
                      {"ffn_ratio", m.ffn_ratio},
                      {"delimiter", m.delimiter_token},
                      {"delta_activation", delta_activation_name(m.delta_activation)}};
    j["train"] = train_json(rc.train);
    j["data"] = data_json(rc.data);
    j["posttrain"] = train_json(rc.posttrain);
    j["posttrain_data"] = data_json(rc.posttrain_data);
    j["plan"] = Json{{"m", rc.plan.m},
                     {"merge_to", rc.plan.gla_merge_to},
                     {"E", rc.plan.ssm_E},
                     {"reinit", reinit_policy_name(rc.plan.reinit_policy)}};
    j["task"] = Json{{"name", rc.task.name},       {"digits", rc.task.digits},   {"style", rc.task.style},
                     {"lengths", rc.task.lengths}, {"samples", rc.task.samples}, {"n_pairs", rc.task.n_pairs},
                     {"kv", rc.task.kv}};
    return j;
}

RunConfig from_json(const Json & overlay) {
    Json j = to_json(preset("tiny-gla"));
    merge_strict(j, overlay);
    try {
        RunConfig rc;
        rc.seed = j.at("seed").get<std::uint64_t>();
        const Json & m = j.at("model");
        rc.model.family = parse_family(m.at("family").get<std::string>());
        rc.model.n_layers = m.at("layers").get<std::size_t>();
        rc.model.d_model = m.at("dim").get<std::size_t>();
        rc.model.n_heads = m.at("heads").get<std::size_t>();
        rc.model.d_k = m.at("dk").get<std::size_t>();
        rc.model.d_v = m.at("dv").get<std::size_t>();
        rc.model.vocab = m.at("vocab").get<std::size_t>();
        rc.model.ffn_ratio = m.at("ffn_ratio").get<double>();
        rc.model.delimiter_token = m.at("delimiter").get<int>();
        rc.model.delta_activation = parse_delta_activation(m.at("delta_activation").get<std::string>());
        rc.model.finalize();
        rc.train = train_from(j.at("train"));
        rc.data = data_from(j.at("data"));
        rc.posttrain = train_from(j.at("posttrain"));
        rc.posttrain_data = data_from(j.at("posttrain_data"));
        const Json & p = j.at("plan");
        rc.plan.m = p.at("m").get<std::size_t>();
        rc.plan.gla_merge_to = p.at("merge_to").get<std::size_t>();
        rc.plan.ssm_E = p.at("E").get<std::size_t>();
        rc.plan.reinit_policy = parse_reinit_policy(p.at("reinit").get<std::string>());
        const Json & t = j.at("task");
        rc.task.name = t.at("name").get<std::string>();
        rc.task.digits = t.at("digits").get<std::size_t>();
        rc.task.style = t.at("style").get<std::string>();
        rc.task.lengths = t.at("lengths").get<std::vector<std::size_t>>();
        rc.task.samples = t.at("samples").get<std::size_t>();
        rc.task.n_pairs = t.at("n_pairs").get<std::size_t>();
        rc.task.kv = t.at("kv").get<std::size_t>();
        rc.sync_seeds();
        rc.validate();
        return rc;
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

void merge_strict(Json & base, const Json & overlay, const std::string & path) {
    if (!overlay.is_object()) {
        throw ConfigError("config: expected an object at '" + (path.empty() ? std::string("<root>") : path) + "'");
    }
    for (const auto & [key, value] : overlay.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) {
            throw ConfigError("config: unknown key '" + here + "'");
        }
        Json & slot = base[key];
        if (slot.is_object()) {
            merge_strict(slot, value, here);
        } else {
            slot = value;
        }
    }
}

RunConfig preset(std::string_view name) {
    RunConfig rc;
    if (name == "tiny-gla") {
        rc = tiny(Family::Gla);
    } else if (name == "tiny-mamba2") {
        rc = tiny(Family::Mamba2);
    } else if (name == "paper-shape-gla") {
        rc = paper_shape(Family::Gla);
    } else if (name == "paper-shape-mamba2") {
        rc = paper_shape(Family::Mamba2);
    } else {
        throw ConfigError("preset: unknown '" + std::string(name) + "'");
    }
    return rc.sync_seeds();
}

std::vector<std::string> preset_names() {
    return {"tiny-gla", "tiny-mamba2", "paper-shape-gla", "paper-shape-mamba2"};
}

Json read_json_file(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot read '" + path.string() + "'");
    }
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError("config: '" + path.string() + "': " + e.what());
    }
}

Corpus load_corpus(const DataConfig & data, const TrainConfig & train, std::uint64_t seed, std::string_view stream,
                   const std::string & field) {
    if (!data.corpus.empty()) {
        if (!std::filesystem::exists(data.corpus)) {
            throw ConfigError(field + ".corpus: file not found: '" + data.corpus + "'");
        }
        return read_token_corpus(data.corpus);
    }
    if (data.synthetic != "mqar") {
        throw ConfigError(field + ".corpus: required (no file given and synthetic is '" + data.synthetic + "')");
    }
    if (train.ctx_len < 2) {
        throw ConfigError(field + ": ctx_len must be >= 2");
    }
    // One document per chunk: ctx_len - 1 tokens plus the delimiter.
    const std::size_t docs = train.total_steps() * train.sequences_per_step() + 1;
    Rng rng = Rng(seed).derive(stream);
    return mqar_corpus(docs, data.min_pairs, data.max_pairs, data.kv, train.ctx_len - 1, rng);
}

std::vector<TaskSample> task_samples(const TaskConfig & task, std::uint64_t seed) {
    Rng rng = Rng(seed).derive("eval-" + task.name);
    std::vector<TaskSample> out;
    out.reserve(task.lengths.size() * task.samples);
    for (std::size_t len : task.lengths) {
        for (std::size_t i = 0; i < task.samples; ++i) {
            if (task.name == "mqar") {
                out.push_back(gen_mqar(task.n_pairs, task.kv, len, rng));
            } else if (task.name == "passkey") {
                out.push_back(gen_passkey(len, task.digits, parse_passkey_style(task.style), rng));
            } else {
                throw ConfigError("task.name: expected mqar or passkey, got '" + task.name + "'");
            }
        }
    }
    return out;
}

Metric task_metric(const TaskConfig & task) {
    return task.name == "mqar" ? Metric::ExactTokenAccuracy : Metric::Contains;
}

} // namespace statex
