#include "statex/tasks.hpp"

#include "statex/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>

namespace statex {

std::vector<int> encode_text(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (c == 0 || c >= kCharVocab) {
            throw ConfigError("tokenizer: character code " + std::to_string(c) + " is outside printable ASCII");
        }
        out.push_back(c);
    }
    return out;
}

std::string decode_tokens(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        out.push_back(t > 0 && t < static_cast<int>(kCharVocab) ? static_cast<char>(t) : '?');
    }
    return out;
}

std::string_view metric_name(Metric m) {
    return m == Metric::Contains ? "contains" : "exact-token-accuracy";
}

Metric parse_metric(std::string_view s) {
    if (s == "contains") {
        return Metric::Contains;
    }
    if (s == "exact-token-accuracy") {
        return Metric::ExactTokenAccuracy;
    }
    throw ConfigError("metric: unknown '" + std::string(s) + "' (expected contains or exact-token-accuracy)");
}

PasskeyStyle parse_passkey_style(std::string_view s) {
    if (s == "repeat" || s == "repeat-filler") {
        return PasskeyStyle::RepeatFiller;
    }
    if (s == "distractor" || s == "distractor-filler") {
        return PasskeyStyle::DistractorFiller;
    }
    throw ConfigError("style: unknown '" + std::string(s) + "' (expected repeat or distractor)");
}

namespace {

const std::vector<std::string> kRepeatFiller = {"The grass is green.", "The sky is blue.", "The sun is yellow.",
                                                "Here we go.", "There and back again."};

// Essay-like sentences for the non-repetitive haystack.
const std::vector<std::string> kEssaySentences = {
    "Most startups that fail do so because they make something nobody wants.",
    "The best way to get new ideas is to notice what seems to be missing.",
    "Good writing is mostly rewriting, and the first draft is only a starting point.",
    "A small group of people who care can move faster than a large committee.",
    "When you are young it is hard to tell which of your interests will last.",
    "Cities tell you, in a thousand subtle ways, what they think you should be doing.",
    "The hardest part of a hard problem is often deciding what the problem is.",
    "People tend to overestimate what they can do in a month and underestimate a decade.",
    "If you want to learn a field quickly, try to explain it to someone else.",
    "Many of the most useful tools began as toys that their makers built for fun.",
    "There is no substitute for talking to users and watching them work.",
    "A programmer who ships every week learns more than one who ships every year.",
    "Curiosity is a better guide to good work than ambition on its own.",
    "The surface of an idea can look simple long after its depths have been mapped.",
    "Doing things that do not scale is often how a new product finds its first fans.",
    "Schools reward students for solving problems that someone else has posed.",
    "Independent thinking is partly a habit and partly a matter of temperament.",
    "An essay is an attempt to figure something out rather than to prove it.",
    "Most of the time, being wrong early is cheaper than being right late.",
    "Taste in software, as in painting, is learned by looking at a lot of work.",
    "Wealth is created when someone makes a thing that other people want.",
    "Distraction is not a new problem, but the tools that feed it are new.",
    "The right kind of stubbornness keeps you working after the fun has worn off.",
    "Good questions tend to be more durable than the answers they first receive.",
    "A lot of progress comes from people who did not know the task was impossible.",
    "Founders are often surprised by how much of the job is persuading others.",
    "Reading old books is a way of talking with people who cannot interrupt you.",
    "Simple rules, applied consistently, can produce surprisingly complex behavior.",
    "Every field has conventions that look arbitrary to anyone standing outside it.",
    "Ideas that seem obvious in hindsight were usually contrarian at the time.",
    "The quality of your work depends a great deal on the quality of your attention.",
    "Most meetings could be replaced by a short note that people read carefully."};

const std::vector<std::string> kWords = {
    "amber",   "anchor",  "bramble", "canyon", "cedar",  "cobalt", "comet",   "coral",   "dagger", "delta",
    "ember",   "falcon",  "fjord",   "garnet", "glacier", "harbor", "hazel",  "indigo",  "ivory",  "jasper",
    "juniper", "kestrel", "lantern", "lilac",  "marble", "meadow", "nectar",  "nimbus",  "onyx",   "orchid",
    "pebble",  "quartz",  "raven",   "saffron", "sable", "thistle", "tundra", "umber",   "velvet", "willow"};

std::string random_number(std::size_t digits, Rng & rng) {
    std::string s;
    for (std::size_t i = 0; i < digits; ++i) {
        s.push_back(static_cast<char>('0' + (i == 0 ? 1 + rng.index(9) : rng.index(10))));
    }
    return s;
}

std::size_t joined_length(const std::vector<std::string> & pieces) {
    std::size_t n = 0;
    for (const auto & p : pieces) {
        n += p.size();
    }
    return n + (pieces.empty() ? 0 : pieces.size() - 1);
}

std::string join(const std::vector<std::string> & pieces) {
    std::string out;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (i) {
            out.push_back(' ');
        }
        out += pieces[i];
    }
    return out;
}

} // namespace

TaskSample gen_passkey(std::size_t ctx_len, std::size_t digits, PasskeyStyle style, Rng & rng) {
    if (digits < 1 || digits > 18) {
        throw ConfigError("digits: must be in [1, 18]");
    }
    const std::string key = random_number(digits, rng);
    std::vector<std::string> head;
    std::string needle;
    std::string question;
    std::string word;
    if (style == PasskeyStyle::RepeatFiller) {
        needle = "The pass key is " + key + ". Remember it. " + key + " is the pass key.";
        question = "\nWhat is the pass key? The pass key is";
    } else {
        word = kWords[rng.index(kWords.size())];
        head.push_back("Some special magic numbers are hidden within the following text. Make sure to memorize it. "
                       "I will quiz you about the numbers afterwards.");
        needle = "One of the special magic numbers for " + word + " is: " + key + ".";
        question = "\nWhat is the special magic number for " + word +
                   " mentioned in the provided text?\nThe special magic number for " + word +
                   " mentioned in the provided text is";
    }

    auto total = [&](const std::vector<std::string> & filler) {
        std::vector<std::string> all = head;
        all.insert(all.end(), filler.begin(), filler.end());
        all.push_back(needle);
        return joined_length(all) + question.size();
    };
    std::vector<std::string> filler;
    if (total(filler) > ctx_len) {
        throw ConfigError("ctx_len: " + std::to_string(ctx_len) + " is too small for the passkey template (needs " +
                          std::to_string(total(filler)) + ")");
    }

    if (style == PasskeyStyle::RepeatFiller) {
        for (std::size_t i = 0;; ++i) {
            filler.push_back(kRepeatFiller[i % kRepeatFiller.size()]);
            if (total(filler) > ctx_len) {
                filler.pop_back();
                break;
            }
        }
    } else {
        std::vector<std::size_t> bag(kEssaySentences.size());
        std::size_t cursor = bag.size();
        for (;;) {
            std::string item;
            if (rng.uniform() < 0.2) {
                std::string w;
                do {
                    w = kWords[rng.index(kWords.size())];
                } while (w == word);
                item = "One of the special magic numbers for " + w + " is: " + random_number(digits, rng) + ".";
            } else {
                if (cursor == bag.size()) {
                    for (std::size_t i = 0; i < bag.size(); ++i) {
                        bag[i] = i;
                    }
                    rng.shuffle(std::span<std::size_t>(bag));
                    cursor = 0;
                }
                item = kEssaySentences[bag[cursor++]];
            }
            filler.push_back(item);
            if (total(filler) > ctx_len) {
                filler.pop_back();
                break;
            }
        }
    }

    const std::size_t slot = rng.index(filler.size() + 1);
    std::vector<std::string> pieces = head;
    pieces.insert(pieces.end(), filler.begin(), filler.begin() + static_cast<std::ptrdiff_t>(slot));
    pieces.push_back(needle);
    pieces.insert(pieces.end(), filler.begin() + static_cast<std::ptrdiff_t>(slot), filler.end());

    TaskSample s;
    s.task = style == PasskeyStyle::RepeatFiller ? "passkey" : "niah-single-2";
    s.prompt = encode_text(join(pieces) + question);
    s.answer = encode_text(key);
    s.ctx_len = ctx_len;
    s.key_position = slot;
    s.depth_slots = filler.size() + 1;
    return s;
}

TaskSample gen_mqar(std::size_t n_pairs, std::size_t vocab_kv, std::size_t ctx_len, Rng & rng) {
    if (n_pairs < 1) {
        throw ConfigError("n_pairs: must be >= 1");
    }
    if (n_pairs > vocab_kv) {
        throw ConfigError("n_pairs: " + std::to_string(n_pairs) + " distinct keys need vocab_kv >= n_pairs (got " +
                          std::to_string(vocab_kv) + ")");
    }
    if (4 * n_pairs > ctx_len) {
        throw ConfigError("ctx_len: " + std::to_string(n_pairs) + " pairs and their queries need " +
                          std::to_string(4 * n_pairs) + " tokens, ctx_len is " + std::to_string(ctx_len));
    }
    std::vector<int> keys(vocab_kv);
    for (std::size_t i = 0; i < vocab_kv; ++i) {
        keys[i] = static_cast<int>(i + 1);
    }
    rng.shuffle(std::span<int>(keys));
    keys.resize(n_pairs);
    std::vector<int> values(n_pairs);
    for (auto & v : values) {
        v = static_cast<int>(vocab_kv + 1 + rng.index(vocab_kv));
    }
    std::vector<std::size_t> order(n_pairs);
    for (std::size_t i = 0; i < n_pairs; ++i) {
        order[i] = i;
    }
    rng.shuffle(std::span<std::size_t>(order));

    TaskSample s;
    s.task = "mqar";
    s.ctx_len = ctx_len;
    s.n_pairs = n_pairs;
    s.prompt.reserve(ctx_len);
    for (std::size_t i = 0; i < n_pairs; ++i) {
        s.prompt.push_back(keys[i]);
        s.prompt.push_back(values[i]);
    }
    for (std::size_t i : order) {
        s.answer_positions.push_back(s.prompt.size());
        s.prompt.push_back(keys[i]);
        s.prompt.push_back(values[i]);
        s.answer.push_back(values[i]);
    }
    // Padding trails the queries: a long pad prefix would fill the decaying
    // state with pad outer products before any binding is seen.
    s.prompt.resize(ctx_len, 0);
    return s;
}

Corpus mqar_corpus(std::size_t n_docs, std::size_t lo, std::size_t hi, std::size_t vocab_kv, std::size_t doc_len,
                   Rng & rng) {
    if (lo < 1 || hi < lo) {
        throw ConfigError("n_pairs range: need 1 <= lo <= hi");
    }
    Corpus corpus;
    corpus.reserve(n_docs);
    for (std::size_t i = 0; i < n_docs; ++i) {
        const std::size_t n = lo + rng.index(hi - lo + 1);
        corpus.push_back(gen_mqar(n, vocab_kv, doc_len, rng).prompt);
    }
    return corpus;
}

std::vector<std::vector<int>> ModelPredictor::predict(std::span<const TaskSample> samples, Metric metric) {
    std::vector<std::vector<int>> out;
    out.reserve(samples.size());
    if (metric == Metric::Contains) {
        for (const auto & s : samples) {
            Decoder dec(ckpt_);
            out.push_back(dec.greedy(s.prompt, s.answer.size() + extra_));
        }
        return out;
    }
    // Teacher-forced: batch equal-length prompts through one forward pass.
    constexpr std::size_t kBatch = 32;
    const std::size_t vocab = ckpt_.config.vocab;
    for (std::size_t b0 = 0; b0 < samples.size(); b0 += kBatch) {
        const std::size_t b1 = std::min(samples.size(), b0 + kBatch);
        const std::size_t len = samples[b0].prompt.size();
        bool same = true;
        std::vector<int> tokens;
        for (std::size_t i = b0; i < b1; ++i) {
            if (samples[i].answer_positions.empty()) {
                throw ConfigError("metric exact-token-accuracy needs a teacher-forced task (e.g. mqar)");
            }
            same = same && samples[i].prompt.size() == len;
            tokens.insert(tokens.end(), samples[i].prompt.begin(), samples[i].prompt.end());
        }
        if (same) {
            Tensor logits = model_forward_batch(ckpt_, tokens, len);
            for (std::size_t i = b0; i < b1; ++i) {
                std::vector<int> pred;
                for (std::size_t pos : samples[i].answer_positions) {
                    const double * row = logits.data() + ((i - b0) * len + pos) * vocab;
                    pred.push_back(argmax(std::span<const double>(row, vocab)));
                }
                out.push_back(std::move(pred));
            }
        } else {
            for (std::size_t i = b0; i < b1; ++i) {
                Tensor logits = model_forward(ckpt_, samples[i].prompt);
                std::vector<int> pred;
                for (std::size_t pos : samples[i].answer_positions) {
                    pred.push_back(argmax(std::span<const double>(logits.data() + pos * vocab, vocab)));
                }
                out.push_back(std::move(pred));
            }
        }
    }
    return out;
}

std::vector<std::vector<int>> EchoPredictor::predict(std::span<const TaskSample> samples, Metric metric) {
    std::vector<std::vector<int>> out;
    for (const auto & s : samples) {
        std::vector<int> p = s.answer;
        if (metric == Metric::Contains) {
            p.insert(p.begin(), ' ');
        }
        out.push_back(std::move(p));
    }
    return out;
}

EvalReport evaluate(Predictor & predictor, const std::vector<TaskSample> & samples, Metric metric,
                    std::vector<std::vector<int>> * predictions) {
    if (samples.empty()) {
        throw ConfigError("evaluate: no samples");
    }
    EvalReport report;
    report.task = samples.front().task;
    report.metric = metric;
    std::map<std::size_t, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        buckets[samples[i].ctx_len].push_back(i);
    }
    if (predictions) {
        predictions->assign(samples.size(), {});
    }
    for (const auto & [length, idx] : buckets) {
        std::vector<TaskSample> group;
        group.reserve(idx.size());
        for (std::size_t i : idx) {
            group.push_back(samples[i]);
        }
        auto preds = predictor.predict(group, metric);
        if (preds.size() != group.size()) {
            throw ShapeError("evaluate: predictor returned " + std::to_string(preds.size()) + " predictions for " +
                             std::to_string(group.size()) + " samples");
        }
        EvalRow row;
        row.length = length;
        row.samples = group.size();
        for (std::size_t g = 0; g < group.size(); ++g) {
            const auto & s = group[g];
            const auto & p = preds[g];
            if (metric == Metric::Contains) {
                row.units += 1;
                row.correct += decode_tokens(p).find(decode_tokens(s.answer)) != std::string::npos ? 1 : 0;
            } else {
                row.units += s.answer.size();
                for (std::size_t a = 0; a < s.answer.size() && a < p.size(); ++a) {
                    row.correct += p[a] == s.answer[a] ? 1 : 0;
                }
            }
            if (predictions) {
                (*predictions)[idx[g]] = p;
            }
        }
        row.accuracy = row.units ? static_cast<double>(row.correct) / static_cast<double>(row.units) : 0.0;
        report.rows.push_back(row);
    }
    return report;
}

EvalReport evaluate(const Checkpoint & ckpt, const std::vector<TaskSample> & samples, Metric metric,
                    std::vector<std::vector<int>> * predictions) {
    ModelPredictor p(ckpt);
    return evaluate(p, samples, metric, predictions);
}

double EvalReport::overall() const {
    std::size_t units = 0, correct = 0;
    for (const auto & r : rows) {
        units += r.units;
        correct += r.correct;
    }
    return units ? static_cast<double>(correct) / static_cast<double>(units) : 0.0;
}

std::string EvalReport::csv() const {
    std::ostringstream os;
    os << "task,metric,length,samples,units,correct,accuracy\n";
    char acc[32];
    for (const auto & r : rows) {
        std::snprintf(acc, sizeof acc, "%.6f", r.accuracy);
        os << task << ',' << metric_name(metric) << ',' << r.length << ',' << r.samples << ',' << r.units << ','
           << r.correct << ',' << acc << "\n";
    }
    return os.str();
}

std::string EvalReport::table() const {
    std::ostringstream os;
    os << task << " (" << metric_name(metric) << ")\n";
    os << std::left << std::setw(10) << "length" << std::right << std::setw(10) << "samples" << std::setw(12)
       << "accuracy" << "\n";
    char acc[32];
    for (const auto & r : rows) {
        std::snprintf(acc, sizeof acc, "%.2f%%", 100.0 * r.accuracy);
        os << std::left << std::setw(10) << r.length << std::right << std::setw(10) << r.samples << std::setw(12)
           << acc << "\n";
    }
    return os.str();
}

std::string samples_jsonl(const std::vector<TaskSample> & samples, const std::vector<std::vector<int>> * predictions) {
    std::string out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto & s = samples[i];
        nlohmann::json j;
        j["task"] = s.task;
        j["ctx_len"] = s.ctx_len;
        const bool text = s.task != "mqar";
        if (text) {
            j["prompt"] = decode_tokens(s.prompt);
            j["answer"] = decode_tokens(s.answer);
            j["key_position"] = s.key_position;
            j["depth_slots"] = s.depth_slots;
        } else {
            j["prompt"] = s.prompt;
            j["answer"] = s.answer;
            j["answer_positions"] = s.answer_positions;
            j["n_pairs"] = s.n_pairs;
        }
        if (predictions && i < predictions->size()) {
            if (text) {
                j["prediction"] = decode_tokens((*predictions)[i]);
            } else {
                j["prediction"] = (*predictions)[i];
            }
        }
        out += j.dump();
        out.push_back('\n');
    }
    return out;
}

} // namespace statex
