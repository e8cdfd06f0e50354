#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "statex/model.hpp"
#include "statex/tasks.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>
#include <set>
#include <sstream>

using namespace statex;

namespace {

// Chi-square critical value at p = 0.001 (Wilson-Hilferty).
double chi2_critical(double df) {
    const double z = 3.0902;
    const double t = 1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df));
    return df * t * t * t;
}

// Scores MQAR queries by reading the bindings back out of the prompt.
double dictionary_oracle(const TaskSample & s) {
    std::map<int, int> table;
    for (std::size_t i = 0; i < 2 * s.n_pairs; i += 2) {
        table[s.prompt[i]] = s.prompt[i + 1];
    }
    std::size_t correct = 0;
    for (std::size_t a = 0; a < s.answer.size(); ++a) {
        correct += table.at(s.prompt[s.answer_positions[a]]) == s.answer[a];
    }
    return static_cast<double>(correct) / static_cast<double>(s.answer.size());
}

} // namespace

TEST_CASE("char tokenizer round trip") {
    const std::string text = "The pass key is 12345. Remember it.";
    CHECK(decode_tokens(encode_text(text)) == text);
    CHECK_THROWS_AS(encode_text(std::string("caf\xc3\xa9")), ConfigError);
}

TEST_CASE("passkey answer is a 5-digit number that a regex extractor recovers") {
    Rng rng(1);
    const std::regex needle("The pass key is ([0-9]+)\\. Remember it\\. ([0-9]+) is the pass key\\.");
    for (int i = 0; i < 100; ++i) {
        auto s = gen_passkey(512, 5, PasskeyStyle::RepeatFiller, rng);
        const std::string answer = decode_tokens(s.answer);
        CHECK(std::regex_match(answer, std::regex("[0-9]{5}")));
        const std::string text = decode_tokens(s.prompt);
        std::smatch m;
        REQUIRE(std::regex_search(text, m, needle));
        CHECK(m[1] == answer);
        CHECK(m[2] == answer);
        CHECK(s.prompt.size() <= 512);
        CHECK(text.size() > 512 - 30);
        CHECK(text.rfind("What is the pass key? The pass key is") == text.size() - 37);
    }
}

TEST_CASE("distractor passkey: decoys never collide with the queried word") {
    Rng rng(2);
    const std::regex pair("One of the special magic numbers for ([a-z]+) is: ([0-9]+)\\.");
    const std::regex query("What is the special magic number for ([a-z]+) mentioned");
    std::size_t decoys = 0;
    for (int i = 0; i < 100; ++i) {
        auto s = gen_passkey(1024, 7, PasskeyStyle::DistractorFiller, rng);
        const std::string text = decode_tokens(s.prompt);
        std::smatch q;
        REQUIRE(std::regex_search(text, q, query));
        const std::string word = q[1];
        std::size_t hits = 0;
        for (auto it = std::sregex_iterator(text.begin(), text.end(), pair); it != std::sregex_iterator(); ++it) {
            if ((*it)[1] == word) {
                ++hits;
                CHECK((*it)[2] == decode_tokens(s.answer));
            } else {
                ++decoys;
            }
        }
        CHECK(hits == 1);
        CHECK(std::regex_match(decode_tokens(s.answer), std::regex("[0-9]{7}")));
        CHECK(s.prompt.size() <= 1024);
    }
    CHECK(decoys > 0);
}

TEST_CASE("passkey generation is deterministic per seed") {
    for (auto style : {PasskeyStyle::RepeatFiller, PasskeyStyle::DistractorFiller}) {
        Rng a(9), b(9);
        auto x = gen_passkey(700, 5, style, a);
        auto y = gen_passkey(700, 5, style, b);
        CHECK(x.prompt == y.prompt);
        CHECK(x.answer == y.answer);
    }
}

TEST_CASE("needle depth is uniform over sentence boundaries") {
    Rng rng(4);
    std::map<std::size_t, std::size_t> counts;
    std::size_t slots = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        auto s = gen_passkey(400, 5, PasskeyStyle::RepeatFiller, rng);
        slots = s.depth_slots;
        counts[s.key_position]++;
    }
    REQUIRE(slots >= 10);
    const double expected = static_cast<double>(n) / static_cast<double>(slots);
    double chi2 = 0.0;
    for (std::size_t k = 0; k < slots; ++k) {
        const double d = static_cast<double>(counts[k]) - expected;
        chi2 += d * d / expected;
    }
    CHECK(chi2 < chi2_critical(static_cast<double>(slots - 1)));
}

TEST_CASE("passkey context too small is an error") {
    Rng rng(1);
    CHECK_THROWS_AS(gen_passkey(40, 5, PasskeyStyle::RepeatFiller, rng), ConfigError);
    CHECK_THROWS_AS(gen_passkey(256, 7, PasskeyStyle::DistractorFiller, rng), ConfigError);
}

TEST_CASE("mqar samples are self-consistent") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const std::size_t n = 1 + rng.index(32);
        auto s = gen_mqar(n, 64, 160, rng);
        CHECK(s.prompt.size() == 160);
        CHECK(s.answer.size() == n);
        CHECK(dictionary_oracle(s) == 1.0);
        std::set<int> keys;
        for (std::size_t k = 0; k < 2 * n; k += 2) {
            CHECK(s.prompt[k] >= 1);
            CHECK(s.prompt[k] <= 64);
            CHECK(s.prompt[k + 1] > 64);
            CHECK(s.prompt[k + 1] <= 128);
            keys.insert(s.prompt[k]);
        }
        CHECK(keys.size() == n);
        for (std::size_t k = 4 * n; k < 160; ++k) {
            CHECK(s.prompt[k] == 0);
        }
    }
}

TEST_CASE("mqar with one pair is solvable and limits are enforced") {
    Rng rng(6);
    auto s = gen_mqar(1, 8, 4, rng);
    CHECK(s.prompt[0] == s.prompt[2]);
    CHECK(s.answer[0] == s.prompt[1]);
    CHECK(s.answer_positions == std::vector<std::size_t>{2});
    CHECK_THROWS_AS(gen_mqar(9, 8, 64, rng), ConfigError);
    CHECK_THROWS_AS(gen_mqar(5, 8, 19, rng), ConfigError);
    CHECK_THROWS_AS(gen_mqar(0, 8, 19, rng), ConfigError);
}

TEST_CASE("mqar corpus documents have the requested length") {
    Rng rng(7);
    auto corpus = mqar_corpus(50, 4, 16, 32, 127, rng);
    REQUIRE(corpus.size() == 50);
    for (const auto & d : corpus) {
        CHECK(d.size() == 127);
    }
}

TEST_CASE("echo predictor scores 1.0 under both metrics") {
    Rng rng(8);
    std::vector<TaskSample> passkeys, mqar;
    for (int i = 0; i < 20; ++i) {
        passkeys.push_back(gen_passkey(i % 2 ? 256 : 512, 5, PasskeyStyle::RepeatFiller, rng));
        mqar.push_back(gen_mqar(8, 16, 64, rng));
    }
    EchoPredictor echo;
    auto r1 = evaluate(echo, passkeys, Metric::Contains);
    REQUIRE(r1.rows.size() == 2);
    CHECK(r1.rows[0].length == 256);
    CHECK(r1.rows[0].samples == 10);
    CHECK(r1.overall() == 1.0);
    auto r2 = evaluate(echo, mqar, Metric::ExactTokenAccuracy);
    CHECK(r2.overall() == 1.0);
    CHECK(r2.rows[0].units == 160);
}

TEST_CASE("untrained model is at chance on 5-digit passkeys") {
    auto cfg = fixtures::config(Family::Gla, 2, 32, 2, 8, 8, kCharVocab);
    auto ckpt = init_checkpoint(cfg, 3);
    Rng rng(10);
    std::vector<TaskSample> samples;
    for (std::size_t i = 0; i < kDefaultEvalSamples; ++i) {
        samples.push_back(gen_passkey(256, 5, PasskeyStyle::RepeatFiller, rng));
    }
    auto r = evaluate(ckpt, samples, Metric::Contains);
    CHECK(r.rows.at(0).samples == 256);
    CHECK(r.overall() <= 1e-4);
}

TEST_CASE("model predictor: batched teacher forcing matches single forwards") {
    auto cfg = fixtures::config(Family::Gla, 2, 16, 2, 4, 4, mqar_vocab(16));
    auto ckpt = fixtures::perturbed(init_checkpoint(cfg, 3), 4);
    Rng rng(11);
    std::vector<TaskSample> samples;
    for (int i = 0; i < 40; ++i) {
        samples.push_back(gen_mqar(1 + rng.index(8), 16, 32, rng));
    }
    std::vector<std::vector<int>> preds;
    auto r = evaluate(ckpt, samples, Metric::ExactTokenAccuracy, &preds);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        Tensor logits = model_forward(ckpt, samples[i].prompt);
        for (std::size_t a = 0; a < samples[i].answer_positions.size(); ++a) {
            const std::size_t pos = samples[i].answer_positions[a];
            CHECK(preds[i][a] == argmax(std::span<const double>(logits.data() + pos * cfg.vocab, cfg.vocab)));
        }
    }
    CHECK(r.overall() >= 0.0);
    CHECK(r.overall() <= 1.0);
    CHECK_THROWS_AS(evaluate(ckpt, {}, Metric::ExactTokenAccuracy), ConfigError);
}

TEST_CASE("report formats") {
    Rng rng(12);
    std::vector<TaskSample> samples;
    for (std::size_t len : {256, 512, 1024}) {
        for (int i = 0; i < 4; ++i) {
            samples.push_back(gen_passkey(len, 5, PasskeyStyle::RepeatFiller, rng));
        }
    }
    EchoPredictor echo;
    std::vector<std::vector<int>> preds;
    auto r = evaluate(echo, samples, Metric::Contains, &preds);
    std::istringstream csv(r.csv());
    std::string line;
    std::getline(csv, line);
    CHECK(line == "task,metric,length,samples,units,correct,accuracy");
    int rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
        CHECK(std::count(line.begin(), line.end(), ',') == 6);
    }
    CHECK(rows == 3);
    CHECK(r.table().find("1024") != std::string::npos);
    std::istringstream jl(samples_jsonl(samples, &preds));
    int lines = 0;
    while (std::getline(jl, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j["prediction"].get<std::string>().find(j["answer"].get<std::string>()) != std::string::npos);
        ++lines;
    }
    CHECK(lines == 12);
}
