#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "statex/config.hpp"
#include "statex/statex.hpp"
#include "statex/tasks.hpp"
#include "statex/training.hpp"

namespace statex {

// Training data: a token-id file, or the built-in MQAR generator when
// `corpus` is empty and `synthetic` is "mqar".
struct DataConfig {
    std::string corpus;
    std::string synthetic = "mqar";
    std::size_t kv = 16;
    std::size_t min_pairs = 1;
    std::size_t max_pairs = 3;
};

struct TaskConfig {
    std::string name = "mqar";
    std::size_t digits = 5;
    std::string style = "repeat";
    std::vector<std::size_t> lengths{64};
    std::size_t samples = kDefaultEvalSamples;
    std::size_t n_pairs = 8;
    std::size_t kv = 16;
};

struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    TrainConfig posttrain;
    DataConfig posttrain_data;
    ExpansionPlan plan;
    TaskConfig task;

    // Copies the top-level seed into the train, post-train and plan seeds.
    RunConfig & sync_seeds();
    void validate() const;
};

using Json = nlohmann::ordered_json;

Json to_json(const RunConfig & rc);
// Every key must already exist in `to_json(RunConfig{})`.
RunConfig from_json(const Json & j);

// Recursively overlays `overlay` onto `base`; a key absent from `base`
// throws ConfigError naming its dotted path.
void merge_strict(Json & base, const Json & overlay, const std::string & path = "");

// Names: tiny-gla, tiny-mamba2, paper-shape-gla, paper-shape-mamba2.
RunConfig preset(std::string_view name);
std::vector<std::string> preset_names();

Json read_json_file(const std::filesystem::path & path);

// Corpus for one training stage, deterministic in (data, seed, stream).
Corpus load_corpus(const DataConfig & data, const TrainConfig & train, std::uint64_t seed, std::string_view stream,
                   const std::string & field);

std::vector<TaskSample> task_samples(const TaskConfig & task, std::uint64_t seed);
Metric task_metric(const TaskConfig & task);

} // namespace statex
