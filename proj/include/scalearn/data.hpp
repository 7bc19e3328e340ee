#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "scalearn/common.hpp"
#include "scalearn/metrics.hpp"

namespace scalearn {

enum class TaskKind { Classification, Regression };

struct TaskSpec {
    std::string name;
    TaskKind kind = TaskKind::Classification;
    size_t n_classes = 2;  // 1 for regression
    Metric main_metric = Metric::Accuracy;
    size_t train_size = 0, val_size = 0, test_size = 0;

    size_t n_outputs() const { return kind == TaskKind::Regression ? 1 : n_classes; }

    void validate() const {
        if (name.empty()) throw ContractError("task spec: empty name");
        if (kind == TaskKind::Regression) {
            if (main_metric != Metric::Pearson)
                throw ContractError("task spec " + name + ": regression uses pearson");
        } else {
            if (main_metric == Metric::Pearson)
                throw ContractError("task spec " + name + ": pearson is regression-only");
            if (n_classes < 2)
                throw ContractError("task spec " + name + ": classification needs >= 2 classes");
        }
    }
};

struct Example {
    std::vector<int> tokens;  // starts with the reserved position-0 token
    double label = 0;         // integer-valued for classification
};

using Split = std::vector<Example>;

struct Dataset {
    Split train, validation, test;
    // Set by few_shot_subsample for k < full: training then runs the
    // step-capped protocol with metric-based early stopping.
    bool few_shot_mode = false;

    const Split& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "validation") return validation;
        if (name == "test") return test;
        throw ContractError("unknown split: " + name);
    }
};

// Controls the synthetic multi-task generator. Tasks share a latent linear
// rule bank; rho is the fraction of each task's decision rule drawn from the
// bank (1 = identical rules across tasks, 0 = fully private).
struct BenchmarkSpec {
    size_t n_tasks = 6;
    size_t latent_dim = 4;
    double rho = 0.7;
    size_t vocab_size = 64;
    size_t seq_len = 24;  // content tokens; the reserved CLS token is prepended
    size_t train_size = 320;
    size_t low_resource_train_size = 64;
    size_t val_size = 96;
    size_t test_size = 192;
    double label_noise = 0.05;      // flip probability / regression noise std
    double token_temperature = 3.0;  // strength of the latent tilt on tokens

    void validate() const {
        if (rho < 0.0 || rho > 1.0) throw ContractError("benchmark spec: rho must be in [0, 1]");
        if (n_tasks < 1) throw ContractError("benchmark spec: need at least one task");
        if (vocab_size < 4) throw ContractError("benchmark spec: vocabulary too small");
        if (latent_dim < 1) throw ContractError("benchmark spec: latent_dim must be positive");
        for (size_t sz : {train_size, low_resource_train_size, val_size, test_size})
            if (sz < 8) throw ContractError("benchmark spec: split sizes must be >= 8");
        if (label_noise < 0.0 || label_noise >= 1.0)
            throw ContractError("benchmark spec: label_noise must be in [0, 1)");
    }
};

struct Benchmark {
    BenchmarkSpec spec;
    uint64_t seed = 0;
    std::vector<std::string> task_order;
    std::map<std::string, TaskSpec> specs;
    std::map<std::string, Dataset> datasets;

    const TaskSpec& task(const std::string& name) const {
        auto it = specs.find(name);
        if (it == specs.end()) throw ContractError("unknown task: " + name);
        return it->second;
    }
    const Dataset& dataset(const std::string& name) const {
        auto it = datasets.find(name);
        if (it == datasets.end()) throw ContractError("unknown task: " + name);
        return it->second;
    }

    // Union of all training sequences, the warmup corpus.
    std::vector<std::vector<int>> warmup_corpus() const;
};

// The default 6-task layout: four classification tasks of varying class
// counts, one regression task, and one low-resource classification task.
Benchmark generate_benchmark(const BenchmarkSpec& spec, uint64_t seed);

// Line-delimited {"tokens": [...], "label": ...} records.
void save_jsonl(const Split& split, const std::filesystem::path& path);
Split load_jsonl(const std::filesystem::path& path);

void save_benchmark(const Benchmark& bench, const std::filesystem::path& dir);
Benchmark load_benchmark(const std::filesystem::path& manifest_path);

}  // namespace scalearn
