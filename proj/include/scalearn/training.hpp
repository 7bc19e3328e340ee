#pragma once

#include <optional>
#include <string>
#include <vector>

#include "scalearn/adapter.hpp"
#include "scalearn/backbone.hpp"
#include "scalearn/composition.hpp"
#include "scalearn/data.hpp"
#include "scalearn/head.hpp"
#include "scalearn/optimizer.hpp"

namespace scalearn {

struct TrainConfig {
    double learning_rate = 3e-4;
    size_t max_epochs = 30;
    size_t patience = 5;
    size_t batch_size = 32;
    uint64_t seed = 0;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-6;
    // Applied to each source output before scaling, train mode only, and
    // only for the non-uniform scaling variants.
    double transfer_dropout = 0.3;
    std::optional<double> backbone_dropout_override;
    // Few-shot regime (active when the dataset is marked few-shot).
    size_t few_shot_max_steps = 1000;
    size_t few_shot_patience = 20;

    void validate() const {
        if (learning_rate < 0) throw ContractError("train config: negative learning rate");
        if (patience < 1) throw ContractError("train config: patience must be >= 1");
        if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
    }
};

struct EpochStats {
    size_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_metric = 0;
    double lr = 0;
};

using History = std::vector<EpochStats>;

std::string history_to_jsonl(const History& history);

struct EvalResult {
    double loss = 0;
    double metric = 0;
    std::vector<int> pred_classes;     // classification
    std::vector<double> pred_values;   // regression outputs (or class ids)
};

// Eval-mode pass over a split: loss, main metric, and raw predictions.
EvalResult evaluate_split(const TaskSpec& task, const Split& split,
                          const BackboneParams& backbone, const LayerPlugin<float>& plugin,
                          const TaskHead& head, size_t batch_size = 32);

// The composition methods stage 2 can train. Mean/Softmax are the
// constrained ablations on the non-uniform per-layer variant.
enum class CompositionMethod {
    ScaLearn,
    ScaLearnUniform,
    ScaLearnPP,
    ScaLearnUniformPP,
    Fusion,
    ScaLearnMean,
    ScaLearnSoftmax,
};

const char* composition_method_name(CompositionMethod m);
CompositionMethod composition_method_from_name(const std::string& name);
bool composition_uses_scaling(CompositionMethod m);
ScaleVariant composition_scale_variant(CompositionMethod m);

// Plugin builders shared by training, probing and the experiment harness.
LayerPlugin<float> adapter_plugin(const AdapterParams& adapter);
LayerPlugin<float> scalearn_plugin(const std::vector<const AdapterParams*>& sources,
                                   const ScalingParams& sp, CompositionMethod method,
                                   double dropout_p);
LayerPlugin<float> fusion_plugin(const std::vector<const AdapterParams*>& sources,
                                 const FusionParams& fp);
// Fixed-scalar probe: o_t = sum_i omega_i * o_(source_i), nothing trained.
LayerPlugin<float> probe_plugin(const std::vector<const AdapterParams*>& sources,
                                const std::vector<double>& omegas);

struct AdapterTrainResult {
    AdapterParams adapter;
    TaskHead head;
    History history;
    double best_val_loss = 0;
};

// Stage 1: one adapter plus head per source task; the backbone stays frozen
// and byte-identical.
AdapterTrainResult train_source_adapter(const TaskSpec& task, const Dataset& data,
                                        const BackboneParams& backbone, TrainConfig cfg,
                                        size_t reduction = 16);

struct TransferTrainResult {
    std::optional<ScalingParams> scaling;
    std::optional<FusionParams> fusion;
    TaskHead head;
    History history;
    double best_val_loss = 0;
};

// Stage 2: freeze all sources, train the transfer layer and a fresh head.
// Sources must include the target's own stage-1 adapter by convention; the
// source order is recorded in the returned parameters. When freeze_omega_at
// is set, the scaling coefficients are pinned to that constant and only the
// head trains (the probing configuration).
TransferTrainResult train_transfer(const TaskSpec& target, const Dataset& data,
                                   const std::vector<const AdapterParams*>& sources,
                                   CompositionMethod method, const BackboneParams& backbone,
                                   TrainConfig cfg,
                                   std::optional<double> freeze_omega_at = std::nullopt);

struct HeadTrainResult {
    TaskHead head;
    History history;
    double best_val_loss = 0;
};

// Head-only training over a fixed plugin (probing sweeps, soup, baselines).
HeadTrainResult train_head_only(const TaskSpec& task, const Dataset& data,
                                const BackboneParams& backbone, const LayerPlugin<float>& plugin,
                                TrainConfig cfg);

// Deterministic seeded subsample of k training examples, label-stratified
// when k >= the class count. Validation is capped at 5,000 examples. For
// k < the full train size the result is marked few-shot, which switches
// training to the step-capped, metric-driven early-stopping regime.
Dataset few_shot_subsample(const Dataset& data, size_t k, uint64_t seed);

// FNV-1a, used to derive per-task seeds deterministically.
uint64_t stable_hash(const std::string& s);

}  // namespace scalearn
