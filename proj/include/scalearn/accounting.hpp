#pragma once

#include <string>
#include <vector>

#include "scalearn/adapter.hpp"
#include "scalearn/backbone.hpp"
#include "scalearn/composition.hpp"
#include "scalearn/head.hpp"

namespace scalearn {

enum class TransferMethod {
    ScaLearn,
    ScaLearnUniform,
    ScaLearnPP,
    ScaLearnUniformPP,
    AdapterFusion,
};

enum class CountScope { PerTask, AllTasks };

// Transfer-layer parameter formulas, weights only (bias and task-head
// parameters excluded): d*L*S, L*S, d*S, S, and 3*d^2*L for fusion; the
// all-tasks scope multiplies by T.
size_t transfer_param_count(TransferMethod method, size_t d, size_t n_layers, size_t n_sources,
                            size_t n_targets, CountScope scope);

TransferMethod transfer_method_from_name(const std::string& name);
const char* transfer_method_name(TransferMethod method);

struct ParamReport {
    struct Entry {
        std::string component;
        size_t count = 0;
        double percent_of_backbone = 0.0;  // display-rounded by the writers
        std::string scope;                 // "per_task" or "all_tasks"
    };
    std::vector<Entry> entries;
    size_t backbone_count = 0;

    size_t count_for(const std::string& component) const;
    std::string to_json() const;
    std::string to_table() const;
};

// One assembled model: frozen backbone, source adapters, at most one
// transfer layer, and the head. enumerate_trainable counts only scalars that
// participate in gradient updates.
struct ModelAssembly {
    const BackboneParams* backbone = nullptr;
    std::vector<const AdapterParams*> adapters;
    const ScalingParams* scaling = nullptr;
    const FusionParams* fusion = nullptr;
    const TaskHead* head = nullptr;
};

ParamReport enumerate_trainable(const ModelAssembly& assembly);

// The Table-1-shaped accounting view for a given geometry.
ParamReport reference_param_table(size_t d, size_t n_layers, size_t n_sources, size_t n_targets,
                                  size_t reduction, size_t backbone_param_count);

}  // namespace scalearn
