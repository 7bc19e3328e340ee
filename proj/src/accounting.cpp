#include "scalearn/accounting.hpp"

#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace scalearn {

size_t transfer_param_count(TransferMethod method, size_t d, size_t n_layers, size_t n_sources,
                            size_t n_targets, CountScope scope) {
    if (d < 1 || n_layers < 1 || n_sources < 1 || n_targets < 1)
        throw ContractError("transfer_param_count: all arguments must be >= 1");
    size_t per_task = 0;
    switch (method) {
        case TransferMethod::ScaLearn: per_task = d * n_layers * n_sources; break;
        case TransferMethod::ScaLearnUniform: per_task = n_layers * n_sources; break;
        case TransferMethod::ScaLearnPP: per_task = d * n_sources; break;
        case TransferMethod::ScaLearnUniformPP: per_task = n_sources; break;
        case TransferMethod::AdapterFusion: per_task = 3 * d * d * n_layers; break;
        default: throw ContractError("transfer_param_count: unknown method");
    }
    return scope == CountScope::PerTask ? per_task : per_task * n_targets;
}

TransferMethod transfer_method_from_name(const std::string& name) {
    if (name == "scalearn") return TransferMethod::ScaLearn;
    if (name == "scalearn_uniform") return TransferMethod::ScaLearnUniform;
    if (name == "scalearn_pp") return TransferMethod::ScaLearnPP;
    if (name == "scalearn_uniform_pp") return TransferMethod::ScaLearnUniformPP;
    if (name == "fusion") return TransferMethod::AdapterFusion;
    throw ContractError("unknown transfer method: " + name);
}

const char* transfer_method_name(TransferMethod method) {
    switch (method) {
        case TransferMethod::ScaLearn: return "scalearn";
        case TransferMethod::ScaLearnUniform: return "scalearn_uniform";
        case TransferMethod::ScaLearnPP: return "scalearn_pp";
        case TransferMethod::ScaLearnUniformPP: return "scalearn_uniform_pp";
        case TransferMethod::AdapterFusion: return "fusion";
    }
    throw ContractError("unknown transfer method");
}

size_t ParamReport::count_for(const std::string& component) const {
    for (const auto& e : entries)
        if (e.component == component) return e.count;
    throw ContractError("ParamReport: unknown component " + component);
}

std::string ParamReport::to_json() const {
    nlohmann::ordered_json j;
    j["backbone_params"] = backbone_count;
    j["components"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
        nlohmann::ordered_json ej;
        ej["component"] = e.component;
        ej["count"] = e.count;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", e.percent_of_backbone);
        ej["percent_of_backbone"] = std::stod(buf);
        ej["scope"] = e.scope;
        j["components"].push_back(ej);
    }
    return j.dump(2);
}

std::string ParamReport::to_table() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-22s %10s %12s %10s\n", "Component", "Count", "% backbone",
                  "Scope");
    os << line;
    os << std::string(58, '-') << "\n";
    for (const auto& e : entries) {
        std::snprintf(line, sizeof(line), "%-22s %10zu %11.2f%% %10s\n", e.component.c_str(),
                      e.count, e.percent_of_backbone, e.scope.c_str());
        os << line;
    }
    return os.str();
}

namespace {

size_t trainable_scalars(const std::vector<std::pair<std::string, Tensor<float>>>& params) {
    size_t n = 0;
    for (const auto& [name, p] : params)
        if (p.requires_grad()) n += p.numel();
    return n;
}

double pct(size_t count, size_t backbone) {
    return backbone == 0 ? 0.0 : 100.0 * double(count) / double(backbone);
}

}  // namespace

ParamReport enumerate_trainable(const ModelAssembly& assembly) {
    ParamReport report;
    report.backbone_count = assembly.backbone ? assembly.backbone->param_count() : 0;
    const size_t bb = report.backbone_count;

    size_t backbone_trainable = 0;
    if (assembly.backbone)
        backbone_trainable = trainable_scalars(assembly.backbone->named_params());
    report.entries.push_back({"backbone", backbone_trainable, pct(backbone_trainable, bb),
                              "all_tasks"});

    size_t adapter_trainable = 0;
    for (const auto* a : assembly.adapters)
        if (a) adapter_trainable += trainable_scalars(a->named_params());
    report.entries.push_back({"adapters", adapter_trainable, pct(adapter_trainable, bb),
                              "per_task"});

    size_t transfer_weights = 0;
    size_t transfer_biases = 0;
    if (assembly.scaling) transfer_weights += trainable_scalars(assembly.scaling->named_params());
    if (assembly.fusion) {
        for (const auto& [name, p] : assembly.fusion->named_params()) {
            if (!p.requires_grad()) continue;
            const bool is_bias = name.find("/b") != std::string::npos;
            (is_bias ? transfer_biases : transfer_weights) += p.numel();
        }
    }
    report.entries.push_back({"transfer_weights", transfer_weights, pct(transfer_weights, bb),
                              "per_task"});
    report.entries.push_back({"transfer_biases", transfer_biases, pct(transfer_biases, bb),
                              "per_task"});

    size_t head_trainable = 0;
    if (assembly.head) head_trainable = trainable_scalars(assembly.head->named_params());
    report.entries.push_back({"head", head_trainable, pct(head_trainable, bb), "per_task"});

    return report;
}

ParamReport reference_param_table(size_t d, size_t n_layers, size_t n_sources, size_t n_targets,
                                  size_t reduction, size_t backbone_param_count) {
    ParamReport report;
    report.backbone_count = backbone_param_count;
    const size_t bb = backbone_param_count;

    const size_t adapter_one = adapter_param_count(d, reduction, n_layers);
    report.entries.push_back({"adapter", adapter_one, pct(adapter_one, bb), "per_task"});
    report.entries.push_back({"adapter_all", adapter_one * n_targets,
                              pct(adapter_one * n_targets, bb), "all_tasks"});
    for (TransferMethod m :
         {TransferMethod::AdapterFusion, TransferMethod::ScaLearn, TransferMethod::ScaLearnUniform,
          TransferMethod::ScaLearnPP, TransferMethod::ScaLearnUniformPP}) {
        const size_t one =
            transfer_param_count(m, d, n_layers, n_sources, n_targets, CountScope::PerTask);
        const size_t all =
            transfer_param_count(m, d, n_layers, n_sources, n_targets, CountScope::AllTasks);
        report.entries.push_back({transfer_method_name(m), one, pct(one, bb), "per_task"});
        report.entries.push_back({std::string(transfer_method_name(m)) + "_all", all,
                                  pct(all, bb), "all_tasks"});
    }
    return report;
}

}  // namespace scalearn
