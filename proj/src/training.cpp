#include "scalearn/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>

#include "scalearn/tape.hpp"

namespace scalearn {

uint64_t stable_hash(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string history_to_jsonl(const History& history) {
    std::string out;
    for (const EpochStats& e : history) {
        nlohmann::ordered_json j;
        j["epoch"] = e.epoch;
        j["train_loss"] = e.train_loss;
        j["val_loss"] = e.val_loss;
        j["val_metric"] = e.val_metric;
        j["lr"] = e.lr;
        out += j.dump();
        out += "\n";
    }
    return out;
}

const char* composition_method_name(CompositionMethod m) {
    switch (m) {
        case CompositionMethod::ScaLearn: return "scalearn";
        case CompositionMethod::ScaLearnUniform: return "scalearn_uniform";
        case CompositionMethod::ScaLearnPP: return "scalearn_pp";
        case CompositionMethod::ScaLearnUniformPP: return "scalearn_uniform_pp";
        case CompositionMethod::Fusion: return "fusion";
        case CompositionMethod::ScaLearnMean: return "scalearn_mean";
        case CompositionMethod::ScaLearnSoftmax: return "scalearn_softmax";
    }
    throw ContractError("unknown composition method");
}

CompositionMethod composition_method_from_name(const std::string& name) {
    if (name == "scalearn") return CompositionMethod::ScaLearn;
    if (name == "scalearn_uniform") return CompositionMethod::ScaLearnUniform;
    if (name == "scalearn_pp") return CompositionMethod::ScaLearnPP;
    if (name == "scalearn_uniform_pp") return CompositionMethod::ScaLearnUniformPP;
    if (name == "fusion") return CompositionMethod::Fusion;
    if (name == "scalearn_mean") return CompositionMethod::ScaLearnMean;
    if (name == "scalearn_softmax") return CompositionMethod::ScaLearnSoftmax;
    throw ContractError("unknown composition method: " + name);
}

bool composition_uses_scaling(CompositionMethod m) { return m != CompositionMethod::Fusion; }

ScaleVariant composition_scale_variant(CompositionMethod m) {
    switch (m) {
        case CompositionMethod::ScaLearn:
        case CompositionMethod::ScaLearnMean:
        case CompositionMethod::ScaLearnSoftmax: return ScaleVariant::NonUniformPerLayer;
        case CompositionMethod::ScaLearnUniform: return ScaleVariant::UniformPerLayer;
        case CompositionMethod::ScaLearnPP: return ScaleVariant::NonUniformShared;
        case CompositionMethod::ScaLearnUniformPP: return ScaleVariant::UniformShared;
        default: throw ContractError("method has no scaling variant");
    }
}

namespace {

bool method_uses_source_dropout(CompositionMethod m) {
    return m == CompositionMethod::ScaLearn || m == CompositionMethod::ScaLearnPP ||
           m == CompositionMethod::ScaLearnMean || m == CompositionMethod::ScaLearnSoftmax;
}

std::vector<Tensor<float>> source_outputs(const Tensor<float>& x,
                                          const std::vector<const AdapterParams*>& sources,
                                          size_t layer, bool with_dropout, double dropout_p,
                                          ForwardCtx& ctx) {
    std::vector<Tensor<float>> outs;
    outs.reserve(sources.size());
    for (const AdapterParams* src : sources) {
        Tensor<float> o = adapter_forward(x, *src, layer);
        if (with_dropout && ctx.training && ctx.rng && dropout_p > 0)
            o = dropout(o, dropout_p, true, *ctx.rng);
        outs.push_back(std::move(o));
    }
    return outs;
}

}  // namespace

LayerPlugin<float> adapter_plugin(const AdapterParams& adapter) {
    return [adapter](const Tensor<float>& x, size_t layer, ForwardCtx&) {
        return adapter_forward(x, adapter, layer);
    };
}

LayerPlugin<float> scalearn_plugin(const std::vector<const AdapterParams*>& sources,
                                   const ScalingParams& sp, CompositionMethod method,
                                   double dropout_p) {
    const bool with_dropout = method_uses_source_dropout(method);
    return [sources, sp, method, with_dropout, dropout_p](const Tensor<float>& x, size_t layer,
                                                          ForwardCtx& ctx) {
        auto outs = source_outputs(x, sources, layer, with_dropout, dropout_p, ctx);
        switch (method) {
            case CompositionMethod::ScaLearnMean:
                return combine_constrained(outs, sp, ConstraintMode::Mean, layer);
            case CompositionMethod::ScaLearnSoftmax:
                return combine_constrained(outs, sp, ConstraintMode::Softmax, layer);
            default: return combine_scalearn(outs, sp, layer);
        }
    };
}

LayerPlugin<float> fusion_plugin(const std::vector<const AdapterParams*>& sources,
                                 const FusionParams& fp) {
    return [sources, fp](const Tensor<float>& x, size_t layer, ForwardCtx& ctx) {
        auto outs = source_outputs(x, sources, layer, false, 0.0, ctx);
        return combine_fusion(x, outs, fp, layer);
    };
}

LayerPlugin<float> probe_plugin(const std::vector<const AdapterParams*>& sources,
                                const std::vector<double>& omegas) {
    if (sources.size() != omegas.size())
        throw ContractError("probe_plugin: sources and omegas must align");
    return [sources, omegas](const Tensor<float>& x, size_t layer, ForwardCtx&) {
        Tensor<float> acc;
        for (size_t s = 0; s < sources.size(); ++s) {
            Tensor<float> term = scale(adapter_forward(x, *sources[s], layer), omegas[s]);
            acc = s == 0 ? term : add(acc, term);
        }
        return acc;
    };
}

namespace {

// Forward a batch of possibly mixed-length sequences: group rows by length,
// run one packed forward per group, and reassemble logits in example order.
Tensor<float> batch_logits(const std::vector<const Example*>& batch,
                           const BackboneParams& backbone, const LayerPlugin<float>& plugin,
                           const TaskHead& head, ForwardCtx& ctx) {
    std::map<size_t, std::vector<size_t>> by_len;
    for (size_t i = 0; i < batch.size(); ++i) by_len[batch[i]->tokens.size()].push_back(i);

    std::vector<Tensor<float>> group_logits;
    std::vector<size_t> order;
    for (const auto& [len, indices] : by_len) {
        std::vector<std::vector<int>> seqs;
        seqs.reserve(indices.size());
        for (size_t i : indices) seqs.push_back(batch[i]->tokens);
        Tensor<float> hidden = encoder_forward_packed<float>(seqs, backbone, plugin, ctx);
        Tensor<float> pooled = pool_first_packed(hidden, seqs.size(), len);
        group_logits.push_back(head.forward(pooled));
        order.insert(order.end(), indices.begin(), indices.end());
    }
    Tensor<float> stacked = group_logits.size() == 1 ? group_logits[0]
                                                     : concat(group_logits, 0);
    if (by_len.size() == 1) return stacked;
    std::vector<size_t> inverse(order.size());
    for (size_t pos = 0; pos < order.size(); ++pos) inverse[order[pos]] = pos;
    return take_rows(stacked, inverse);
}

Tensor<float> batch_loss(const TaskSpec& task, const std::vector<const Example*>& batch,
                         const Tensor<float>& logits) {
    if (task.kind == TaskKind::Regression) {
        std::vector<float> targets(batch.size());
        for (size_t i = 0; i < batch.size(); ++i) targets[i] = float(batch[i]->label);
        return mse_loss(reshape(logits, {batch.size()}), targets);
    }
    std::vector<int> labels(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) labels[i] = int(batch[i]->label);
    return cross_entropy_loss(logits, labels);
}

double split_metric(const TaskSpec& task, const EvalResult& eval, const Split& split) {
    if (task.kind == TaskKind::Regression) {
        std::vector<double> labels(split.size());
        for (size_t i = 0; i < split.size(); ++i) labels[i] = split[i].label;
        return pearson(eval.pred_values, labels);
    }
    std::vector<int> labels(split.size());
    for (size_t i = 0; i < split.size(); ++i) labels[i] = int(split[i].label);
    switch (task.main_metric) {
        case Metric::Accuracy: return accuracy(eval.pred_classes, labels);
        case Metric::F1Macro: return f1_macro(eval.pred_classes, labels, task.n_classes);
        case Metric::Matthews: return matthews(eval.pred_classes, labels);
        case Metric::Pearson: throw ContractError("pearson metric on a classification task");
    }
    throw ContractError("unknown metric");
}

}  // namespace

EvalResult evaluate_split(const TaskSpec& task, const Split& split,
                          const BackboneParams& backbone, const LayerPlugin<float>& plugin,
                          const TaskHead& head, size_t batch_size) {
    if (split.empty()) throw DataError("evaluate_split: empty split for task " + task.name);
    EvalResult result;
    ForwardCtx ctx{false, nullptr};
    double loss_sum = 0;
    for (size_t start = 0; start < split.size(); start += batch_size) {
        const size_t end = std::min(split.size(), start + batch_size);
        std::vector<const Example*> batch;
        for (size_t i = start; i < end; ++i) batch.push_back(&split[i]);
        Tensor<float> logits = batch_logits(batch, backbone, plugin, head, ctx);
        loss_sum += double(batch_loss(task, batch, logits).item()) * double(batch.size());
        for (size_t i = 0; i < batch.size(); ++i) {
            if (task.kind == TaskKind::Regression) {
                result.pred_values.push_back(double(logits.at(i, 0)));
            } else {
                size_t best = 0;
                for (size_t c = 1; c < task.n_classes; ++c)
                    if (logits.at(i, c) > logits.at(i, best)) best = c;
                result.pred_classes.push_back(int(best));
                result.pred_values.push_back(double(best));
            }
        }
    }
    result.loss = loss_sum / double(split.size());
    result.metric = split_metric(task, result, split);
    return result;
}

namespace {

struct Snapshot {
    std::vector<std::vector<float>> values;

    static Snapshot capture(const std::vector<std::pair<std::string, Tensor<float>>>& params) {
        Snapshot s;
        for (const auto& [name, p] : params) s.values.push_back(p.vec());
        return s;
    }

    void restore(const std::vector<std::pair<std::string, Tensor<float>>>& params) const {
        for (size_t i = 0; i < params.size(); ++i) params[i].second.vec() = values[i];
    }
};

struct CoreOutcome {
    TaskHead head;
    History history;
    double best_val_loss = 0;
    double best_val_metric = 0;
};

// The shared optimization loop: AdamW with linear decay and no warmup,
// early stopping on validation loss (or the main metric in few-shot mode),
// best-checkpoint restore, epoch-0 baseline included.
CoreOutcome run_training(const TaskSpec& task, const Dataset& data,
                         const BackboneParams& backbone, const LayerPlugin<float>& plugin,
                         std::vector<std::pair<std::string, Tensor<float>>> trainables,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (data.train.empty()) throw DataError("training: empty train split for task " + task.name);
    if (data.validation.empty())
        throw DataError("training: empty validation split for task " + task.name);

    const bool few_shot = data.few_shot_mode;
    const size_t patience = few_shot ? cfg.few_shot_patience : cfg.patience;

    Rng rng(splitmix64(cfg.seed) ^ stable_hash(task.name));
    CoreOutcome out;
    out.head = head_init<float>(backbone.config.d_model, task.n_outputs(), rng);
    out.head.set_trainable(true);
    for (auto& [name, p] : trainables) p.set_requires_grad(true);
    for (const auto& [name, p] : out.head.named_params()) trainables.push_back({name, p});

    typename AdamW<float>::Options opt_opts;
    opt_opts.beta1 = cfg.beta1;
    opt_opts.beta2 = cfg.beta2;
    opt_opts.eps = cfg.epsilon;
    opt_opts.weight_decay = cfg.weight_decay;
    AdamW<float> opt(trainables, opt_opts);

    const size_t steps_per_epoch = (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const size_t total_steps =
        few_shot ? cfg.few_shot_max_steps : cfg.max_epochs * steps_per_epoch;

    auto eval_train = [&]() {
        return evaluate_split(task, data.train, backbone, plugin, out.head, cfg.batch_size).loss;
    };
    auto eval_val = [&]() {
        return evaluate_split(task, data.validation, backbone, plugin, out.head, cfg.batch_size);
    };

    auto val0 = eval_val();
    out.history.push_back({0, eval_train(), val0.loss, val0.metric, cfg.learning_rate});
    double best_loss = val0.loss;
    double best_metric = val0.metric;
    Snapshot best = Snapshot::capture(trainables);

    size_t bad_epochs = 0;
    size_t global_step = 0;
    double current_lr = cfg.learning_rate;
    const size_t max_epochs = few_shot ? cfg.few_shot_max_steps : cfg.max_epochs;
    for (size_t epoch = 1; epoch <= max_epochs && global_step < total_steps; ++epoch) {
        auto perm = rng.permutation(data.train.size());
        double loss_sum = 0;
        size_t seen = 0;
        for (size_t start = 0; start < perm.size() && global_step < total_steps;
             start += cfg.batch_size) {
            const size_t end = std::min(perm.size(), start + cfg.batch_size);
            std::vector<const Example*> batch;
            for (size_t i = start; i < end; ++i) batch.push_back(&data.train[perm[i]]);

            ForwardCtx ctx{true, &rng};
            Tape<float> tape;
            Tensor<float> loss;
            {
                Tape<float>::Scope scope(tape);
                Tensor<float> logits = batch_logits(batch, backbone, plugin, out.head, ctx);
                loss = batch_loss(task, batch, logits);
                tape.backward(loss);
            }
            current_lr = linear_decay_lr(cfg.learning_rate, int64_t(global_step),
                                         int64_t(total_steps));
            opt.step(current_lr);
            opt.zero_grad();
            loss_sum += double(loss.item()) * double(batch.size());
            seen += batch.size();
            ++global_step;
        }

        auto val = eval_val();
        out.history.push_back(
            {epoch, seen ? loss_sum / double(seen) : 0.0, val.loss, val.metric, current_lr});

        const bool improved = few_shot ? val.metric > best_metric : val.loss < best_loss;
        if (improved) {
            best_loss = val.loss;
            best_metric = val.metric;
            best = Snapshot::capture(trainables);
            bad_epochs = 0;
        } else {
            ++bad_epochs;
            if (bad_epochs >= patience) break;
        }
    }

    best.restore(trainables);
    out.best_val_loss = best_loss;
    out.best_val_metric = best_metric;
    return out;
}

void check_frozen(const std::vector<std::pair<std::string, Tensor<float>>>& params,
                  const std::string& what) {
    for (const auto& [name, p] : params)
        if (p.requires_grad())
            throw ContractError(what + " must be frozen before transfer training (" + name +
                                " still requires grad)");
}

}  // namespace

AdapterTrainResult train_source_adapter(const TaskSpec& task, const Dataset& data,
                                        const BackboneParams& backbone, TrainConfig cfg,
                                        size_t reduction) {
    if (!backbone.frozen) throw ContractError("train_source_adapter: backbone must be frozen");
    check_frozen(backbone.named_params(), "backbone");

    AdapterTrainResult result;
    result.adapter = adapter_init<float>(task.name, backbone.config.d_model, reduction,
                                         backbone.config.n_layers, cfg.seed);
    result.adapter.set_trainable(true);

    auto core = run_training(task, data, backbone, adapter_plugin(result.adapter),
                             result.adapter.named_params(), cfg);
    result.adapter.set_trainable(false);
    result.head = core.head;
    result.head.set_trainable(false);
    result.history = std::move(core.history);
    result.best_val_loss = core.best_val_loss;
    return result;
}

TransferTrainResult train_transfer(const TaskSpec& target, const Dataset& data,
                                   const std::vector<const AdapterParams*>& sources,
                                   CompositionMethod method, const BackboneParams& backbone,
                                   TrainConfig cfg, std::optional<double> freeze_omega_at) {
    if (sources.empty()) throw ContractError("train_transfer: empty source set");
    if (!backbone.frozen) throw ContractError("train_transfer: backbone must be frozen");
    check_frozen(backbone.named_params(), "backbone");
    std::vector<std::string> source_order;
    for (const AdapterParams* src : sources) {
        check_frozen(src->named_params(), "source adapter " + src->task_name);
        source_order.push_back(src->task_name);
    }

    const size_t d = backbone.config.d_model;
    const size_t n_layers = backbone.config.n_layers;
    TransferTrainResult result;

    if (composition_uses_scaling(method)) {
        if (freeze_omega_at) {
            result.scaling = scaling_const<float>(composition_scale_variant(method), d, n_layers,
                                                  source_order, *freeze_omega_at);
            result.scaling->set_trainable(false);
            auto plugin = scalearn_plugin(sources, *result.scaling, method, cfg.transfer_dropout);
            auto core = run_training(target, data, backbone, plugin, {}, cfg);
            result.head = core.head;
            result.history = std::move(core.history);
            result.best_val_loss = core.best_val_loss;
            result.head.set_trainable(false);
            return result;
        }
        // Initialization around 2/T with T the number of source tasks.
        const double mean = 2.0 / double(sources.size());
        result.scaling = scaling_init<float>(composition_scale_variant(method), d, n_layers,
                                             source_order, mean, 0.001, cfg.seed);
        result.scaling->set_trainable(true);
        auto plugin = scalearn_plugin(sources, *result.scaling, method, cfg.transfer_dropout);
        auto core = run_training(target, data, backbone, plugin,
                                 result.scaling->named_params(), cfg);
        result.scaling->set_trainable(false);
        result.head = core.head;
        result.history = std::move(core.history);
        result.best_val_loss = core.best_val_loss;
    } else {
        if (freeze_omega_at)
            throw ContractError("train_transfer: fusion has no frozen-omega configuration");
        result.fusion = fusion_init<float>(d, n_layers, cfg.seed);
        result.fusion->set_trainable(true);
        auto plugin = fusion_plugin(sources, *result.fusion);
        auto core =
            run_training(target, data, backbone, plugin, result.fusion->named_params(), cfg);
        result.fusion->set_trainable(false);
        result.head = core.head;
        result.history = std::move(core.history);
        result.best_val_loss = core.best_val_loss;
    }
    result.head.set_trainable(false);
    return result;
}

HeadTrainResult train_head_only(const TaskSpec& task, const Dataset& data,
                                const BackboneParams& backbone, const LayerPlugin<float>& plugin,
                                TrainConfig cfg) {
    if (!backbone.frozen) throw ContractError("train_head_only: backbone must be frozen");
    auto core = run_training(task, data, backbone, plugin, {}, cfg);
    HeadTrainResult result;
    result.head = core.head;
    result.head.set_trainable(false);
    result.history = std::move(core.history);
    result.best_val_loss = core.best_val_loss;
    return result;
}

Dataset few_shot_subsample(const Dataset& data, size_t k, uint64_t seed) {
    if (k == 0) throw ContractError("few_shot_subsample: k must be positive");
    if (k > data.train.size())
        throw ContractError("few_shot_subsample: k=" + std::to_string(k) +
                            " exceeds train split of " + std::to_string(data.train.size()));

    Dataset out;
    out.validation = data.validation;
    if (out.validation.size() > 5000) out.validation.resize(5000);
    out.test = data.test;

    if (k == data.train.size()) {
        out.train = data.train;  // identity permutation, standard regime
        out.few_shot_mode = false;
        return out;
    }

    Rng rng(splitmix64(seed ^ 0xfe57a11ULL));

    // Label-stratified when the budget covers every class.
    std::map<int, std::vector<size_t>> by_class;
    bool integral_labels = true;
    for (size_t i = 0; i < data.train.size(); ++i) {
        const double l = data.train[i].label;
        if (std::round(l) != l) {
            integral_labels = false;
            break;
        }
        by_class[int(l)].push_back(i);
    }

    std::vector<size_t> chosen;
    if (integral_labels && by_class.size() >= 2 && k >= by_class.size()) {
        std::map<int, size_t> quota;
        size_t c_idx = 0;
        for (const auto& [label, indices] : by_class) {
            quota[label] = k / by_class.size() + (c_idx < k % by_class.size() ? 1 : 0);
            ++c_idx;
        }
        size_t shortfall = 0;
        std::vector<size_t> leftovers;
        for (auto& [label, indices] : by_class) {
            std::vector<size_t> pool = indices;
            rng.shuffle(pool);
            const size_t take = std::min(quota[label], pool.size());
            chosen.insert(chosen.end(), pool.begin(), pool.begin() + take);
            leftovers.insert(leftovers.end(), pool.begin() + take, pool.end());
            shortfall += quota[label] - take;
        }
        if (shortfall > 0) {
            rng.shuffle(leftovers);
            chosen.insert(chosen.end(), leftovers.begin(), leftovers.begin() + shortfall);
        }
    } else {
        std::vector<size_t> pool(data.train.size());
        for (size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        rng.shuffle(pool);
        chosen.assign(pool.begin(), pool.begin() + k);
    }

    std::sort(chosen.begin(), chosen.end());
    for (size_t i : chosen) out.train.push_back(data.train[i]);
    out.few_shot_mode = true;
    return out;
}

}  // namespace scalearn
