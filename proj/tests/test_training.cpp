#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "scalearn/checkpoint.hpp"
#include "scalearn/training.hpp"

using namespace scalearn;

namespace {

BackboneConfig small_backbone_config() {
    BackboneConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_dim = 64;
    cfg.max_seq_len = 32;
    cfg.dropout_p = 0.1;
    return cfg;
}

struct SmallWorld {
    Benchmark bench;
    BackboneParams backbone;
};

// One shared fixture: a 2-task benchmark and a briefly warmed backbone.
SmallWorld& small_world() {
    static SmallWorld* world = [] {
        auto* w = new SmallWorld();
        BenchmarkSpec spec;
        spec.n_tasks = 2;
        spec.train_size = 160;
        spec.low_resource_train_size = 64;
        spec.val_size = 48;
        spec.test_size = 96;
        spec.label_noise = 0.0;
        w->bench = generate_benchmark(spec, 41);
        WarmupSpec warmup;
        warmup.corpus = w->bench.warmup_corpus();
        warmup.steps = 300;
        warmup.batch_size = 16;
        warmup.seed = 1;
        w->backbone = init_backbone<float>(small_backbone_config(), 7, warmup);
        return w;
    }();
    return *world;
}

TrainConfig fast_cfg(double lr, uint64_t seed = 0) {
    TrainConfig cfg;
    cfg.learning_rate = lr;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("adamw: zero learning rate and zero decay change nothing") {
    auto p = Tensor<float>::from({3}, {1, -2, 3}).set_requires_grad(true);
    AdamW<float>::Options opts;
    opts.weight_decay = 0.0;
    AdamW<float> opt({{"p", p}}, opts);
    p.ensure_grad() = {1.0f, 2.0f, 3.0f};
    opt.step(0.0);
    CHECK(p.at(0) == 1.0f);
    CHECK(p.at(1) == -2.0f);
    CHECK(p.at(2) == 3.0f);
}

TEST_CASE("adamw: hand-evaluated first step") {
    auto p = Tensor<float>::scalar(0.0f).set_requires_grad(true);
    AdamW<float>::Options opts;
    opts.weight_decay = 0.0;
    AdamW<float> opt({{"p", p}}, opts);
    p.ensure_grad() = {1.0f};
    opt.step(0.1);
    // Bias-corrected m-hat = v-hat = 1, so the step is -0.1/(1 + eps).
    CHECK(std::abs(double(p.at(0)) + 0.1) < 1e-6);
}

TEST_CASE("adamw: aborts on non-finite gradients with the parameter name") {
    auto p = Tensor<float>::scalar(0.0f).set_requires_grad(true);
    AdamW<float> opt({{"theta", p}}, {});
    p.ensure_grad() = {std::numeric_limits<float>::quiet_NaN()};
    try {
        opt.step(0.1);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("theta") != std::string::npos);
    }
}

TEST_CASE("adamw: skips parameters without gradients") {
    auto p = Tensor<float>::scalar(5.0f).set_requires_grad(true);
    AdamW<float> opt({{"p", p}}, {});
    opt.step(0.5);  // no grad allocated
    CHECK(p.at(0) == 5.0f);
}

TEST_CASE("linear decay schedule hits zero at the horizon") {
    CHECK(linear_decay_lr(1.0, 0, 10) == doctest::Approx(1.0));
    CHECK(linear_decay_lr(1.0, 5, 10) == doctest::Approx(0.5));
    CHECK(linear_decay_lr(1.0, 10, 10) == doctest::Approx(0.0));
}

TEST_CASE("few-shot subsample contracts") {
    auto& w = small_world();
    const auto& data = w.bench.dataset("t0");

    SUBCASE("k equal to the full size is the identity permutation") {
        auto out = few_shot_subsample(data, data.train.size(), 3);
        CHECK(!out.few_shot_mode);
        REQUIRE(out.train.size() == data.train.size());
        for (size_t i = 0; i < out.train.size(); ++i) {
            CHECK(out.train[i].tokens == data.train[i].tokens);
            CHECK(out.train[i].label == data.train[i].label);
        }
    }

    SUBCASE("same k and seed twice gives an identical sample") {
        auto a = few_shot_subsample(data, 16, 9);
        auto b = few_shot_subsample(data, 16, 9);
        REQUIRE(a.train.size() == 16);
        CHECK(a.few_shot_mode);
        for (size_t i = 0; i < 16; ++i) CHECK(a.train[i].tokens == b.train[i].tokens);
    }

    SUBCASE("k=4 on a binary task takes two per class") {
        auto out = few_shot_subsample(data, 4, 5);
        size_t c0 = 0, c1 = 0;
        for (const auto& ex : out.train) (ex.label == 0.0 ? c0 : c1) += 1;
        CHECK(c0 == 2);
        CHECK(c1 == 2);
    }

    SUBCASE("k above the train size is an error") {
        CHECK_THROWS_AS(few_shot_subsample(data, data.train.size() + 1, 0), ContractError);
    }
}

TEST_CASE("source adapter training learns the task and freezes cleanly") {
    auto& w = small_world();
    const auto& task = w.bench.task("t0");
    const auto& data = w.bench.dataset("t0");

    auto before = snapshot_bytes(w.backbone.named_params());
    auto result = train_source_adapter(task, data, w.backbone, fast_cfg(3e-4, 0));
    CHECK(snapshot_bytes(w.backbone.named_params()) == before);

    auto eval = evaluate_split(task, data.validation, w.backbone,
                               adapter_plugin(result.adapter), result.head);
    CHECK(eval.metric > 0.9);

    // History rows are well-formed and the loss moved after epoch 1.
    REQUIRE(result.history.size() >= 2);
    CHECK(result.history[0].epoch == 0);
    CHECK(result.history[1].train_loss < result.history[0].train_loss);

    auto jsonl = history_to_jsonl(result.history);
    CHECK(jsonl.find("\"epoch\":0") != std::string::npos);
    CHECK(jsonl.find("val_metric") != std::string::npos);
}

TEST_CASE("zero learning rate returns the initialization") {
    auto& w = small_world();
    const auto& task = w.bench.task("t1");
    const auto& data = w.bench.dataset("t1");
    TrainConfig cfg = fast_cfg(0.0, 3);
    cfg.max_epochs = 6;
    cfg.weight_decay = 0.0;
    auto result = train_source_adapter(task, data, w.backbone, cfg);
    auto init = adapter_init<float>(task.name, w.backbone.config.d_model, 16,
                                    w.backbone.config.n_layers, cfg.seed);
    CHECK(snapshot_bytes(result.adapter.named_params()) ==
          snapshot_bytes(init.named_params()));
    // Early stopping kicked in after exactly `patience` non-improving epochs.
    CHECK(result.history.size() == 1 + cfg.patience);
}

TEST_CASE("strictly worsening validation stops after exactly patience epochs") {
    auto& w = small_world();
    TaskSpec task;
    task.name = "conflict";
    task.kind = TaskKind::Classification;
    task.n_classes = 2;
    task.main_metric = Metric::Accuracy;

    // Train and validation disagree on the label of the same sequences, so
    // fitting train strictly worsens validation loss from the baseline on.
    Dataset data;
    const auto& donor = w.bench.dataset("t0").train;
    for (size_t i = 0; i < 8; ++i) data.train.push_back({donor[i].tokens, 0.0});
    for (size_t i = 0; i < 8; ++i) data.validation.push_back({donor[i].tokens, 1.0});
    data.test = data.validation;

    TrainConfig cfg = fast_cfg(5e-3, 1);
    auto result = train_head_only(task, data, w.backbone, nullptr, cfg);
    // Epoch 0 is the baseline best; exactly patience non-improving epochs ran.
    REQUIRE(result.history.size() == 1 + cfg.patience);
    for (size_t e = 1; e < result.history.size(); ++e)
        CHECK(result.history[e].val_loss > result.history[0].val_loss);
    CHECK(result.best_val_loss == doctest::Approx(result.history[0].val_loss));
}

TEST_CASE("two identical runs produce bit-identical results") {
    auto& w = small_world();
    const auto& task = w.bench.task("t1");
    Dataset data = w.bench.dataset("t1");
    data.train.resize(64);
    TrainConfig cfg = fast_cfg(3e-4, 11);
    cfg.max_epochs = 3;

    auto a = train_source_adapter(task, data, w.backbone, cfg);
    auto b = train_source_adapter(task, data, w.backbone, cfg);
    CHECK(snapshot_bytes(a.adapter.named_params()) == snapshot_bytes(b.adapter.named_params()));
    CHECK(snapshot_bytes(a.head.named_params()) == snapshot_bytes(b.head.named_params()));
    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].train_loss == b.history[i].train_loss);
        CHECK(a.history[i].val_loss == b.history[i].val_loss);
    }
}

TEST_CASE("transfer training: frozen inputs stay byte-identical, all methods") {
    auto& w = small_world();
    const auto& target = w.bench.task("t1");
    Dataset data = w.bench.dataset("t1");
    data.train.resize(48);  // keep the loop brief

    std::vector<AdapterParams> adapters;
    std::vector<const AdapterParams*> sources;
    for (const auto& name : w.bench.task_order) {
        adapters.push_back(adapter_init<float>(name, w.backbone.config.d_model, 16,
                                               w.backbone.config.n_layers,
                                               stable_hash(name)));
        adapters.back().set_trainable(false);
    }
    for (const auto& a : adapters) sources.push_back(&a);

    auto backbone_before = snapshot_bytes(w.backbone.named_params());
    std::vector<std::vector<uint8_t>> adapters_before;
    for (const auto& a : adapters) adapters_before.push_back(snapshot_bytes(a.named_params()));

    for (auto method :
         {CompositionMethod::ScaLearn, CompositionMethod::ScaLearnUniform,
          CompositionMethod::ScaLearnPP, CompositionMethod::ScaLearnUniformPP,
          CompositionMethod::Fusion, CompositionMethod::ScaLearnMean,
          CompositionMethod::ScaLearnSoftmax}) {
        TrainConfig cfg = fast_cfg(method == CompositionMethod::Fusion ? 5e-5 : 6e-3, 2);
        cfg.max_epochs = 3;
        auto result = train_transfer(target, data, sources, method, w.backbone, cfg);
        CHECK(snapshot_bytes(w.backbone.named_params()) == backbone_before);
        for (size_t i = 0; i < adapters.size(); ++i)
            CHECK(snapshot_bytes(adapters[i].named_params()) == adapters_before[i]);
        if (composition_uses_scaling(method)) {
            REQUIRE(result.scaling.has_value());
            CHECK(result.scaling->source_order == w.bench.task_order);
        } else {
            REQUIRE(result.fusion.has_value());
        }
    }
}

TEST_CASE("scaling initialization concentrates near 2/T") {
    auto& w = small_world();
    std::vector<std::string> names;
    std::vector<AdapterParams> adapters;
    for (size_t s = 0; s < 8; ++s) {
        names.push_back("s" + std::to_string(s));
        adapters.push_back(adapter_init<float>(names.back(), w.backbone.config.d_model, 16,
                                               w.backbone.config.n_layers, s));
        adapters.back().set_trainable(false);
    }
    std::vector<const AdapterParams*> sources;
    for (const auto& a : adapters) sources.push_back(&a);

    const auto& target = w.bench.task("t0");
    Dataset tiny = w.bench.dataset("t0");
    tiny.train.resize(8);
    tiny.validation.resize(8);
    TrainConfig cfg = fast_cfg(0.0, 5);
    cfg.max_epochs = 0;  // init only, no steps
    auto result =
        train_transfer(target, tiny, sources, CompositionMethod::ScaLearn, w.backbone, cfg);
    REQUIRE(result.scaling.has_value());
    for (const auto& row : result.scaling->omega)
        for (const auto& t : row)
            for (size_t i = 0; i < t.numel(); ++i) {
                CHECK(t.at(i) > 0.25 - 0.01);
                CHECK(t.at(i) < 0.25 + 0.01);
            }
}

TEST_CASE("single frozen source at omega=1 equals the head-only probe bitwise") {
    auto& w = small_world();
    const auto& target = w.bench.task("t0");
    Dataset data = w.bench.dataset("t0");
    data.train.resize(64);

    auto adapter = adapter_init<float>("t0", w.backbone.config.d_model, 16,
                                       w.backbone.config.n_layers, 99);
    adapter.set_trainable(false);
    std::vector<const AdapterParams*> sources{&adapter};

    TrainConfig cfg = fast_cfg(3e-4, 13);
    cfg.max_epochs = 4;
    auto via_transfer = train_transfer(target, data, sources, CompositionMethod::ScaLearnUniform,
                                       w.backbone, cfg, 1.0);
    auto via_probe = train_transfer(target, data, sources,
                                    CompositionMethod::ScaLearnUniformPP, w.backbone, cfg, 1.0);

    CHECK(snapshot_bytes(via_transfer.head.named_params()) ==
          snapshot_bytes(via_probe.head.named_params()));

    auto ea = evaluate_split(target, data.test, w.backbone,
                             scalearn_plugin(sources, *via_transfer.scaling,
                                             CompositionMethod::ScaLearnUniform, 0.0),
                             via_transfer.head);
    auto eb = evaluate_split(target, data.test, w.backbone,
                             probe_plugin(sources, {1.0}), via_probe.head);
    CHECK(ea.metric == eb.metric);
    REQUIRE(ea.pred_values.size() == eb.pred_values.size());
    for (size_t i = 0; i < ea.pred_values.size(); ++i)
        CHECK(ea.pred_values[i] == eb.pred_values[i]);
}

TEST_CASE("transfer rejects unfrozen inputs and empty sources") {
    auto& w = small_world();
    const auto& target = w.bench.task("t0");
    const auto& data = w.bench.dataset("t0");
    CHECK_THROWS_AS(train_transfer(target, data, {}, CompositionMethod::ScaLearn, w.backbone,
                                   fast_cfg(6e-3)),
                    ContractError);

    auto adapter = adapter_init<float>("t0", w.backbone.config.d_model, 16,
                                       w.backbone.config.n_layers, 1);
    adapter.set_trainable(true);  // deliberately unfrozen
    std::vector<const AdapterParams*> sources{&adapter};
    CHECK_THROWS_AS(
        train_transfer(target, data, sources, CompositionMethod::ScaLearn, w.backbone,
                       fast_cfg(6e-3)),
        ContractError);
}

TEST_CASE("empty train split is an error") {
    auto& w = small_world();
    const auto& task = w.bench.task("t0");
    Dataset empty;
    empty.validation = w.bench.dataset("t0").validation;
    empty.test = empty.validation;
    CHECK_THROWS_AS(train_source_adapter(task, empty, w.backbone, fast_cfg(3e-4)), DataError);
}
