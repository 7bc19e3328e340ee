#include "scalearn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "scalearn/backbone.hpp"
#include "scalearn/checkpoint.hpp"

namespace scalearn {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::vector<std::vector<int>> Benchmark::warmup_corpus() const {
    std::vector<std::vector<int>> corpus;
    for (const auto& name : task_order) {
        for (const auto& ex : datasets.at(name).train) corpus.push_back(ex.tokens);
    }
    return corpus;
}

namespace {

using Vec = std::vector<double>;

Vec randn_vec(size_t n, Rng& rng) {
    Vec v(n);
    for (double& x : v) x = rng.normal(0.0, 1.0);
    return v;
}

void normalize(Vec& v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n == 0) return;
    for (double& x : v) x /= n;
}

double dot(const Vec& a, const Vec& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// A task's labeling rules: one unit vector per class (or one for regression),
// each an interpolation between the shared bank rule for that slot and a
// task-private direction.
struct TaskRules {
    std::vector<Vec> class_rules;
};

TaskRules make_rules(const std::vector<Vec>& bank, size_t n_rules, double rho, Rng& rng) {
    TaskRules rules;
    const double shared_w = std::sqrt(rho);
    const double private_w = std::sqrt(1.0 - rho);
    for (size_t c = 0; c < n_rules; ++c) {
        Vec priv = randn_vec(bank[c].size(), rng);
        normalize(priv);
        Vec rule(bank[c].size());
        for (size_t i = 0; i < rule.size(); ++i)
            rule[i] = shared_w * bank[c][i] + private_w * priv[i];
        normalize(rule);
        rules.class_rules.push_back(std::move(rule));
    }
    return rules;
}

// Tokens are drawn from a softmax over content tokens tilted by the latent
// point, so bag-of-token counts carry the latent features.
std::vector<int> emit_tokens(const Vec& z, const std::vector<Vec>& token_proj, double temperature,
                             size_t seq_len, Rng& rng) {
    const size_t n_content = token_proj.size();
    Vec logits(n_content);
    const double inv_sqrt = 1.0 / std::sqrt(double(z.size()));
    double mx = -1e300;
    for (size_t j = 0; j < n_content; ++j) {
        logits[j] = temperature * inv_sqrt * dot(token_proj[j], z);
        mx = std::max(mx, logits[j]);
    }
    double denom = 0;
    for (double& l : logits) {
        l = std::exp(l - mx);
        denom += l;
    }
    std::vector<int> tokens{CLS_TOKEN};
    for (size_t t = 0; t < seq_len; ++t) {
        double u = rng.uniform(0.0, 1.0) * denom;
        size_t pick = n_content - 1;
        double acc = 0;
        for (size_t j = 0; j < n_content; ++j) {
            acc += logits[j];
            if (u <= acc) {
                pick = j;
                break;
            }
        }
        tokens.push_back(int(2 + pick));
    }
    return tokens;
}

Example draw_example(const TaskSpec& spec, const TaskRules& rules,
                     const std::vector<Vec>& token_proj, const BenchmarkSpec& bspec, Rng& rng) {
    Vec z = randn_vec(bspec.latent_dim, rng);
    Example ex;
    if (spec.kind == TaskKind::Regression) {
        double y = dot(rules.class_rules[0], z);
        if (bspec.label_noise > 0) y += rng.normal(0.0, bspec.label_noise);
        ex.label = y;
    } else {
        size_t best = 0;
        double best_score = dot(rules.class_rules[0], z);
        for (size_t c = 1; c < spec.n_classes; ++c) {
            const double s = dot(rules.class_rules[c], z);
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        if (bspec.label_noise > 0 && rng.bernoulli(bspec.label_noise))
            best = rng.uniform_int(spec.n_classes);
        ex.label = double(best);
    }
    ex.tokens = emit_tokens(z, token_proj, bspec.token_temperature, bspec.seq_len, rng);
    return ex;
}

// Classification splits are quota-balanced per class so stratified few-shot
// sampling and chance-level baselines behave.
Split draw_split(const TaskSpec& spec, const TaskRules& rules,
                 const std::vector<Vec>& token_proj, const BenchmarkSpec& bspec, size_t size,
                 Rng& rng) {
    Split split;
    if (spec.kind == TaskKind::Regression) {
        for (size_t i = 0; i < size; ++i)
            split.push_back(draw_example(spec, rules, token_proj, bspec, rng));
        return split;
    }
    std::vector<size_t> quota(spec.n_classes, size / spec.n_classes);
    for (size_t c = 0; c < size % spec.n_classes; ++c) quota[c] += 1;
    size_t attempts = 0;
    const size_t max_attempts = 500 * size + 1000;
    while (split.size() < size) {
        if (++attempts > max_attempts)
            throw DataError("benchmark generation: class quota unreachable for task " +
                            spec.name);
        Example ex = draw_example(spec, rules, token_proj, bspec, rng);
        size_t c = size_t(ex.label);
        if (quota[c] == 0) continue;
        quota[c] -= 1;
        split.push_back(std::move(ex));
    }
    return split;
}

}  // namespace

Benchmark generate_benchmark(const BenchmarkSpec& spec, uint64_t seed) {
    spec.validate();
    Benchmark bench;
    bench.spec = spec;
    bench.seed = seed;

    Rng root(splitmix64(seed ^ 0xbe9c4a11ULL));

    // Shared latent structure: token projections and the rule bank.
    const size_t n_content = spec.vocab_size - 2;
    std::vector<Vec> token_proj(n_content);
    for (auto& col : token_proj) col = randn_vec(spec.latent_dim, root);
    const size_t max_rules = 5;  // up to 4 classes plus the regression slot
    std::vector<Vec> bank(max_rules);
    for (auto& rule : bank) {
        rule = randn_vec(spec.latent_dim, root);
        normalize(rule);
    }

    // Task layout: hi-resource classification with varying class counts and
    // metrics, one regression task, one low-resource classification task.
    struct Layout {
        TaskKind kind;
        size_t n_classes;
        Metric metric;
        bool low_resource;
    };
    const std::vector<Layout> layouts = {
        {TaskKind::Classification, 2, Metric::Accuracy, false},
        {TaskKind::Classification, 2, Metric::Matthews, false},
        {TaskKind::Classification, 3, Metric::F1Macro, false},
        {TaskKind::Classification, 4, Metric::Accuracy, false},
        {TaskKind::Regression, 1, Metric::Pearson, false},
        {TaskKind::Classification, 2, Metric::Accuracy, true},
    };

    for (size_t t = 0; t < spec.n_tasks; ++t) {
        const Layout& lay = layouts[t % layouts.size()];
        TaskSpec ts;
        ts.name = "t" + std::to_string(t);
        ts.kind = lay.kind;
        ts.n_classes = lay.kind == TaskKind::Regression ? 1 : lay.n_classes;
        ts.main_metric = lay.metric;
        ts.train_size = lay.low_resource ? spec.low_resource_train_size : spec.train_size;
        ts.val_size = spec.val_size;
        ts.test_size = spec.test_size;
        ts.validate();

        Rng task_rng = root.child(splitmix64(0x7a5c + t));
        const size_t n_rules = lay.kind == TaskKind::Regression ? 1 : lay.n_classes;
        // Regression draws from the dedicated last bank slot.
        std::vector<Vec> slots;
        if (lay.kind == TaskKind::Regression) {
            slots.push_back(bank[max_rules - 1]);
        } else {
            for (size_t c = 0; c < n_rules; ++c) slots.push_back(bank[c]);
        }
        TaskRules rules = make_rules(slots, n_rules, spec.rho, task_rng);

        Dataset ds;
        Rng train_rng = task_rng.child(1);
        Rng val_rng = task_rng.child(2);
        Rng test_rng = task_rng.child(3);
        ds.train = draw_split(ts, rules, token_proj, spec, ts.train_size, train_rng);
        ds.validation = draw_split(ts, rules, token_proj, spec, ts.val_size, val_rng);
        ds.test = draw_split(ts, rules, token_proj, spec, ts.test_size, test_rng);

        bench.task_order.push_back(ts.name);
        bench.specs[ts.name] = ts;
        bench.datasets[ts.name] = std::move(ds);
    }
    return bench;
}

// -- JSONL ---------------------------------------------------------------

void save_jsonl(const Split& split, const fs::path& path) {
    std::string out;
    for (const Example& ex : split) {
        ordered_json j;
        j["tokens"] = ex.tokens;
        const double r = std::round(ex.label);
        if (r == ex.label && std::abs(ex.label) < 1e15)
            j["label"] = int64_t(ex.label);
        else
            j["label"] = ex.label;
        out += j.dump();
        out += "\n";
    }
    atomic_write_file(path, out);
}

Split load_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    Split split;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw DataError("malformed record at " + path.string() + ":" +
                            std::to_string(line_no) + ": " + e.what());
        }
        if (!j.contains("tokens") || !j.contains("label") || !j["tokens"].is_array() ||
            !j["label"].is_number())
            throw DataError("malformed record at " + path.string() + ":" +
                            std::to_string(line_no) + ": expected {\"tokens\": [...], \"label\"}");
        Example ex;
        for (const auto& t : j["tokens"]) {
            if (!t.is_number_integer())
                throw DataError("malformed record at " + path.string() + ":" +
                                std::to_string(line_no) + ": non-integer token");
            ex.tokens.push_back(t.get<int>());
        }
        ex.label = j["label"].get<double>();
        split.push_back(std::move(ex));
    }
    return split;
}

// -- benchmark directory ---------------------------------------------------

void save_benchmark(const Benchmark& bench, const fs::path& dir) {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["seed"] = bench.seed;
    manifest["spec"] = {{"n_tasks", bench.spec.n_tasks},
                        {"latent_dim", bench.spec.latent_dim},
                        {"rho", bench.spec.rho},
                        {"vocab_size", bench.spec.vocab_size},
                        {"seq_len", bench.spec.seq_len},
                        {"train_size", bench.spec.train_size},
                        {"low_resource_train_size", bench.spec.low_resource_train_size},
                        {"val_size", bench.spec.val_size},
                        {"test_size", bench.spec.test_size},
                        {"label_noise", bench.spec.label_noise},
                        {"token_temperature", bench.spec.token_temperature}};
    manifest["tasks"] = ordered_json::array();
    for (const auto& name : bench.task_order) {
        const TaskSpec& ts = bench.specs.at(name);
        const Dataset& ds = bench.datasets.at(name);
        ordered_json tj;
        tj["name"] = ts.name;
        tj["kind"] = ts.kind == TaskKind::Regression ? "regression" : "classification";
        tj["n_classes"] = ts.n_classes;
        tj["main_metric"] = metric_name(ts.main_metric);
        tj["sizes"] = {{"train", ts.train_size},
                       {"validation", ts.val_size},
                       {"test", ts.test_size}};
        ordered_json splits;
        for (const char* split_name : {"train", "validation", "test"}) {
            const std::string file = name + "." + split_name + ".jsonl";
            save_jsonl(ds.split(split_name), dir / file);
            splits[split_name] = file;
        }
        tj["splits"] = splits;
        manifest["tasks"].push_back(tj);
    }
    atomic_write_file(dir / "manifest.json", manifest.dump(2));
}

Benchmark load_benchmark(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw MissingCheckpointError("no benchmark manifest at " + manifest_path.string());
    ordered_json manifest;
    try {
        manifest = ordered_json::parse(in);
    } catch (const std::exception& e) {
        throw DataError("bad benchmark manifest: " + std::string(e.what()));
    }
    const fs::path dir = manifest_path.parent_path();

    Benchmark bench;
    bench.seed = manifest.value("seed", 0);
    if (manifest.contains("spec")) {
        const auto& s = manifest["spec"];
        bench.spec.n_tasks = s.value("n_tasks", bench.spec.n_tasks);
        bench.spec.latent_dim = s.value("latent_dim", bench.spec.latent_dim);
        bench.spec.rho = s.value("rho", bench.spec.rho);
        bench.spec.vocab_size = s.value("vocab_size", bench.spec.vocab_size);
        bench.spec.seq_len = s.value("seq_len", bench.spec.seq_len);
        bench.spec.train_size = s.value("train_size", bench.spec.train_size);
        bench.spec.low_resource_train_size =
            s.value("low_resource_train_size", bench.spec.low_resource_train_size);
        bench.spec.val_size = s.value("val_size", bench.spec.val_size);
        bench.spec.test_size = s.value("test_size", bench.spec.test_size);
        bench.spec.label_noise = s.value("label_noise", bench.spec.label_noise);
        bench.spec.token_temperature =
            s.value("token_temperature", bench.spec.token_temperature);
    }
    for (const auto& tj : manifest.at("tasks")) {
        TaskSpec ts;
        ts.name = tj.at("name");
        ts.kind = tj.at("kind") == "regression" ? TaskKind::Regression : TaskKind::Classification;
        ts.n_classes = tj.at("n_classes");
        ts.main_metric = metric_from_name(tj.at("main_metric"));
        ts.train_size = tj.at("sizes").at("train");
        ts.val_size = tj.at("sizes").at("validation");
        ts.test_size = tj.at("sizes").at("test");
        ts.validate();

        Dataset ds;
        ds.train = load_jsonl(dir / tj.at("splits").at("train").get<std::string>());
        ds.validation = load_jsonl(dir / tj.at("splits").at("validation").get<std::string>());
        ds.test = load_jsonl(dir / tj.at("splits").at("test").get<std::string>());

        bench.task_order.push_back(ts.name);
        bench.specs[ts.name] = ts;
        bench.datasets[ts.name] = std::move(ds);
    }
    return bench;
}

}  // namespace scalearn
