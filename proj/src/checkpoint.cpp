#include "scalearn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace scalearn {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void atomic_write_file(const fs::path& path, const std::string& contents) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp.string());
        out.write(contents.data(), std::streamsize(contents.size()));
        if (!out) throw DataError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

void save_checkpoint(const fs::path& dir, const NamedTensors& tensors,
                     const std::string& meta_json) {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["entries"] = ordered_json::array();
    std::string blob;
    for (const auto& [name, t] : tensors) {
        ordered_json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["dtype"] = "f32";
        e["byte_offset"] = blob.size();
        e["byte_len"] = t.numel() * sizeof(float);
        manifest["entries"].push_back(e);
        const size_t off = blob.size();
        blob.resize(off + t.numel() * sizeof(float));
        std::memcpy(blob.data() + off, t.ptr(), t.numel() * sizeof(float));
    }
    manifest["meta"] = ordered_json::parse(meta_json);
    atomic_write_file(dir / "weights.bin", blob);
    atomic_write_file(dir / "manifest.json", manifest.dump(2));
}

const Tensor<float>& LoadedCheckpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw MissingCheckpointError("checkpoint has no tensor named " + name);
}

bool LoadedCheckpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    const fs::path weights_path = dir / "weights.bin";
    if (!fs::exists(manifest_path) || !fs::exists(weights_path))
        throw MissingCheckpointError("no checkpoint at " + dir.string());

    std::ifstream mf(manifest_path);
    ordered_json manifest;
    try {
        manifest = ordered_json::parse(mf);
    } catch (const std::exception& e) {
        throw DataError("bad manifest at " + manifest_path.string() + ": " + e.what());
    }

    std::ifstream wf(weights_path, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(wf)), std::istreambuf_iterator<char>());

    LoadedCheckpoint out;
    for (const auto& e : manifest.at("entries")) {
        const std::string name = e.at("name");
        const Shape shape = e.at("shape").get<Shape>();
        const size_t off = e.at("byte_offset");
        const size_t len = e.at("byte_len");
        if (e.at("dtype") != "f32")
            throw DataError("checkpoint entry " + name + " has unsupported dtype");
        if (off + len > blob.size())
            throw DataError("checkpoint entry " + name + " overruns weights.bin");
        if (len != shape_numel(shape) * sizeof(float))
            throw DataError("checkpoint entry " + name + " length does not match its shape");
        std::vector<float> values(shape_numel(shape));
        std::memcpy(values.data(), blob.data() + off, len);
        out.tensors.emplace_back(name, Tensor<float>::from(shape, std::move(values)));
    }
    out.meta_json = manifest.value("meta", ordered_json::object()).dump();
    return out;
}

std::vector<uint8_t> snapshot_bytes(const NamedTensors& tensors) {
    std::vector<uint8_t> out;
    for (const auto& [name, t] : tensors) {
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(0);
        const size_t off = out.size();
        out.resize(off + t.numel() * sizeof(float));
        std::memcpy(out.data() + off, t.ptr(), t.numel() * sizeof(float));
    }
    return out;
}

// -- struct-level helpers ----------------------------------------------------

void save_backbone(const fs::path& dir, const BackboneParams& bb) {
    ordered_json meta;
    meta["kind"] = "backbone";
    meta["config"] = {{"vocab_size", bb.config.vocab_size},   {"d_model", bb.config.d_model},
                      {"n_layers", bb.config.n_layers},       {"n_heads", bb.config.n_heads},
                      {"ffn_dim", bb.config.ffn_dim},         {"max_seq_len", bb.config.max_seq_len},
                      {"dropout_p", bb.config.dropout_p}};
    meta["frozen"] = bb.frozen;
    save_checkpoint(dir, bb.named_params(), meta.dump());
}

BackboneParams load_backbone(const fs::path& dir) {
    auto ck = load_checkpoint(dir);
    auto meta = ordered_json::parse(ck.meta_json);
    if (meta.value("kind", "") != "backbone")
        throw DataError("checkpoint at " + dir.string() + " is not a backbone");
    BackboneConfig cfg;
    const auto& c = meta.at("config");
    cfg.vocab_size = c.at("vocab_size");
    cfg.d_model = c.at("d_model");
    cfg.n_layers = c.at("n_layers");
    cfg.n_heads = c.at("n_heads");
    cfg.ffn_dim = c.at("ffn_dim");
    cfg.max_seq_len = c.at("max_seq_len");
    cfg.dropout_p = c.at("dropout_p");

    BackboneParams bb = backbone_raw_init<float>(cfg, 0);
    for (auto& [name, p] : bb.named_params()) p.copy_values_from(ck.tensor(name));
    bb.set_trainable(false);
    return bb;
}

void save_adapter(const fs::path& dir, const AdapterParams& adapter, size_t n_backbone_layers) {
    ordered_json meta;
    meta["kind"] = "adapter";
    meta["task"] = adapter.task_name;
    meta["d"] = adapter.d;
    meta["reduction"] = adapter.reduction;
    meta["n_layers"] = n_backbone_layers;
    save_checkpoint(dir, adapter.named_params(), meta.dump());
}

AdapterParams load_adapter(const fs::path& dir) {
    auto ck = load_checkpoint(dir);
    auto meta = ordered_json::parse(ck.meta_json);
    if (meta.value("kind", "") != "adapter")
        throw DataError("checkpoint at " + dir.string() + " is not an adapter");
    AdapterParams a = adapter_init<float>(meta.at("task"), meta.at("d"), meta.at("reduction"),
                                          meta.at("n_layers"), 0);
    for (auto& [name, p] : a.named_params()) p.copy_values_from(ck.tensor(name));
    a.set_trainable(false);
    return a;
}

void save_scaling(const fs::path& dir, const ScalingParams& sp, const std::string& target_task) {
    ordered_json meta;
    meta["kind"] = "scaling";
    meta["target"] = target_task;
    meta["variant"] = scale_variant_name(sp.variant);
    meta["d"] = sp.d;
    meta["n_layers"] = sp.n_layers;
    meta["source_order"] = sp.source_order;
    save_checkpoint(dir, sp.named_params(), meta.dump());
}

ScalingParams load_scaling(const fs::path& dir, std::string* target_task) {
    auto ck = load_checkpoint(dir);
    auto meta = ordered_json::parse(ck.meta_json);
    if (meta.value("kind", "") != "scaling")
        throw DataError("checkpoint at " + dir.string() + " is not a scaling transfer layer");
    ScalingParams sp = scaling_const<float>(
        scale_variant_from_name(meta.at("variant")), meta.at("d"), meta.at("n_layers"),
        meta.at("source_order").get<std::vector<std::string>>(), 0.0);
    for (auto& [name, p] : sp.named_params()) p.copy_values_from(ck.tensor(name));
    if (target_task) *target_task = meta.at("target");
    return sp;
}

void save_fusion(const fs::path& dir, const FusionParams& fp, const std::string& target_task) {
    ordered_json meta;
    meta["kind"] = "fusion";
    meta["target"] = target_task;
    meta["d"] = fp.d;
    meta["n_layers"] = fp.layers.size();
    save_checkpoint(dir, fp.named_params(), meta.dump());
}

FusionParams load_fusion(const fs::path& dir, std::string* target_task) {
    auto ck = load_checkpoint(dir);
    auto meta = ordered_json::parse(ck.meta_json);
    if (meta.value("kind", "") != "fusion")
        throw DataError("checkpoint at " + dir.string() + " is not a fusion transfer layer");
    FusionParams fp = fusion_init<float>(meta.at("d"), meta.at("n_layers"), 0);
    for (auto& [name, p] : fp.named_params()) p.copy_values_from(ck.tensor(name));
    if (target_task) *target_task = meta.at("target");
    return fp;
}

void save_head(const fs::path& dir, const TaskHead& head) {
    ordered_json meta;
    meta["kind"] = "head";
    save_checkpoint(dir, head.named_params(), meta.dump());
}

TaskHead load_head(const fs::path& dir) {
    auto ck = load_checkpoint(dir);
    auto meta = ordered_json::parse(ck.meta_json);
    if (meta.value("kind", "") != "head")
        throw DataError("checkpoint at " + dir.string() + " is not a task head");
    TaskHead head;
    head.weight = ck.tensor("head/W").clone();
    head.bias = ck.tensor("head/b").clone();
    return head;
}

}  // namespace scalearn
