#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "scalearn/adapter.hpp"
#include "scalearn/backbone.hpp"
#include "scalearn/composition.hpp"
#include "scalearn/head.hpp"

namespace scalearn {

// Checkpoint directory layout shared by every module: manifest.json lists
// {name, shape, dtype:"f32", byte_offset, byte_len} entries and weights.bin
// holds the little-endian float32 payloads concatenated in manifest order.
// Round-trips are bit-exact. The manifest also carries a free-form "meta"
// object for structural metadata (configs, variant tags, source order).

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

void save_checkpoint(const std::filesystem::path& dir, const NamedTensors& tensors,
                     const std::string& meta_json = "{}");

struct LoadedCheckpoint {
    NamedTensors tensors;  // in manifest order
    std::string meta_json;

    const Tensor<float>& tensor(const std::string& name) const;
    bool has(const std::string& name) const;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// Deterministic byte serialization of a parameter set; the frozen-parameter
// invariant compares these snapshots before and after training runs.
std::vector<uint8_t> snapshot_bytes(const NamedTensors& tensors);

// Struct-level helpers.
void save_backbone(const std::filesystem::path& dir, const BackboneParams& bb);
BackboneParams load_backbone(const std::filesystem::path& dir);

void save_adapter(const std::filesystem::path& dir, const AdapterParams& adapter,
                  size_t n_backbone_layers);
AdapterParams load_adapter(const std::filesystem::path& dir);

void save_scaling(const std::filesystem::path& dir, const ScalingParams& sp,
                  const std::string& target_task);
ScalingParams load_scaling(const std::filesystem::path& dir, std::string* target_task = nullptr);

void save_fusion(const std::filesystem::path& dir, const FusionParams& fp,
                 const std::string& target_task);
FusionParams load_fusion(const std::filesystem::path& dir, std::string* target_task = nullptr);

void save_head(const std::filesystem::path& dir, const TaskHead& head);
TaskHead load_head(const std::filesystem::path& dir);

// Atomic small-file write (write temp, rename over target).
void atomic_write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace scalearn
