#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "scalearn/backbone.hpp"
#include "scalearn/ops.hpp"

namespace scalearn {

// One Pfeiffer-style bottleneck adapter stack: a down-projection, ReLU,
// up-projection and residual at every backbone layer, with biases in both
// projections.
template <typename T>
struct AdapterParamsT {
    std::string task_name;
    size_t d = 0;
    size_t reduction = 0;  // bottleneck width is d / reduction

    struct Layer {
        Tensor<T> down_w, down_b;  // [d x d/r], [d/r]
        Tensor<T> up_w, up_b;      // [d/r x d], [d]
    };
    std::vector<Layer> layers;

    size_t bottleneck() const { return d / reduction; }
    size_t n_layers() const { return layers.size(); }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "adapter/" + task_name + "/layer" + std::to_string(l) + "/";
            out.emplace_back(p + "D", layers[l].down_w);
            out.emplace_back(p + "bD", layers[l].down_b);
            out.emplace_back(p + "U", layers[l].up_w);
            out.emplace_back(p + "bU", layers[l].up_b);
        }
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, p] : named_params()) p.set_requires_grad(trainable);
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [name, p] : named_params()) n += p.numel();
        return n;
    }

    template <typename U>
    AdapterParamsT<U> cast() const {
        AdapterParamsT<U> out;
        out.task_name = task_name;
        out.d = d;
        out.reduction = reduction;
        out.layers.resize(layers.size());
        for (size_t l = 0; l < layers.size(); ++l) {
            out.layers[l].down_w = layers[l].down_w.template cast<U>();
            out.layers[l].down_b = layers[l].down_b.template cast<U>();
            out.layers[l].up_w = layers[l].up_w.template cast<U>();
            out.layers[l].up_b = layers[l].up_b.template cast<U>();
        }
        return out;
    }
};

using AdapterParams = AdapterParamsT<float>;

// L * (d*(d/r) + d/r + (d/r)*d + d): both projections plus their biases.
inline size_t adapter_param_count(size_t d, size_t r, size_t n_layers) {
    if (r == 0 || d % r != 0)
        throw ContractError("adapter_param_count: reduction factor must divide d");
    const size_t bn = d / r;
    return n_layers * (d * bn + bn + bn * d + d);
}

// Small-variance projections keep the initial forward near the residual
// identity.
template <typename T>
AdapterParamsT<T> adapter_init(const std::string& task_name, size_t d, size_t reduction,
                               size_t n_layers, uint64_t seed) {
    if (reduction == 0 || d % reduction != 0)
        throw ContractError("adapter_init: reduction factor must divide d");
    AdapterParamsT<T> a;
    a.task_name = task_name;
    a.d = d;
    a.reduction = reduction;
    const size_t bn = d / reduction;
    Rng rng(splitmix64(seed ^ 0xada97e25ULL));
    a.layers.resize(n_layers);
    for (auto& ly : a.layers) {
        ly.down_w = detail::randn_tensor<T>({d, bn}, rng, 0.02);
        ly.down_b = Tensor<T>::zeros({bn});
        ly.up_w = detail::randn_tensor<T>({bn, d}, rng, 0.02);
        ly.up_b = Tensor<T>::zeros({d});
    }
    return a;
}

// o = U(ReLU(D(x))) + x with biases in both projections.
template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const AdapterParamsT<T>& params, size_t layer) {
    if (layer >= params.layers.size())
        throw ContractError("adapter_forward: layer " + std::to_string(layer) +
                            " out of range for " + std::to_string(params.layers.size()) +
                            " layers");
    if (x.dim() != 2 || x.cols() != params.d)
        throw ShapeError("adapter_forward: input " + shape_str(x.shape()) +
                         " does not end in d=" + std::to_string(params.d));
    const auto& ly = params.layers[layer];
    Tensor<T> h = relu(affine(x, ly.down_w, ly.down_b));
    Tensor<T> o = affine(h, ly.up_w, ly.up_b);
    return add(o, x);
}

// ---------------------------------------------------------------------------
// Weight-space averaging of adapters (the soup baseline).
// ---------------------------------------------------------------------------

// Parameter-wise convex combination of compatible adapters. Weights must be
// nonnegative; if they do not sum to 1 they are normalized and
// `renormalized` is flagged so the caller can record a warning.
template <typename T>
AdapterParamsT<T> adapter_soup_merge(const std::vector<AdapterParamsT<T>>& adapters,
                                     std::vector<double> weights,
                                     bool* renormalized = nullptr) {
    if (adapters.empty()) throw ContractError("adapter_soup_merge: no adapters");
    if (weights.size() != adapters.size())
        throw ContractError("adapter_soup_merge: weight count does not match adapters");
    const auto& first = adapters.front();
    for (const auto& a : adapters) {
        if (a.d != first.d || a.reduction != first.reduction ||
            a.layers.size() != first.layers.size())
            throw ShapeError("adapter_soup_merge: incompatible adapter shapes for task " +
                             a.task_name);
    }
    double total = 0;
    for (double w : weights) {
        if (w < 0) throw ContractError("adapter_soup_merge: negative weight");
        total += w;
    }
    if (total == 0) throw ContractError("adapter_soup_merge: weights sum to zero");
    const bool needs_norm = std::abs(total - 1.0) > 1e-6;
    if (needs_norm)
        for (double& w : weights) w /= total;
    if (renormalized) *renormalized = needs_norm;

    AdapterParamsT<T> out;
    out.task_name = "soup";
    out.d = first.d;
    out.reduction = first.reduction;
    out.layers.resize(first.layers.size());
    auto blend = [&](auto member) {
        for (size_t l = 0; l < out.layers.size(); ++l) {
            Tensor<T> acc = Tensor<T>::zeros((adapters[0].layers[l].*member).shape());
            for (size_t i = 0; i < adapters.size(); ++i) {
                const Tensor<T>& src = adapters[i].layers[l].*member;
                for (size_t j = 0; j < acc.numel(); ++j)
                    acc.at(j) += T(weights[i]) * src.at(j);
            }
            out.layers[l].*member = acc;
        }
    };
    blend(&AdapterParamsT<T>::Layer::down_w);
    blend(&AdapterParamsT<T>::Layer::down_b);
    blend(&AdapterParamsT<T>::Layer::up_w);
    blend(&AdapterParamsT<T>::Layer::up_b);
    return out;
}

// ---------------------------------------------------------------------------
// Corpus similarity for soup weighting: cosine similarity between mean
// pooled frozen-backbone representations of each task's training sequences.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<double> task_corpus_embedding(const std::vector<std::vector<int>>& sequences,
                                          const BackboneParamsT<T>& backbone,
                                          size_t sample_cap = 512) {
    if (sequences.empty()) throw DataError("task_corpus_embedding: empty dataset");
    const size_t n = std::min(sample_cap, sequences.size());
    std::vector<double> acc(backbone.config.d_model, 0.0);
    ForwardCtx ctx;
    for (size_t i = 0; i < n; ++i) {
        auto out = encoder_forward<T>(sequences[i], backbone, nullptr, ctx);
        for (size_t c = 0; c < acc.size(); ++c) acc[c] += double(out.pooled.at(c));
    }
    for (double& v : acc) v /= double(n);
    return acc;
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Keeps the top_k most similar tasks to the target (the target itself is a
// candidate and always survives with self-similarity 1) and normalizes the
// kept similarities to sum to 1; everything else gets weight 0.
inline std::map<std::string, double> similarity_weights_from_embeddings(
    const std::map<std::string, std::vector<double>>& embeddings, const std::string& target,
    size_t top_k) {
    if (!embeddings.count(target))
        throw ContractError("task_similarity_weights: target " + target + " not among candidates");
    if (top_k == 0 || top_k > embeddings.size())
        throw ContractError("task_similarity_weights: top_k out of range");

    const auto& tgt = embeddings.at(target);
    std::vector<std::pair<std::string, double>> sims;
    for (const auto& [name, emb] : embeddings)
        sims.emplace_back(name, cosine_similarity(tgt, emb));
    std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    double total = 0;
    for (size_t i = 0; i < top_k; ++i) total += sims[i].second;
    if (total <= 0)
        throw NumericError("task_similarity_weights: kept similarities sum to zero");

    std::map<std::string, double> weights;
    for (const auto& [name, emb] : embeddings) weights[name] = 0.0;
    for (size_t i = 0; i < top_k; ++i) weights[sims[i].first] = sims[i].second / total;
    return weights;
}

template <typename T>
std::map<std::string, double> task_similarity_weights(
    const std::map<std::string, std::vector<std::vector<int>>>& task_sequences,
    const std::string& target, size_t top_k, const BackboneParamsT<T>& backbone,
    size_t sample_cap = 512) {
    std::map<std::string, std::vector<double>> embeddings;
    for (const auto& [name, seqs] : task_sequences)
        embeddings[name] = task_corpus_embedding(seqs, backbone, sample_cap);
    return similarity_weights_from_embeddings(embeddings, target, top_k);
}

}  // namespace scalearn
