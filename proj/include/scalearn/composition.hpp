#pragma once

#include <string>
#include <utility>
#include <vector>

#include "scalearn/ops.hpp"

namespace scalearn {

// Storage layout of the learned scaling coefficients for one target task.
// Non-uniform variants hold a d-vector per slot (applied via the Hadamard
// product), uniform variants a single scalar; shared variants reuse one slot
// across all layers.
enum class ScaleVariant {
    NonUniformPerLayer,  // omega[l][s] in R^d
    UniformPerLayer,     // omega[l][s] scalar
    NonUniformShared,    // omega[s] in R^d
    UniformShared,       // omega[s] scalar
};

inline const char* scale_variant_name(ScaleVariant v) {
    switch (v) {
        case ScaleVariant::NonUniformPerLayer: return "scalearn";
        case ScaleVariant::UniformPerLayer: return "scalearn_uniform";
        case ScaleVariant::NonUniformShared: return "scalearn_pp";
        case ScaleVariant::UniformShared: return "scalearn_uniform_pp";
    }
    throw ContractError("unknown scaling variant");
}

inline ScaleVariant scale_variant_from_name(const std::string& name) {
    if (name == "scalearn") return ScaleVariant::NonUniformPerLayer;
    if (name == "scalearn_uniform") return ScaleVariant::UniformPerLayer;
    if (name == "scalearn_pp") return ScaleVariant::NonUniformShared;
    if (name == "scalearn_uniform_pp") return ScaleVariant::UniformShared;
    throw ContractError("unknown scaling variant name: " + name);
}

inline bool variant_is_uniform(ScaleVariant v) {
    return v == ScaleVariant::UniformPerLayer || v == ScaleVariant::UniformShared;
}

inline bool variant_is_shared(ScaleVariant v) {
    return v == ScaleVariant::NonUniformShared || v == ScaleVariant::UniformShared;
}

// The omega values are unconstrained reals; no normalization is applied
// anywhere in the combine path.
template <typename T>
struct ScalingParamsT {
    ScaleVariant variant = ScaleVariant::NonUniformPerLayer;
    size_t d = 0;
    size_t n_layers = 0;
    std::vector<std::string> source_order;

    // omega[l][s]; shared variants store a single row at l = 0.
    std::vector<std::vector<Tensor<T>>> omega;

    size_t n_sources() const { return source_order.size(); }

    const Tensor<T>& omega_for(size_t layer, size_t s) const {
        const size_t row = variant_is_shared(variant) ? 0 : layer;
        return omega.at(row).at(s);
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (size_t l = 0; l < omega.size(); ++l)
            for (size_t s = 0; s < omega[l].size(); ++s) {
                const std::string layer_tag =
                    variant_is_shared(variant) ? "shared" : "l" + std::to_string(l);
                out.emplace_back("omega/" + layer_tag + "/s" + std::to_string(s) + "_" +
                                     source_order[s],
                                 omega[l][s]);
            }
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, p] : named_params()) p.set_requires_grad(trainable);
    }

    size_t weight_count() const {
        size_t n = 0;
        for (const auto& row : omega)
            for (const auto& t : row) n += t.numel();
        return n;
    }

    template <typename U>
    ScalingParamsT<U> cast() const {
        ScalingParamsT<U> out;
        out.variant = variant;
        out.d = d;
        out.n_layers = n_layers;
        out.source_order = source_order;
        out.omega.resize(omega.size());
        for (size_t l = 0; l < omega.size(); ++l)
            for (const auto& t : omega[l]) out.omega[l].push_back(t.template cast<U>());
        return out;
    }
};

using ScalingParams = ScalingParamsT<float>;

// Gaussian initialization around `mean` (2/|S| by default in training).
template <typename T>
ScalingParamsT<T> scaling_init(ScaleVariant variant, size_t d, size_t n_layers,
                               std::vector<std::string> source_order, double mean, double stddev,
                               uint64_t seed) {
    if (source_order.empty()) throw ContractError("scaling_init: no source tasks");
    ScalingParamsT<T> sp;
    sp.variant = variant;
    sp.d = d;
    sp.n_layers = n_layers;
    sp.source_order = std::move(source_order);
    Rng rng(splitmix64(seed ^ 0x5ca1eaceULL));
    const size_t rows = variant_is_shared(variant) ? 1 : n_layers;
    const Shape slot_shape = variant_is_uniform(variant) ? Shape{1} : Shape{d};
    sp.omega.resize(rows);
    for (size_t l = 0; l < rows; ++l)
        for (size_t s = 0; s < sp.source_order.size(); ++s) {
            Tensor<T> t = Tensor<T>::zeros(slot_shape);
            for (size_t i = 0; i < t.numel(); ++i) t.at(i) = T(rng.normal(mean, stddev));
            sp.omega[l].push_back(t);
        }
    return sp;
}

// Constant-valued scaling parameters (probes and frozen single-source runs).
template <typename T>
ScalingParamsT<T> scaling_const(ScaleVariant variant, size_t d, size_t n_layers,
                                std::vector<std::string> source_order, double value) {
    ScalingParamsT<T> sp = scaling_init<T>(variant, d, n_layers, std::move(source_order),
                                           value, 0.0, 0);
    for (auto& row : sp.omega)
        for (auto& t : row)
            for (size_t i = 0; i < t.numel(); ++i) t.at(i) = T(value);
    return sp;
}

namespace detail {

template <typename T>
void check_combine_inputs(const std::vector<Tensor<T>>& outputs, size_t n_sources, size_t d,
                          size_t layer, size_t n_layers, bool per_layer) {
    if (outputs.size() != n_sources)
        throw ContractError("combine: got " + std::to_string(outputs.size()) +
                            " source outputs for " + std::to_string(n_sources) +
                            " registered sources");
    for (const auto& o : outputs)
        if (o.dim() != 2 || o.cols() != d)
            throw ShapeError("combine: source output " + shape_str(o.shape()) +
                             " does not end in d=" + std::to_string(d));
    if (per_layer && layer >= n_layers)
        throw ContractError("combine: layer " + std::to_string(layer) +
                            " out of range for per-layer parameters with " +
                            std::to_string(n_layers) + " layers");
}

}  // namespace detail

// o_t = sum_s omega[l][s] (.)  o_s — elementwise for the non-uniform
// variants, scalar for the uniform ones; shared variants reuse the same
// parameters at every layer. Differentiable in both omega and the outputs.
template <typename T>
Tensor<T> combine_scalearn(const std::vector<Tensor<T>>& outputs,
                           const ScalingParamsT<T>& params, size_t layer) {
    detail::check_combine_inputs(outputs, params.n_sources(), params.d, layer, params.n_layers,
                                 !variant_is_shared(params.variant));
    Tensor<T> acc = mul(outputs[0], params.omega_for(layer, 0));
    for (size_t s = 1; s < outputs.size(); ++s)
        acc = add(acc, mul(outputs[s], params.omega_for(layer, s)));
    return acc;
}

// ---------------------------------------------------------------------------
// Constrained ablations on the per-layer non-uniform variant: force the
// stacked coefficients to sum to 1 across sources, per coordinate.
// ---------------------------------------------------------------------------
enum class ConstraintMode { Mean, Softmax };

// Stacked effective weights [S x d] after the constraint.
template <typename T>
Tensor<T> constrained_effective_weights(const ScalingParamsT<T>& params, ConstraintMode mode,
                                        size_t layer) {
    if (params.variant != ScaleVariant::NonUniformPerLayer)
        throw ContractError("constrained combine supports only the per-layer non-uniform variant");
    if (layer >= params.n_layers)
        throw ContractError("constrained combine: layer out of range");
    std::vector<Tensor<T>> rows;
    for (size_t s = 0; s < params.n_sources(); ++s)
        rows.push_back(reshape(params.omega_for(layer, s), {1, params.d}));
    Tensor<T> stacked = concat(rows, 0);  // [S x d]
    if (mode == ConstraintMode::Softmax) return softmax(stacked, 0);

    Tensor<T> denom = sum_axis(stacked, 0);  // [d]
    for (size_t j = 0; j < denom.numel(); ++j)
        if (std::abs(double(denom.at(j))) < 1e-12)
            throw NumericError("mean constraint: zero coefficient sum in coordinate " +
                               std::to_string(j));
    Tensor<T> recip = div(Tensor<T>::full({params.d}, T(1)), denom);
    return mul(stacked, recip);  // row-broadcast of 1/denom
}

template <typename T>
Tensor<T> combine_constrained(const std::vector<Tensor<T>>& outputs,
                              const ScalingParamsT<T>& params, ConstraintMode mode,
                              size_t layer) {
    detail::check_combine_inputs(outputs, params.n_sources(), params.d, layer, params.n_layers,
                                 true);
    Tensor<T> eff = constrained_effective_weights(params, mode, layer);
    Tensor<T> acc;
    for (size_t s = 0; s < outputs.size(); ++s) {
        Tensor<T> w = reshape(slice_rows(eff, s, s + 1), {params.d});
        Tensor<T> term = mul(outputs[s], w);
        acc = s == 0 ? term : add(acc, term);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Attention-based fusion transfer layer: the target representation queries
// the source outputs, and the softmax weights form a categorical
// distribution over sources at every position.
// ---------------------------------------------------------------------------
template <typename T>
struct FusionParamsT {
    size_t d = 0;
    struct Layer {
        Tensor<T> wq, bq, wk, bk, wv, bv;  // each W is [d x d]
    };
    std::vector<Layer> layers;

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "fusion/l" + std::to_string(l) + "/";
            out.emplace_back(p + "Q", layers[l].wq);
            out.emplace_back(p + "bQ", layers[l].bq);
            out.emplace_back(p + "K", layers[l].wk);
            out.emplace_back(p + "bK", layers[l].bk);
            out.emplace_back(p + "V", layers[l].wv);
            out.emplace_back(p + "bV", layers[l].bv);
        }
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, p] : named_params()) p.set_requires_grad(trainable);
    }

    // Q/K/V weight scalars only; biases are counted separately.
    size_t weight_count() const {
        size_t n = 0;
        for (const auto& ly : layers)
            n += ly.wq.numel() + ly.wk.numel() + ly.wv.numel();
        return n;
    }

    size_t bias_count() const {
        size_t n = 0;
        for (const auto& ly : layers)
            n += ly.bq.numel() + ly.bk.numel() + ly.bv.numel();
        return n;
    }

    template <typename U>
    FusionParamsT<U> cast() const {
        FusionParamsT<U> out;
        out.d = d;
        out.layers.resize(layers.size());
        for (size_t l = 0; l < layers.size(); ++l) {
            out.layers[l].wq = layers[l].wq.template cast<U>();
            out.layers[l].bq = layers[l].bq.template cast<U>();
            out.layers[l].wk = layers[l].wk.template cast<U>();
            out.layers[l].bk = layers[l].bk.template cast<U>();
            out.layers[l].wv = layers[l].wv.template cast<U>();
            out.layers[l].bv = layers[l].bv.template cast<U>();
        }
        return out;
    }
};

using FusionParams = FusionParamsT<float>;

// Near-identity value projection stabilizes early fusion training; query
// and key start small so initial attention is close to uniform.
template <typename T>
FusionParamsT<T> fusion_init(size_t d, size_t n_layers, uint64_t seed) {
    FusionParamsT<T> fp;
    fp.d = d;
    Rng rng(splitmix64(seed ^ 0xf051a7ULL));
    fp.layers.resize(n_layers);
    for (auto& ly : fp.layers) {
        ly.wq = detail::randn_tensor<T>({d, d}, rng, 0.02);
        ly.bq = Tensor<T>::zeros({d});
        ly.wk = detail::randn_tensor<T>({d, d}, rng, 0.02);
        ly.bk = Tensor<T>::zeros({d});
        ly.wv = detail::randn_tensor<T>({d, d}, rng, 1e-4);
        for (size_t i = 0; i < d; ++i) ly.wv.at(i, i) += T(1);
        ly.bv = Tensor<T>::zeros({d});
    }
    return fp;
}

// Per position: q = Q x, k_s = K o_s, v_s = V o_s, weights = softmax over
// sources of <q, k_s>/sqrt(d), output = sum_s w_s v_s. Optionally exposes
// the [N x S] attention weights.
template <typename T>
Tensor<T> combine_fusion(const Tensor<T>& x, const std::vector<Tensor<T>>& outputs,
                         const FusionParamsT<T>& params, size_t layer,
                         Tensor<T>* capture_weights = nullptr) {
    if (layer >= params.layers.size())
        throw ContractError("combine_fusion: layer out of range");
    if (outputs.empty()) throw ContractError("combine_fusion: no source outputs");
    const size_t d = params.d;
    if (x.dim() != 2 || x.cols() != d)
        throw ShapeError("combine_fusion: query input " + shape_str(x.shape()) +
                         " does not end in d=" + std::to_string(d));
    for (const auto& o : outputs)
        if (o.shape() != x.shape())
            throw ShapeError("combine_fusion: source output shape " + shape_str(o.shape()) +
                             " does not match " + shape_str(x.shape()));

    const auto& ly = params.layers[layer];
    Tensor<T> q = affine(x, ly.wq, ly.bq);
    std::vector<Tensor<T>> values;
    std::vector<Tensor<T>> score_cols;
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
    for (const auto& o : outputs) {
        Tensor<T> k = affine(o, ly.wk, ly.bk);
        values.push_back(affine(o, ly.wv, ly.bv));
        Tensor<T> s = scale(sum_axis(mul(q, k), 1), inv_sqrt_d);  // [N]
        score_cols.push_back(reshape(s, {x.rows(), 1}));
    }
    Tensor<T> weights = softmax(concat(score_cols, 1), 1);  // [N x S]
    if (capture_weights) *capture_weights = weights;

    Tensor<T> acc;
    for (size_t s = 0; s < outputs.size(); ++s) {
        Tensor<T> term = mul(values[s], slice_cols(weights, s, s + 1));
        acc = s == 0 ? term : add(acc, term);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Algebraic restriction checks: constant vectors reduce the non-uniform
// variant to the uniform one, and layer-identical vectors reduce the
// per-layer variant to the shared one.
// ---------------------------------------------------------------------------
struct RestrictionCheck {
    double max_diff_uniform = 0.0;
    double max_diff_shared = 0.0;
};

template <typename T>
RestrictionCheck restrict_equivalence(
    const ScalingParamsT<T>& full,
    const std::vector<std::vector<Tensor<T>>>& outputs_per_layer) {
    if (full.variant != ScaleVariant::NonUniformPerLayer)
        throw ContractError("restrict_equivalence: expects the per-layer non-uniform variant");

    // Uniform restriction: replace each vector with its first entry.
    ScalingParamsT<T> uni;
    uni.variant = ScaleVariant::UniformPerLayer;
    uni.d = full.d;
    uni.n_layers = full.n_layers;
    uni.source_order = full.source_order;
    uni.omega.resize(full.n_layers);
    for (size_t l = 0; l < full.n_layers; ++l)
        for (size_t s = 0; s < full.n_sources(); ++s)
            uni.omega[l].push_back(Tensor<T>::scalar(full.omega_for(l, s).at(0)));

    // Shared restriction: take layer 0's vectors for every layer.
    ScalingParamsT<T> shared;
    shared.variant = ScaleVariant::NonUniformShared;
    shared.d = full.d;
    shared.n_layers = full.n_layers;
    shared.source_order = full.source_order;
    shared.omega.resize(1);
    for (size_t s = 0; s < full.n_sources(); ++s)
        shared.omega[0].push_back(full.omega_for(0, s).clone());

    RestrictionCheck check;
    for (size_t l = 0; l < outputs_per_layer.size(); ++l) {
        Tensor<T> a = combine_scalearn(outputs_per_layer[l], full, l);
        Tensor<T> b = combine_scalearn(outputs_per_layer[l], uni, l);
        Tensor<T> c = combine_scalearn(outputs_per_layer[l], shared, l);
        for (size_t i = 0; i < a.numel(); ++i) {
            check.max_diff_uniform =
                std::max(check.max_diff_uniform, std::abs(double(a.at(i)) - double(b.at(i))));
            check.max_diff_shared =
                std::max(check.max_diff_shared, std::abs(double(a.at(i)) - double(c.at(i))));
        }
    }
    return check;
}

}  // namespace scalearn
