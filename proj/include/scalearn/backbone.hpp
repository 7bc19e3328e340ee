#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scalearn/ops.hpp"
#include "scalearn/optimizer.hpp"

namespace scalearn {

// Reserved token ids used across the artifact: every sequence starts with
// CLS_TOKEN, and masked-token warmup substitutes MASK_TOKEN.
inline constexpr int CLS_TOKEN = 0;
inline constexpr int MASK_TOKEN = 1;

struct BackboneConfig {
    size_t vocab_size = 64;
    size_t d_model = 64;
    size_t n_layers = 4;
    size_t n_heads = 2;
    size_t ffn_dim = 128;
    size_t max_seq_len = 32;
    double dropout_p = 0.1;

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || ffn_dim < 1 ||
            max_seq_len < 1)
            throw ContractError("backbone config: all dimensions must be >= 1");
        if (d_model % n_heads != 0)
            throw ContractError("backbone config: d_model must be divisible by n_heads");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw ContractError("backbone config: dropout_p must be in [0, 1)");
    }
};

// Pre-norm transformer encoder parameters. Once frozen, no parameter takes
// part in gradient updates and the serialized bytes stay byte-identical
// through any adapter or transfer training run.
template <typename T>
struct BackboneParamsT {
    BackboneConfig config;
    bool frozen = false;

    Tensor<T> tok_emb;  // [vocab x d]
    Tensor<T> pos_emb;  // [max_seq_len x d]
    struct Layer {
        Tensor<T> ln1_g, ln1_b;
        Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<T> ln2_g, ln2_b;
        Tensor<T> w1, b1, w2, b2;
    };
    std::vector<Layer> layers;
    Tensor<T> lnf_g, lnf_b;

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("backbone/tok_emb", tok_emb);
        out.emplace_back("backbone/pos_emb", pos_emb);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "backbone/layer" + std::to_string(l) + "/";
            const Layer& ly = layers[l];
            out.emplace_back(p + "ln1_g", ly.ln1_g);
            out.emplace_back(p + "ln1_b", ly.ln1_b);
            out.emplace_back(p + "wq", ly.wq);
            out.emplace_back(p + "bq", ly.bq);
            out.emplace_back(p + "wk", ly.wk);
            out.emplace_back(p + "bk", ly.bk);
            out.emplace_back(p + "wv", ly.wv);
            out.emplace_back(p + "bv", ly.bv);
            out.emplace_back(p + "wo", ly.wo);
            out.emplace_back(p + "bo", ly.bo);
            out.emplace_back(p + "ln2_g", ly.ln2_g);
            out.emplace_back(p + "ln2_b", ly.ln2_b);
            out.emplace_back(p + "w1", ly.w1);
            out.emplace_back(p + "b1", ly.b1);
            out.emplace_back(p + "w2", ly.w2);
            out.emplace_back(p + "b2", ly.b2);
        }
        out.emplace_back("backbone/lnf_g", lnf_g);
        out.emplace_back("backbone/lnf_b", lnf_b);
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, p] : named_params()) p.set_requires_grad(trainable);
        frozen = !trainable;
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [name, p] : named_params()) n += p.numel();
        return n;
    }

    template <typename U>
    BackboneParamsT<U> cast() const {
        BackboneParamsT<U> out;
        out.config = config;
        out.frozen = frozen;
        out.tok_emb = tok_emb.template cast<U>();
        out.pos_emb = pos_emb.template cast<U>();
        out.layers.resize(layers.size());
        for (size_t l = 0; l < layers.size(); ++l) {
            const Layer& a = layers[l];
            auto& b = out.layers[l];
            b.ln1_g = a.ln1_g.template cast<U>();
            b.ln1_b = a.ln1_b.template cast<U>();
            b.wq = a.wq.template cast<U>();
            b.bq = a.bq.template cast<U>();
            b.wk = a.wk.template cast<U>();
            b.bk = a.bk.template cast<U>();
            b.wv = a.wv.template cast<U>();
            b.bv = a.bv.template cast<U>();
            b.wo = a.wo.template cast<U>();
            b.bo = a.bo.template cast<U>();
            b.ln2_g = a.ln2_g.template cast<U>();
            b.ln2_b = a.ln2_b.template cast<U>();
            b.w1 = a.w1.template cast<U>();
            b.b1 = a.b1.template cast<U>();
            b.w2 = a.w2.template cast<U>();
            b.b2 = a.b2.template cast<U>();
        }
        out.lnf_g = lnf_g.template cast<U>();
        out.lnf_b = lnf_b.template cast<U>();
        return out;
    }
};

using BackboneParams = BackboneParamsT<float>;

// Per-forward state: dropout is active only when training, and draws from
// the run's RNG stream.
struct ForwardCtx {
    bool training = false;
    Rng* rng = nullptr;
};

// Maps the post-FFN representation of layer l to its replacement. The
// identity plugin must leave the forward bit-identical to no plugin at all.
template <typename T>
using LayerPlugin = std::function<Tensor<T>(const Tensor<T>& x, size_t layer, ForwardCtx& ctx)>;

template <typename T>
BackboneParamsT<T> backbone_raw_init(const BackboneConfig& config, uint64_t seed) {
    config.validate();
    BackboneParamsT<T> bb;
    bb.config = config;
    Rng rng(seed);
    const size_t d = config.d_model;
    bb.tok_emb = detail::randn_tensor<T>({config.vocab_size, d}, rng, 0.02);
    bb.pos_emb = detail::randn_tensor<T>({config.max_seq_len, d}, rng, 0.02);
    bb.layers.resize(config.n_layers);
    for (auto& ly : bb.layers) {
        ly.ln1_g = Tensor<T>::full({d}, T(1));
        ly.ln1_b = Tensor<T>::zeros({d});
        ly.wq = detail::randn_tensor<T>({d, d}, rng, 0.02);
        ly.bq = Tensor<T>::zeros({d});
        ly.wk = detail::randn_tensor<T>({d, d}, rng, 0.02);
        ly.bk = Tensor<T>::zeros({d});
        ly.wv = detail::randn_tensor<T>({d, d}, rng, 0.02);
        ly.bv = Tensor<T>::zeros({d});
        ly.wo = detail::randn_tensor<T>({d, d}, rng, 0.02);
        ly.bo = Tensor<T>::zeros({d});
        ly.ln2_g = Tensor<T>::full({d}, T(1));
        ly.ln2_b = Tensor<T>::zeros({d});
        ly.w1 = detail::randn_tensor<T>({d, config.ffn_dim}, rng, 0.02);
        ly.b1 = Tensor<T>::zeros({config.ffn_dim});
        ly.w2 = detail::randn_tensor<T>({config.ffn_dim, d}, rng, 0.02);
        ly.b2 = Tensor<T>::zeros({d});
    }
    bb.lnf_g = Tensor<T>::full({d}, T(1));
    bb.lnf_b = Tensor<T>::zeros({d});
    return bb;
}

// Packed forward over a batch of equal-length sequences; returns hidden
// states as [B*T x d]. Single-sequence encoder_forward wraps this.
template <typename T>
Tensor<T> encoder_forward_packed(const std::vector<std::vector<int>>& seqs,
                                 const BackboneParamsT<T>& bb, const LayerPlugin<T>& plugin,
                                 ForwardCtx& ctx) {
    if (seqs.empty()) throw ContractError("encoder forward: empty batch");
    const size_t seq_len = seqs[0].size();
    if (seq_len == 0) throw ContractError("encoder forward: empty sequence");
    const BackboneConfig& cfg = bb.config;
    if (seq_len > cfg.max_seq_len)
        throw DataError("sequence length " + std::to_string(seq_len) +
                        " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));

    std::vector<int> flat;
    std::vector<int> pos_ids;
    flat.reserve(seqs.size() * seq_len);
    pos_ids.reserve(seqs.size() * seq_len);
    for (const auto& s : seqs) {
        if (s.size() != seq_len)
            throw ContractError("encoder forward: batch sequences must share one length");
        for (size_t t = 0; t < seq_len; ++t) {
            flat.push_back(s[t]);
            pos_ids.push_back(int(t));
        }
    }

    const bool train = ctx.training;
    const double p = cfg.dropout_p;
    auto drop = [&](const Tensor<T>& t) {
        return train && ctx.rng ? dropout(t, p, true, *ctx.rng) : t;
    };

    Tensor<T> x = add(embedding(flat, bb.tok_emb), embedding(pos_ids, bb.pos_emb));
    x = drop(x);
    const size_t batch = seqs.size();
    for (size_t l = 0; l < bb.layers.size(); ++l) {
        const auto& ly = bb.layers[l];
        Tensor<T> a = layer_norm(x, ly.ln1_g, ly.ln1_b);
        Tensor<T> q = affine(a, ly.wq, ly.bq);
        Tensor<T> k = affine(a, ly.wk, ly.bk);
        Tensor<T> v = affine(a, ly.wv, ly.bv);
        Tensor<T> att = multihead_attention(q, k, v, batch, seq_len, cfg.n_heads);
        att = drop(affine(att, ly.wo, ly.bo));
        x = add(x, att);

        Tensor<T> f = layer_norm(x, ly.ln2_g, ly.ln2_b);
        f = affine(relu(affine(f, ly.w1, ly.b1)), ly.w2, ly.b2);
        f = drop(f);
        x = add(x, f);

        if (plugin) x = plugin(x, l, ctx);
    }
    return layer_norm(x, bb.lnf_g, bb.lnf_b);
}

template <typename T>
Tensor<T> pool_first(const Tensor<T>& hidden) {
    if (hidden.dim() != 2 || hidden.rows() == 0)
        throw ContractError("pool_first: empty sequence");
    return reshape(slice_rows(hidden, 0, 1), {hidden.cols()});
}

// CLS positions of a packed [B*T x d] hidden tensor -> [B x d].
template <typename T>
Tensor<T> pool_first_packed(const Tensor<T>& hidden, size_t batch, size_t seq_len) {
    std::vector<size_t> rows(batch);
    for (size_t b = 0; b < batch; ++b) rows[b] = b * seq_len;
    return take_rows(hidden, rows);
}

template <typename T>
struct EncoderOutput {
    Tensor<T> hidden;  // [T x d]
    Tensor<T> pooled;  // [d]
};

template <typename T>
EncoderOutput<T> encoder_forward(const std::vector<int>& tokens, const BackboneParamsT<T>& bb,
                                 const LayerPlugin<T>& plugin = nullptr,
                                 ForwardCtx ctx = ForwardCtx{}) {
    Tensor<T> hidden = encoder_forward_packed<T>({tokens}, bb, plugin, ctx);
    return {hidden, pool_first(hidden)};
}

// ---------------------------------------------------------------------------
// Warmup: masked-token prediction over a corpus, standing in for
// pre-training. The prediction head is the tied (transposed) token embedding.
// ---------------------------------------------------------------------------
struct WarmupSpec {
    std::vector<std::vector<int>> corpus;
    size_t steps = 500;
    size_t batch_size = 32;
    double learning_rate = 3e-4;
    double mask_prob = 0.15;
    uint64_t seed = 0;
};

namespace detail {

struct MaskedBatch {
    std::vector<std::vector<int>> seqs;
    std::vector<size_t> masked_rows;  // flattened row indices
    std::vector<int> targets;
};

inline MaskedBatch make_masked_batch(const std::vector<std::vector<int>>& corpus,
                                     const std::vector<size_t>& indices, double mask_prob,
                                     Rng& rng) {
    MaskedBatch mb;
    const size_t seq_len = corpus[indices[0]].size();
    for (size_t bi = 0; bi < indices.size(); ++bi) {
        std::vector<int> s = corpus[indices[bi]];
        for (size_t t = 1; t < s.size(); ++t) {  // keep the CLS slot intact
            if (rng.bernoulli(mask_prob)) {
                mb.masked_rows.push_back(bi * seq_len + t);
                mb.targets.push_back(s[t]);
                s[t] = MASK_TOKEN;
            }
        }
        mb.seqs.push_back(std::move(s));
    }
    return mb;
}

}  // namespace detail

template <typename T>
void backbone_warmup(BackboneParamsT<T>& bb, const WarmupSpec& spec) {
    if (spec.corpus.empty()) throw DataError("warmup: empty corpus");
    size_t seq_len = spec.corpus[0].size();
    for (const auto& s : spec.corpus) {
        if (s.size() != seq_len)
            throw DataError("warmup: corpus sequences must share one length");
        for (int tok : s)
            if (tok < 0 || size_t(tok) >= bb.config.vocab_size)
                throw DataError("warmup: corpus token " + std::to_string(tok) +
                                " outside vocabulary of size " +
                                std::to_string(bb.config.vocab_size));
    }

    bb.set_trainable(true);
    AdamW<T> opt(bb.named_params(), typename AdamW<T>::Options{});
    Rng rng(splitmix64(spec.seed ^ 0x5ca1ab1eULL));
    ForwardCtx ctx{true, &rng};

    for (size_t step = 0; step < spec.steps; ++step) {
        std::vector<size_t> indices(spec.batch_size);
        for (auto& i : indices) i = rng.uniform_int(spec.corpus.size());
        auto mb = detail::make_masked_batch(spec.corpus, indices, spec.mask_prob, rng);
        if (mb.masked_rows.empty()) continue;

        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        Tensor<T> hidden = encoder_forward_packed<T>(mb.seqs, bb, nullptr, ctx);
        Tensor<T> picked = take_rows(hidden, mb.masked_rows);
        Tensor<T> logits = matmul(picked, transpose_op(bb.tok_emb));
        Tensor<T> loss = cross_entropy_loss(logits, mb.targets);
        tape.backward(loss);
        opt.step(linear_decay_lr(spec.learning_rate, step, int64_t(spec.steps)));
        opt.zero_grad();
    }
}

// Accuracy of the tied-embedding masked-token head over a deterministic
// sample of the corpus; the warmup quality oracle.
template <typename T>
double masked_token_accuracy(const BackboneParamsT<T>& bb,
                             const std::vector<std::vector<int>>& corpus, double mask_prob,
                             uint64_t seed, size_t max_sequences = 128) {
    Rng rng(splitmix64(seed ^ 0xacc0ffeeULL));
    size_t n = std::min(max_sequences, corpus.size());
    std::vector<size_t> indices(n);
    for (size_t i = 0; i < n; ++i) indices[i] = i;
    auto mb = detail::make_masked_batch(corpus, indices, mask_prob, rng);
    if (mb.masked_rows.empty()) return 0.0;
    ForwardCtx ctx{false, nullptr};
    Tensor<T> hidden = encoder_forward_packed<T>(mb.seqs, bb, nullptr, ctx);
    Tensor<T> logits = matmul(take_rows(hidden, mb.masked_rows), transpose_op(bb.tok_emb));
    size_t correct = 0;
    for (size_t i = 0; i < mb.targets.size(); ++i) {
        size_t argmax = 0;
        for (size_t j = 1; j < logits.cols(); ++j)
            if (logits.at(i, j) > logits.at(i, argmax)) argmax = j;
        if (int(argmax) == mb.targets[i]) ++correct;
    }
    return double(correct) / double(mb.targets.size());
}

// Deterministic seeded initialization; optional warmup runs masked-token
// prediction before freezing. Without warmup the backbone freezes directly.
template <typename T>
BackboneParamsT<T> init_backbone(const BackboneConfig& config, uint64_t seed,
                                 const std::optional<WarmupSpec>& warmup = std::nullopt) {
    BackboneParamsT<T> bb = backbone_raw_init<T>(config, seed);
    if (warmup) backbone_warmup(bb, *warmup);
    bb.set_trainable(false);
    return bb;
}

}  // namespace scalearn
