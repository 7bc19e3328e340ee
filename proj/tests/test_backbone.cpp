#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "scalearn/backbone.hpp"

using namespace scalearn;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_dim = 16;
    cfg.max_seq_len = 8;
    cfg.dropout_p = 0.1;
    return cfg;
}

std::vector<std::vector<int>> toy_corpus(const BackboneConfig& cfg, size_t n, size_t len,
                                         uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<int>> corpus(n);
    for (auto& s : corpus) {
        s.push_back(CLS_TOKEN);
        for (size_t t = 1; t < len; ++t)
            s.push_back(2 + int(rng.uniform_int(cfg.vocab_size - 2)));
    }
    return corpus;
}

bool params_equal(const BackboneParams& a, const BackboneParams& b) {
    auto pa = a.named_params(), pb = b.named_params();
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].second.numel() != pb[i].second.numel()) return false;
        for (size_t j = 0; j < pa[i].second.numel(); ++j)
            if (pa[i].second.at(j) != pb[i].second.at(j)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("config validation") {
    BackboneConfig cfg = tiny_config();
    cfg.n_heads = 3;  // does not divide d_model=8
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = tiny_config();
    cfg.n_layers = 0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("same config and seed give bit-identical parameters") {
    auto a = init_backbone<float>(tiny_config(), 99);
    auto b = init_backbone<float>(tiny_config(), 99);
    CHECK(params_equal(a, b));
    CHECK(a.frozen);
    for (auto& [name, p] : a.named_params()) CHECK(!p.requires_grad());
}

TEST_CASE("different seeds give different pooled outputs") {
    auto a = init_backbone<float>(tiny_config(), 1);
    auto b = init_backbone<float>(tiny_config(), 2);
    std::vector<int> tokens{0, 3, 5, 7};
    auto oa = encoder_forward(tokens, a);
    auto ob = encoder_forward(tokens, b);
    bool any_diff = false;
    for (size_t i = 0; i < oa.pooled.numel(); ++i)
        if (oa.pooled.at(i) != ob.pooled.at(i)) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("identity plugin is bit-transparent") {
    auto bb = init_backbone<float>(tiny_config(), 5);
    std::vector<int> tokens{0, 2, 9, 4, 11};
    auto plain = encoder_forward<float>(tokens, bb);
    LayerPlugin<float> identity = [](const Tensor<float>& x, size_t, ForwardCtx&) { return x; };
    auto plugged = encoder_forward<float>(tokens, bb, identity);
    for (size_t i = 0; i < plain.hidden.numel(); ++i)
        CHECK(plain.hidden.at(i) == plugged.hidden.at(i));
}

TEST_CASE("zero plugin matches manual layer-by-layer composition") {
    // Oracle: re-run the encoder manually, zeroing each post-FFN state, and
    // compare against the plugin path.
    auto bb = init_backbone<float>(tiny_config(), 8);
    std::vector<int> tokens{0, 2, 3};
    LayerPlugin<float> zero_map = [](const Tensor<float>& x, size_t, ForwardCtx&) {
        return scale(x, 0.0);
    };
    auto got = encoder_forward<float>(tokens, bb, zero_map);

    // Manual composition: after every layer the state is zero, so the final
    // hidden equals layer_norm of a zero tensor, driven through the same ops.
    ForwardCtx ctx;
    Tensor<float> x = Tensor<float>::zeros({tokens.size(), bb.config.d_model});
    // Reproduce the last layer norm only; every layer output was replaced by
    // zeros, and the final layer norm of zeros is just the bias term.
    auto want = layer_norm(x, bb.lnf_g, bb.lnf_b);
    for (size_t i = 0; i < want.numel(); ++i)
        CHECK(got.hidden.at(i) == doctest::Approx(want.at(i)).epsilon(1e-6));
}

TEST_CASE("over-length and out-of-vocab sequences are hard errors") {
    auto bb = init_backbone<float>(tiny_config(), 3);
    std::vector<int> too_long(bb.config.max_seq_len + 1, 2);
    CHECK_THROWS_AS(encoder_forward(too_long, bb), DataError);
    std::vector<int> bad_token{0, int(bb.config.vocab_size)};
    CHECK_THROWS_AS(encoder_forward(bad_token, bb), DataError);
}

TEST_CASE("pool_first returns row zero") {
    auto hidden = Tensor<float>::from({3, 4}, {1, 0, 0, 0, 9, 9, 9, 9, 5, 5, 5, 5});
    auto pooled = pool_first(hidden);
    CHECK(pooled.shape() == Shape{4});
    CHECK(pooled.at(0) == 1.0f);
    CHECK(pooled.at(1) == 0.0f);

    auto single = pool_first(Tensor<float>::from({1, 2}, {7, 8}));
    CHECK(single.at(1) == 8.0f);

    Rng rng(31);
    auto rnd = Tensor<float>::zeros({3, 4});
    for (size_t i = 0; i < rnd.numel(); ++i) rnd.at(i) = float(rng.uniform(-1, 1));
    auto p = pool_first(rnd);
    for (size_t c = 0; c < 4; ++c) CHECK(p.at(c) == rnd.at(0, c));
}

TEST_CASE("eval-mode forward is deterministic") {
    auto bb = init_backbone<float>(tiny_config(), 12);
    std::vector<int> tokens{0, 4, 6, 2};
    auto a = encoder_forward(tokens, bb);
    auto b = encoder_forward(tokens, bb);
    for (size_t i = 0; i < a.hidden.numel(); ++i) CHECK(a.hidden.at(i) == b.hidden.at(i));
}

TEST_CASE("warmup with zero learning rate leaves parameters at initialization") {
    auto cfg = tiny_config();
    WarmupSpec warmup;
    warmup.corpus = toy_corpus(cfg, 16, 6, 77);
    warmup.steps = 1;
    warmup.learning_rate = 0.0;
    auto warmed = init_backbone<float>(cfg, 42, warmup);
    auto plain = init_backbone<float>(cfg, 42);
    CHECK(params_equal(warmed, plain));
}

TEST_CASE("warmup rejects out-of-vocab corpus tokens") {
    auto cfg = tiny_config();
    WarmupSpec warmup;
    warmup.corpus = {{0, 2, int(cfg.vocab_size)}};
    warmup.steps = 1;
    CHECK_THROWS_AS(init_backbone<float>(cfg, 1, warmup), DataError);
}

TEST_CASE("warmup beats the uniform-guessing baseline") {
    // The corpus has strong bigram structure: token pairs always appear
    // together, so a warmed model must beat uniform guessing by a margin.
    auto cfg = tiny_config();
    Rng rng(5);
    std::vector<std::vector<int>> corpus;
    for (int i = 0; i < 64; ++i) {
        std::vector<int> s{CLS_TOKEN};
        int base = 2 + int(rng.uniform_int((cfg.vocab_size - 2) / 2)) * 2;
        for (int t = 0; t < 5; ++t) s.push_back(base + (t % 2));
        corpus.push_back(s);
    }
    WarmupSpec warmup;
    warmup.corpus = corpus;
    warmup.steps = 200;
    warmup.seed = 3;
    auto bb = init_backbone<float>(cfg, 21, warmup);
    CHECK(bb.frozen);
    const double acc = masked_token_accuracy(bb, corpus, 0.15, 9);
    CHECK(acc > 1.0 / double(cfg.vocab_size));
}
