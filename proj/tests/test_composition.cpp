#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "scalearn/composition.hpp"
#include "scalearn/grad_check.hpp"

using namespace scalearn;

namespace {

Tensor<float> randf(Shape shape, Rng& rng) {
    Tensor<float> t = Tensor<float>::zeros(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t.at(i) = float(rng.uniform(-1.0, 1.0));
    return t;
}

ScalingParams make_scaling(ScaleVariant v, size_t d, size_t L,
                           std::vector<std::string> sources, double value) {
    return scaling_const<float>(v, d, L, std::move(sources), value);
}

}  // namespace

TEST_CASE("single source with all-ones vector is the identity") {
    auto sp = make_scaling(ScaleVariant::NonUniformPerLayer, 4, 2, {"a"}, 1.0);
    Rng rng(1);
    auto o = randf({3, 4}, rng);
    auto out = combine_scalearn<float>({o}, sp, 1);
    for (size_t i = 0; i < o.numel(); ++i) CHECK(out.at(i) == o.at(i));
}

TEST_CASE("all-zero coefficients give the zero tensor") {
    for (auto v : {ScaleVariant::NonUniformPerLayer, ScaleVariant::UniformPerLayer,
                   ScaleVariant::NonUniformShared, ScaleVariant::UniformShared}) {
        auto sp = make_scaling(v, 4, 2, {"a", "b"}, 0.0);
        Rng rng(2);
        auto out = combine_scalearn<float>({randf({2, 4}, rng), randf({2, 4}, rng)}, sp, 0);
        for (size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.0f);
    }
}

TEST_CASE("hand-evaluated non-uniform combine, d=2") {
    ScalingParams sp;
    sp.variant = ScaleVariant::NonUniformPerLayer;
    sp.d = 2;
    sp.n_layers = 1;
    sp.source_order = {"s1", "s2"};
    sp.omega = {{Tensor<float>::from({2}, {0.5f, 0.5f}), Tensor<float>::from({2}, {1.0f, 0.0f})}};
    auto o1 = Tensor<float>::from({1, 2}, {1, 2});
    auto o2 = Tensor<float>::from({1, 2}, {3, 4});
    auto out = combine_scalearn<float>({o1, o2}, sp, 0);
    CHECK(out.at(0, 0) == doctest::Approx(3.5));
    CHECK(out.at(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("combine errors: source count and layer range") {
    auto sp = make_scaling(ScaleVariant::UniformPerLayer, 4, 2, {"a", "b"}, 1.0);
    Rng rng(3);
    auto o = randf({2, 4}, rng);
    CHECK_THROWS_AS(combine_scalearn<float>({o}, sp, 0), ContractError);
    CHECK_THROWS_AS(combine_scalearn<float>({o, o}, sp, 2), ContractError);
    // Shared variants accept any layer index.
    auto shared = make_scaling(ScaleVariant::UniformShared, 4, 2, {"a", "b"}, 1.0);
    CHECK_NOTHROW(combine_scalearn<float>({o, o}, shared, 7));
}

TEST_CASE("combine is linear in omega and in outputs") {
    Rng rng(5);
    const size_t d = 6, S = 3;
    std::vector<Tensor<float>> outs;
    for (size_t s = 0; s < S; ++s) outs.push_back(randf({4, d}, rng));

    auto sp1 = scaling_init<float>(ScaleVariant::NonUniformPerLayer, d, 2, {"a", "b", "c"},
                                   0.3, 0.2, 11);
    auto sp2 = scaling_init<float>(ScaleVariant::NonUniformPerLayer, d, 2, {"a", "b", "c"},
                                   -0.1, 0.4, 12);

    const double alpha = 0.7;
    auto scale_params = [&](const ScalingParams& sp, double a) {
        ScalingParams out = sp;
        out.omega.clear();
        out.omega.resize(sp.omega.size());
        for (size_t l = 0; l < sp.omega.size(); ++l)
            for (const auto& t : sp.omega[l]) {
                auto c = t.clone();
                for (size_t i = 0; i < c.numel(); ++i) c.at(i) = float(a * c.at(i));
                out.omega[l].push_back(c);
            }
        return out;
    };
    auto add_params = [&](const ScalingParams& x, const ScalingParams& y) {
        ScalingParams out = x;
        out.omega.clear();
        out.omega.resize(x.omega.size());
        for (size_t l = 0; l < x.omega.size(); ++l)
            for (size_t s = 0; s < x.omega[l].size(); ++s) {
                auto c = x.omega[l][s].clone();
                for (size_t i = 0; i < c.numel(); ++i) c.at(i) += y.omega[l][s].at(i);
                out.omega[l].push_back(c);
            }
        return out;
    };

    auto lhs1 = combine_scalearn<float>(outs, scale_params(sp1, alpha), 1);
    auto rhs1 = scale(combine_scalearn<float>(outs, sp1, 1), alpha);
    for (size_t i = 0; i < lhs1.numel(); ++i)
        CHECK(lhs1.at(i) == doctest::Approx(rhs1.at(i)).epsilon(1e-5));

    auto lhs2 = combine_scalearn<float>(outs, add_params(sp1, sp2), 1);
    auto rhs2 = add(combine_scalearn<float>(outs, sp1, 1), combine_scalearn<float>(outs, sp2, 1));
    for (size_t i = 0; i < lhs2.numel(); ++i)
        CHECK(lhs2.at(i) == doctest::Approx(rhs2.at(i)).epsilon(1e-5));

    // Additivity in one source output with the others held fixed.
    auto outs2 = outs;
    outs2[1] = randf({4, d}, rng);
    auto outs_sum = outs;
    outs_sum[1] = add(outs[1], outs2[1]);
    auto lhs3 = combine_scalearn<float>(outs_sum, sp1, 0);
    auto a3 = combine_scalearn<float>(outs, sp1, 0);
    // combine(outs with o1 + o1') == combine(outs) + omega_1 (.) o1'.
    auto delta = mul(outs2[1], sp1.omega_for(0, 1));
    for (size_t i = 0; i < lhs3.numel(); ++i)
        CHECK(lhs3.at(i) == doctest::Approx(a3.at(i) + delta.at(i)).epsilon(1e-4));
}

TEST_CASE("uniform-variant gradient has the inner-product closed form") {
    // dLoss/d omega_s = <o_s, dLoss/d o_t> summed over positions.
    Rng rng(7);
    const size_t d = 5, S = 2;
    std::vector<Tensor<float>> outs;
    for (size_t s = 0; s < S; ++s) outs.push_back(randf({3, d}, rng));
    auto sp = scaling_init<float>(ScaleVariant::UniformPerLayer, d, 1, {"a", "b"}, 0.9, 0.05, 3);
    sp.set_trainable(true);
    auto w = randf({3, d}, rng);  // loss = sum(w (.) o_t), so dLoss/do_t = w

    Tape<float> tape;
    {
        Tape<float>::Scope scope(tape);
        auto out = combine_scalearn<float>(outs, sp, 0);
        tape.backward(sum(mul(out, w)));
    }
    for (size_t s = 0; s < S; ++s) {
        double want = 0;
        for (size_t i = 0; i < w.numel(); ++i) want += double(outs[s].at(i)) * double(w.at(i));
        CHECK(double(sp.omega[0][s].grad()[0]) == doctest::Approx(want).epsilon(1e-5));
    }

    // And the same against finite differences in double precision.
    auto spd = sp.cast<double>();
    spd.set_trainable(true);
    std::vector<Tensor<double>> outsd;
    for (const auto& o : outs) outsd.push_back(o.cast<double>());
    auto wd = w.cast<double>();
    std::vector<std::pair<std::string, Tensor<double>>> params;
    for (auto& [name, p] : spd.named_params()) params.emplace_back(name, p);
    auto res = grad_check<double>(
        [&] { return sum(mul(combine_scalearn<double>(outsd, spd, 0), wd)); }, params, 1e-6);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("constant restriction equals the uniform variant exactly") {
    Rng rng(9);
    const size_t d = 8, L = 3, S = 2;
    ScalingParams full;
    full.variant = ScaleVariant::NonUniformPerLayer;
    full.d = d;
    full.n_layers = L;
    full.source_order = {"a", "b"};
    full.omega.resize(L);
    for (size_t l = 0; l < L; ++l)
        for (size_t s = 0; s < S; ++s)
            full.omega[l].push_back(
                Tensor<float>::full({d}, float(rng.uniform(-2.0, 2.0))));

    std::vector<std::vector<Tensor<float>>> outputs(L);
    for (size_t l = 0; l < L; ++l)
        for (size_t s = 0; s < S; ++s) outputs[l].push_back(randf({4, d}, rng));

    auto check = restrict_equivalence(full, outputs);
    CHECK(check.max_diff_uniform < 1e-6);

    // Layer-identical vectors reduce to the shared variant.
    ScalingParams tied = full;
    tied.omega.clear();
    tied.omega.resize(L);
    for (size_t l = 0; l < L; ++l)
        for (size_t s = 0; s < S; ++s) {
            Tensor<float> vsrc = randf({d}, rng);
            tied.omega[l].push_back(l == 0 ? vsrc : tied.omega[0][s]);
        }
    auto check2 = restrict_equivalence(tied, outputs);
    CHECK(check2.max_diff_shared < 1e-6);
}

TEST_CASE("constant vectors c=2 equal uniform scalars") {
    ScalingParams full;
    full.variant = ScaleVariant::NonUniformPerLayer;
    full.d = 4;
    full.n_layers = 1;
    full.source_order = {"a"};
    full.omega = {{Tensor<float>::full({4}, 2.0f)}};
    Rng rng(4);
    std::vector<std::vector<Tensor<float>>> outputs{{randf({2, 4}, rng)}};
    auto check = restrict_equivalence(full, outputs);
    CHECK(check.max_diff_uniform == 0.0);
}

TEST_CASE("fusion: identical sources get uniform weights") {
    const size_t d = 4, S = 3;
    auto fp = fusion_init<float>(d, 2, 5);
    Rng rng(6);
    auto x = randf({5, d}, rng);
    auto o = randf({5, d}, rng);
    std::vector<Tensor<float>> outs(S, o);
    Tensor<float> weights;
    auto out = combine_fusion<float>(x, outs, fp, 0, &weights);
    for (size_t r = 0; r < weights.rows(); ++r)
        for (size_t s = 0; s < S; ++s)
            CHECK(weights.at(r, s) == doctest::Approx(1.0 / double(S)).epsilon(1e-6));

    // Output equals V * o + bV for any single source.
    auto vo = add(matmul(o, fp.layers[0].wv), fp.layers[0].bv);
    for (size_t i = 0; i < out.numel(); ++i)
        CHECK(out.at(i) == doctest::Approx(vo.at(i)).epsilon(1e-5));
}

TEST_CASE("fusion: single source weight is exactly one") {
    const size_t d = 4;
    auto fp = fusion_init<float>(d, 1, 2);
    Rng rng(8);
    auto x = randf({3, d}, rng);
    auto o = randf({3, d}, rng);
    Tensor<float> weights;
    auto out = combine_fusion<float>(x, {o}, fp, 0, &weights);
    for (size_t r = 0; r < weights.rows(); ++r) CHECK(weights.at(r, 0) == 1.0f);
    auto vo = add(matmul(o, fp.layers[0].wv), fp.layers[0].bv);
    for (size_t i = 0; i < out.numel(); ++i)
        CHECK(out.at(i) == doctest::Approx(vo.at(i)).epsilon(1e-6));
}

TEST_CASE("fusion hand evaluation with identity projections, d=2") {
    FusionParams fp;
    fp.d = 2;
    fp.layers.resize(1);
    auto eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
    fp.layers[0].wq = eye.clone();
    fp.layers[0].wk = eye.clone();
    fp.layers[0].wv = eye.clone();
    fp.layers[0].bq = Tensor<float>::zeros({2});
    fp.layers[0].bk = Tensor<float>::zeros({2});
    fp.layers[0].bv = Tensor<float>::zeros({2});

    auto x = Tensor<float>::from({1, 2}, {1, 0});
    auto o1 = Tensor<float>::from({1, 2}, {1, 0});
    auto o2 = Tensor<float>::from({1, 2}, {0, 1});
    Tensor<float> weights;
    auto out = combine_fusion<float>(x, {o1, o2}, fp, 0, &weights);

    const double s1 = 1.0 / std::sqrt(2.0), s2 = 0.0;
    const double e1 = std::exp(s1), e2 = std::exp(s2);
    const double w1 = e1 / (e1 + e2), w2 = e2 / (e1 + e2);
    CHECK(weights.at(0, 0) == doctest::Approx(w1).epsilon(1e-5));
    CHECK(weights.at(0, 1) == doctest::Approx(w2).epsilon(1e-5));
    CHECK(w1 == doctest::Approx(0.6698).epsilon(1e-3));
    CHECK(out.at(0, 0) == doctest::Approx(w1).epsilon(1e-5));
    CHECK(out.at(0, 1) == doctest::Approx(w2).epsilon(1e-5));
}

TEST_CASE("fusion weights are a categorical distribution on random inputs") {
    const size_t d = 8, S = 4;
    auto fp = fusion_init<float>(d, 1, 9);
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        auto x = randf({4, d}, rng);
        std::vector<Tensor<float>> outs;
        for (size_t s = 0; s < S; ++s) outs.push_back(randf({4, d}, rng));
        Tensor<float> weights;
        combine_fusion<float>(x, outs, fp, 0, &weights);
        for (size_t r = 0; r < weights.rows(); ++r) {
            double total = 0;
            for (size_t s = 0; s < S; ++s) {
                CHECK(weights.at(r, s) >= 0.0f);
                total += weights.at(r, s);
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("constrained combine: softmax symmetry and mean arithmetic") {
    const size_t d = 4, S = 3;
    auto sp = make_scaling(ScaleVariant::NonUniformPerLayer, d, 2, {"a", "b", "c"}, 0.7);
    Rng rng(11);
    std::vector<Tensor<float>> outs;
    for (size_t s = 0; s < S; ++s) outs.push_back(randf({2, d}, rng));

    // Equal coefficients: softmax weights are uniform 1/S.
    auto eff = constrained_effective_weights(sp, ConstraintMode::Softmax, 0);
    for (size_t i = 0; i < eff.numel(); ++i)
        CHECK(eff.at(i) == doctest::Approx(1.0 / double(S)).epsilon(1e-6));

    // Mean mode on coefficients (1, 3) -> effective (0.25, 0.75).
    ScalingParams sp2;
    sp2.variant = ScaleVariant::NonUniformPerLayer;
    sp2.d = 2;
    sp2.n_layers = 1;
    sp2.source_order = {"a", "b"};
    sp2.omega = {{Tensor<float>::from({2}, {1, 1}), Tensor<float>::from({2}, {3, 3})}};
    auto eff2 = constrained_effective_weights(sp2, ConstraintMode::Mean, 0);
    CHECK(eff2.at(0, 0) == doctest::Approx(0.25));
    CHECK(eff2.at(1, 0) == doctest::Approx(0.75));

    // Both modes: effective weights sum to 1 per coordinate.
    auto sp3 = scaling_init<float>(ScaleVariant::NonUniformPerLayer, d, 2, {"a", "b", "c"},
                                   0.4, 0.3, 21);
    for (auto mode : {ConstraintMode::Mean, ConstraintMode::Softmax}) {
        auto e = constrained_effective_weights(sp3, mode, 1);
        for (size_t j = 0; j < d; ++j) {
            double total = 0;
            for (size_t s = 0; s < S; ++s) total += e.at(s, j);
            CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        }
    }

    // Unsupported variants are rejected.
    auto uni = make_scaling(ScaleVariant::UniformPerLayer, d, 2, {"a", "b", "c"}, 1.0);
    CHECK_THROWS_AS(combine_constrained<float>(outs, uni, ConstraintMode::Mean, 0),
                    ContractError);

    // Zero denominator in mean mode is an error.
    ScalingParams zero_sum;
    zero_sum.variant = ScaleVariant::NonUniformPerLayer;
    zero_sum.d = 2;
    zero_sum.n_layers = 1;
    zero_sum.source_order = {"a", "b"};
    zero_sum.omega = {{Tensor<float>::from({2}, {1, 1}), Tensor<float>::from({2}, {-1, 2})}};
    CHECK_THROWS_AS(constrained_effective_weights(zero_sum, ConstraintMode::Mean, 0),
                    NumericError);
}

TEST_CASE("constrained combine matches direct evaluation") {
    ScalingParams sp;
    sp.variant = ScaleVariant::NonUniformPerLayer;
    sp.d = 2;
    sp.n_layers = 1;
    sp.source_order = {"a", "b"};
    sp.omega = {{Tensor<float>::from({2}, {1, 2}), Tensor<float>::from({2}, {3, 2})}};
    auto o1 = Tensor<float>::from({1, 2}, {1, 1});
    auto o2 = Tensor<float>::from({1, 2}, {2, 2});
    auto out = combine_constrained<float>({o1, o2}, sp, ConstraintMode::Mean, 0);
    // Coordinate 0: weights (0.25, 0.75) -> 0.25*1 + 0.75*2 = 1.75
    // Coordinate 1: weights (0.5, 0.5)   -> 0.5*1 + 0.5*2 = 1.5
    CHECK(out.at(0, 0) == doctest::Approx(1.75));
    CHECK(out.at(0, 1) == doctest::Approx(1.5));
}

TEST_CASE("scaling and fusion params round-trip through grad_check") {
    Rng rng(13);
    const size_t d = 4, S = 2;
    std::vector<Tensor<double>> outs;
    for (size_t s = 0; s < S; ++s) {
        auto o = Tensor<double>::zeros({3, d});
        for (size_t i = 0; i < o.numel(); ++i) o.at(i) = rng.uniform(-1, 1);
        outs.push_back(o);
    }
    auto xd = Tensor<double>::zeros({3, d});
    for (size_t i = 0; i < xd.numel(); ++i) xd.at(i) = rng.uniform(-1, 1);
    auto wd = Tensor<double>::zeros({3, d});
    for (size_t i = 0; i < wd.numel(); ++i) wd.at(i) = rng.uniform(-1, 1);

    // Constrained modes differentiate through the normalization.
    auto spd = scaling_init<double>(ScaleVariant::NonUniformPerLayer, d, 1, {"a", "b"},
                                    0.8, 0.1, 31);
    spd.set_trainable(true);
    std::vector<std::pair<std::string, Tensor<double>>> params;
    for (auto& [name, p] : spd.named_params()) params.emplace_back(name, p);
    for (auto mode : {ConstraintMode::Mean, ConstraintMode::Softmax}) {
        auto res = grad_check<double>(
            [&] { return sum(mul(combine_constrained<double>(outs, spd, mode, 0), wd)); },
            params, 1e-6);
        CHECK(res.max_rel_err < 1e-4);
    }

    // Fusion differentiates through attention into Q/K/V.
    auto fpd = fusion_init<double>(d, 1, 17);
    fpd.set_trainable(true);
    std::vector<std::pair<std::string, Tensor<double>>> fparams;
    for (auto& [name, p] : fpd.named_params()) fparams.emplace_back(name, p);
    auto res = grad_check<double>(
        [&] { return sum(mul(combine_fusion<double>(xd, outs, fpd, 0), wd)); }, fparams, 1e-6);
    CHECK(res.max_rel_err < 1e-4);
}
