#include "doctest.h"
#include "test_support.hpp"

#include "tensorlens/error.hpp"
#include "tensorlens/eval.hpp"

#include <cmath>

using namespace tensorlens;
using namespace tltest;

namespace {

RelevanceScores scores_of(Vector s, std::vector<std::size_t> excluded = {}) {
    RelevanceScores r{std::move(s), {}};
    r.maskable.assign(r.scores.size(), true);
    for (auto p : excluded) r.maskable[p] = false;
    return r;
}

} // namespace

TEST_CASE("perturb mask") {
    TokenSequence t{{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}};
    auto s = scores_of({0, .9, .1, .8, .2, .7, .3, .05, .4, .01}, {0});

    CHECK(perturb_mask(t, s, 0.0, 0) == t);
    auto all = perturb_mask(t, s, 1.0, 0);
    CHECK(all.ids == std::vector<TokenId>{1, 0, 0, 0, 0, 0, 0, 0, 0, 0});

    // 9 maskable, 30% -> ceil(2.7) = 3 positions: 1, 3, 5
    auto three = perturb_mask(t, s, 0.3, 0);
    CHECK(three.ids == std::vector<TokenId>{1, 0, 3, 0, 5, 0, 7, 8, 9, 10});

    // fraction * n landing on an integer is not rounded up
    auto exact = perturb_mask(TokenSequence{{1, 2, 3, 4, 5}}, scores_of({5, 4, 3, 2, 1}), 0.4, 0);
    CHECK(exact.ids == std::vector<TokenId>{0, 0, 3, 4, 5});

    CHECK_THROWS_AS(perturb_mask(t, s, 1.5, 0), ValueError);
    CHECK_THROWS_AS(perturb_mask(TokenSequence{{1}}, scores_of({1}, {0}), 0.5, 0), ValueError);
}

TEST_CASE("hs_mse and aopc") {
    ForwardTrace a, b;
    a.final_hidden = DenseMatrix::from_rows({{1, 2, 3, 4}});
    b.final_hidden = DenseMatrix::from_rows({{1, 2, 3, 4}});
    CHECK(hs_mse(a, b, 0) == 0.0);
    const double c = 0.5;
    b.final_hidden = DenseMatrix::from_rows({{1 + c, 2 + c, 3 + c, 4 + c}});
    CHECK(hs_mse(a, b, 0) == doctest::Approx(c * c));

    auto la = DenseMatrix::from_rows({{0, 0}});
    auto lb = DenseMatrix::from_rows({{std::log(3.0), 0}});
    // softmax: (0.5, 0.5) vs (0.75, 0.25)
    CHECK(aopc(la, lb, 0, 0) == doctest::Approx(0.25));
    CHECK(aopc(la, lb, 0, 1) == doctest::Approx(0.25));
    CHECK_THROWS_AS(aopc(la, lb, 0, 2), IndexError);
}

TEST_CASE("auc") {
    const double v = 2.0;
    PerturbationCurve flat{{0.0, 0.3}, {v, v}};
    CHECK(auc(flat) == doctest::Approx(0.3 * v));
    PerturbationCurve ramp{{0.0, 0.3}, {0.0, v}};
    CHECK(auc(ramp) == doctest::Approx(0.15 * v));
    PerturbationCurve seven{{0, .05, .1, .15, .2, .25, .3}, {0, 1, 2, 3, 4, 5, 6}};
    CHECK(auc(seven) == doctest::Approx(0.9));
    PerturbationCurve c12{{0, .05, .1, .15, .2, .25, .3}, Vector(7, 12.36)};
    CHECK(auc(c12) == doctest::Approx(3.708));

    CHECK_THROWS_AS(auc(PerturbationCurve{{0.0}, {1.0}}), ValueError);
    CHECK_THROWS_AS(auc(PerturbationCurve{{0.0, 0.0}, {1.0, 1.0}}), ValueError);
    CHECK_THROWS_AS(auc(PerturbationCurve{{0.1, 0.0}, {1.0, 1.0}}), ValueError);
    CHECK_THROWS_AS(auc(PerturbationCurve{{0.0, 0.1}, {1.0}}), DimensionError);
}

TEST_CASE("perturbation suite") {
    auto c = small_config(2);
    c.mask_token = 0;
    auto m = random_model(c, 3);
    std::mt19937_64 rng(3);
    std::vector<TokenSequence> data;
    for (int i = 0; i < 6; ++i) data.push_back(random_tokens(7, c.vocab, rng));

    PerturbationOptions o;
    o.seed = 11;
    std::vector<std::string> methods{"tensor_norm", "tensor_cls", "rollout_attn"};
    auto r1 = perturbation_suite(m, data, methods, o);
    REQUIRE(r1.methods.size() == 4);
    CHECK(r1.methods.back().method == "random");
    for (const auto& mr : r1.methods) {
        CHECK(mr.hs_mse.values[0] == 0.0);
        CHECK(mr.aopc.values[0] == 0.0);
        CHECK(mr.hs_mse.values.size() == 7);
        CHECK(mr.hs_mse_auc == doctest::Approx(auc(mr.hs_mse)));
        for (double v : mr.hs_mse.values) CHECK(v >= 0.0);
    }
    CHECK_THROWS_AS(r1.find("mean_attn"), ValueError);

    SUBCASE("deterministic across runs and thread counts") {
        auto r2 = perturbation_suite(m, data, methods, o);
        o.threads = 4;
        auto r3 = perturbation_suite(m, data, methods, o);
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(r1.methods[k].hs_mse.values == r2.methods[k].hs_mse.values);
            CHECK(r1.methods[k].hs_mse.values == r3.methods[k].hs_mse.values);
            CHECK(r1.methods[k].aopc.values == r3.methods[k].aopc.values);
        }
    }
    SUBCASE("the random arm depends on the seed") {
        o.seed = 12;
        auto r4 = perturbation_suite(m, data, methods, o);
        CHECK(r4.find("random").hs_mse.values != r1.find("random").hs_mse.values);
        CHECK(r4.find("tensor_norm").hs_mse.values == r1.find("tensor_norm").hs_mse.values);
    }
    SUBCASE("masking everything yields the all-mask sequence metric") {
        o.fractions = {0.0, 1.0};
        auto r = perturbation_suite(m, {data[0]}, {"tensor_norm"}, o);
        TokenSequence masked = data[0];
        for (std::size_t i = 1; i < masked.ids.size(); ++i) masked.ids[i] = 0;
        auto base = model_forward(data[0], m);
        auto pert = model_forward(masked, m);
        CHECK(r.find("tensor_norm").hs_mse.values[1] == doctest::Approx(hs_mse(base.trace, pert.trace, 0)));
        CHECK(r.find("random").hs_mse.values[1] == r.find("tensor_norm").hs_mse.values[1]);
    }
    CHECK_THROWS_AS(perturbation_suite(m, {}, methods, o), ValueError);
    CHECK_THROWS_AS(perturbation_suite(m, data, {"nope"}, o), ValueError);
}

TEST_CASE("method scores") {
    auto c = small_config(2, NormPlacement::post_ln, false);
    auto m = random_model(c, 4);
    auto fwd = model_forward(TokenSequence{{1, 2, 3, 4, 5}}, m);
    std::vector<std::size_t> excluded{0};
    auto s = method_scores(m, fwd.trace, "tensor_io", 0, excluded, std::nullopt, 0);
    CHECK_FALSE(s.maskable[0]);
    auto t = full_tensor(fwd.trace, m, BiasMode::bias_free);
    auto map = collapse_io(t, fwd.trace.embedded, fwd.trace.final_hidden);
    for (std::size_t j = 1; j < 5; ++j) CHECK(std::abs(s.scores[j] - map.values(0, j)) < 1e-10);
    auto r1 = method_scores(m, fwd.trace, "random", 0, excluded, std::nullopt, 7);
    auto r2 = method_scores(m, fwd.trace, "random", 0, excluded, std::nullopt, 7);
    CHECK(r1.scores == r2.scores);
}

TEST_CASE("relation decoding") {
    auto c = small_config(2, NormPlacement::pre_ln, true);
    c.causal = true;
    c.max_len = 12;
    auto m = random_model(c, 5);

    RelationSet rel{"r", {}};
    for (TokenId s = 2; s < 10; ++s) rel.examples.push_back({TokenSequence{{1, s}}, {1, 2}, static_cast<TokenId>(s + 1)});

    SUBCASE("prompt layout") {
        const RelationExample* d = &rel.examples[0];
        auto p = few_shot_prompt({d}, rel.examples[3]);
        CHECK(p.ids == std::vector<TokenId>{1, 2, 3, 1, 5});
    }
    SUBCASE("m = 1 on the training example is exact") {
        RelationOptions o;
        o.m = 1;
        o.test_on_train = true;
        auto r = evaluate_relation(m, rel, o);
        CHECK(r.mean_accuracy == 1.0);
        CHECK(r.splits.size() == 6);
        for (auto& s : r.splits) CHECK(s.tested == 1);
    }
    SUBCASE("mean of one operator equals that operator") {
        std::vector<RelationExample> train{rel.examples[2]};
        auto op = relation_mean_tensor(m, train, 1);
        auto fwd = model_forward(train[0].prompt, m);
        auto t = full_tensor(fwd.trace, m, BiasMode::with_biases);
        CHECK(max_abs_diff(op.matrix, t.op.matrix) == 0.0);
        CHECK(relation_decode(op, fwd.trace.embedded, m.weights.unembed, 1) ==
              static_cast<TokenId>(std::max_element(fwd.logits.row(1).begin(), fwd.logits.row(1).end()) -
                                   fwd.logits.row(1).begin()));
    }
    SUBCASE("two identical examples average to the same operator") {
        std::vector<RelationExample> train{rel.examples[1], rel.examples[1]};
        auto op = relation_mean_tensor(m, train, 2);
        auto prompt = few_shot_prompt({&train[0]}, train[0]);
        auto t = full_tensor(model_forward(prompt, m).trace, m, BiasMode::with_biases);
        CHECK(max_abs_diff(op.matrix, t.op.matrix) < 1e-12);
        CHECK(max_abs_diff(op.bias, t.op.bias) < 1e-12);
    }
    SUBCASE("held-out evaluation runs and is seeded") {
        RelationOptions o;
        o.m = 3;
        o.seeds = {0, 1};
        auto a = evaluate_relation(m, rel, o);
        auto b = evaluate_relation(m, rel, o);
        CHECK(a.splits.size() == 2);
        CHECK(a.splits[0].tested == 5);
        CHECK(a.mean_accuracy == b.mean_accuracy);
        o.m = 8;
        CHECK_THROWS_AS(evaluate_relation(m, rel, o), ValueError);
        o.m = 0;
        CHECK_THROWS_AS(evaluate_relation(m, rel, o), ValueError);
    }
}

TEST_CASE("group relations") {
    std::vector<std::pair<std::string, RelationExample>> recs{
        {"a", {TokenSequence{{1, 2}}, {1, 2}, 3}},
        {"b", {TokenSequence{{4, 5}}, {1, 2}, 6}},
        {"a", {TokenSequence{{1, 3}}, {1, 2}, 4}},
        {"a", {TokenSequence{{1, 2, 3}}, {1, 3}, 4}},
    };
    auto sets = group_relations(recs);
    REQUIRE(sets.size() == 2);
    CHECK(sets[0].relation == "a");
    CHECK(sets[0].examples.size() == 2);
    CHECK(sets[1].relation == "b");
    CHECK(sets[1].examples.size() == 1);
}

TEST_CASE("norm bound") {
    SUBCASE("no layers and no final norm") {
        auto m = random_model(small_config(0), 1);
        auto fwd = model_forward(TokenSequence{{1, 2}}, m);
        CHECK(prop1_bound(m, fwd.trace).value == 1.0);
    }
    SUBCASE("hand computation with orthogonal weights") {
        for (auto p : {NormPlacement::post_ln, NormPlacement::pre_ln}) {
            auto c = small_config(1, p, false);
            auto m = random_model(c, 2);
            auto& w = m.weights.layers[0];
            w.w_v = DenseMatrix::identity(6);
            w.w_o = DenseMatrix::identity(6);
            w.w_1 = DenseMatrix(6, 10);
            w.w_2 = DenseMatrix(10, 6);
            for (std::size_t i = 0; i < 6; ++i) {
                w.w_1(i, i) = 1.0;
                w.w_2(i, i) = 1.0;
            }
            w.ln1.gamma.assign(6, 1.0);
            w.ln1.gamma[2] = -2.0;
            w.ln2.gamma.assign(6, 0.5);
            auto fwd = model_forward(TokenSequence{{1, 2, 3, 4}}, m);
            const auto& lt = fwd.trace.layers[0];
            const double ln1 = 2.0 / *std::min_element(lt.sigma1.begin(), lt.sigma1.end());
            const double ln2 = 0.5 / *std::min_element(lt.sigma2.begin(), lt.sigma2.end());
            const double attn = 2.0 * 2.0;  // sqrt(L) * H, each head a unit-norm projection
            const double ffn = 1.0;
            const double expected = p == NormPlacement::post_ln ? ln2 * (ffn + 1) * ln1 * (attn + 1)
                                                                : (1 + ffn * ln2) * (1 + attn * ln1);
            auto b = prop1_bound(m, fwd.trace);
            CHECK(b.layers[0].attn == doctest::Approx(attn));
            CHECK(b.layers[0].ffn == doctest::Approx(ffn));
            CHECK(b.value == doctest::Approx(expected));

            auto lit = prop1_bound(m, fwd.trace, XiConvention::variance);
            const auto& v1 = lt.ln1_input_variance;
            CHECK(lit.layers[0].ln1 == doctest::Approx(2.0 / *std::min_element(v1.begin(), v1.end())));
        }
    }
    SUBCASE("dominates the spectral norm and the linearization error") {
        for (std::uint64_t seed = 0; seed < 6; ++seed) {
            auto c = small_config(2, seed % 2 ? NormPlacement::pre_ln : NormPlacement::post_ln, true);
            c.final_norm = seed % 3 == 0;
            auto m = random_model(c, seed);
            std::mt19937_64 rng(seed);
            auto x0 = embed(random_tokens(4, c.vocab, rng), m);
            std::vector<DenseMatrix> eps{DenseMatrix(4, 6)};
            for (double s : {1e-3, 1e-1, 1.0}) {
                auto e = random_matrix(4, 6, rng);
                eps.push_back((s / frobenius_norm(e)) * e);
            }
            auto reports = prop1_check(m, x0, eps);
            CHECK(reports[0].lhs < 1e-9);
            CHECK(reports[0].forward_change == 0.0);
            for (auto& r : reports) {
                CHECK(r.bound_dominates);
                CHECK(r.holds);
                CHECK(r.holds_bound);
            }
            CHECK(reports[1].epsilon_norm == doctest::Approx(1e-3));
        }
    }
}
