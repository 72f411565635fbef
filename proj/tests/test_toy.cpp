#include "doctest.h"
#include "test_support.hpp"

#include "tensorlens/toy.hpp"

#include <cmath>

using namespace tensorlens;
using namespace tltest;

namespace {

double reference_loss(const Model& m, const TrainExample& ex) {
    auto logits = model_forward(ex.tokens, m).logits;
    double total = 0.0;
    for (auto [pos, tok] : ex.targets) {
        const auto row = logits.row(pos);
        double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        total += mx + std::log(z) - row[tok];
    }
    return total / static_cast<double>(ex.targets.size());
}

} // namespace

TEST_CASE("loss matches the inference forward") {
    auto m = random_model(small_config(2, NormPlacement::pre_ln), 1);
    TrainExample ex{TokenSequence{{1, 2, 3, 4}}, {{0, 3}, {3, 7}}};
    CHECK(loss_and_gradients(m, ex, nullptr) == doctest::Approx(reference_loss(m, ex)).epsilon(1e-12));
}

TEST_CASE("gradients agree with finite differences") {
    struct Setup {
        NormPlacement p;
        Activation act;
        bool causal;
        bool final_norm;
    };
    for (auto s : {Setup{NormPlacement::post_ln, Activation::gelu, false, false},
                   Setup{NormPlacement::pre_ln, Activation::silu, true, true},
                   Setup{NormPlacement::post_ln, Activation::relu, true, true}}) {
        CAPTURE(to_string(s.p));
        CAPTURE(to_string(s.act));
        auto c = small_config(2, s.p, true, s.act);
        c.causal = s.causal;
        c.final_norm = s.final_norm;
        auto m = random_model(c, 5);
        TrainExample ex{TokenSequence{{1, 2, 3, 4, 5}}, {{0, 2}, {4, 9}}};

        auto grads = zero_like(m.weights);
        loss_and_gradients(m, ex, &grads);
        auto params = parameter_spans(m.weights, true);
        auto gspans = parameter_spans(grads, true);
        REQUIRE(params.size() == gspans.size());

        std::mt19937_64 rng(9);
        const double h = 1e-6;
        double worst = 0.0;
        for (std::size_t k = 0; k < params.size(); ++k) {
            if (params[k].empty()) continue;
            for (int probe = 0; probe < 3; ++probe) {
                const std::size_t i = rng() % params[k].size();
                const double saved = params[k][i];
                params[k][i] = saved + h;
                const double up = loss_and_gradients(m, ex, nullptr);
                params[k][i] = saved - h;
                const double down = loss_and_gradients(m, ex, nullptr);
                params[k][i] = saved;
                const double fd = (up - down) / (2 * h);
                const double err = std::abs(fd - gspans[k][i]) / std::max(1e-3, std::abs(fd) + std::abs(gspans[k][i]));
                worst = std::max(worst, err);
            }
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("parameter spans") {
    auto m = random_model(small_config(1), 2);
    auto all = parameter_spans(m.weights, true);
    auto no_bias = parameter_spans(m.weights, false);
    CHECK(all.size() > no_bias.size());
    // 3 embeddings, final-norm gamma/beta, then per layer 6 projections, 6 biases, 4 norm vectors
    CHECK(all.size() == 5 + 16);
    CHECK(no_bias.size() == 4 + 8);
}

TEST_CASE("training reduces the loss") {
    auto task = classification_task(64, 8, 3);
    CHECK(task.train.size() == 64);
    CHECK(task.records.size() == 64);
    for (const auto& r : task.records) {
        CHECK(r.tokens.ids[0] == ClassifierVocab::cls);
        CHECK(r.label.has_value());
    }
    Model m{task.config, random_weights(task.config, 1)};
    TrainOptions o;
    o.steps = 150;
    auto report = train(m, task.train, o);
    REQUIRE(report.loss.size() == 150);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 10; ++i) {
        first += report.loss[i];
        last += report.loss[140 + i];
    }
    CHECK(last < 0.5 * first);
}

TEST_CASE("relation task layout") {
    auto task = relation_task(10, 2, 4);
    CHECK(task.config.causal);
    CHECK(task.config.max_len == 8);
    for (const auto& ex : task.train) {
        CHECK(ex.tokens.size() == 5);
        CHECK(ex.targets.size() == 2);
        for (auto [pos, tok] : ex.targets) {
            CHECK(tok >= RelationVocab::first_entity);
            CHECK(pos % 3 == 1);
        }
    }
    CHECK(task.records.size() == RelationVocab::relations * RelationVocab::entities);
    CHECK(task.records[0].relation.has_value());
}
