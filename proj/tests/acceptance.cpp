// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include "test_support.hpp"

#include "tensorlens/collapse.hpp"
#include "tensorlens/error.hpp"
#include "tensorlens/eval.hpp"
#include "tensorlens/modelio.hpp"
#include "tensorlens/tensorize.hpp"
#include "tensorlens/toy.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>

using namespace tensorlens;
using namespace tltest;

namespace {

constexpr double kExactnessTol = 1e-6;
constexpr double kExactnessSeconds = 60.0;
constexpr double kPathTol = 1e-8;
constexpr double kRowSumTol = 1e-6;
constexpr double kVecRuleTol = 1e-12;
constexpr double kClassifierAccuracy = 0.95;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(const char* id, const char* name, const std::function<Outcome()>& body) {
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s %s %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// The model grid of the exactness criterion: placements x activations x
// bias modes, cycled, with depth, heads and widths varying per index.
Model grid_model(std::size_t k) {
    ModelConfig c;
    c.norm_placement = k % 2 ? NormPlacement::pre_ln : NormPlacement::post_ln;
    c.activation = std::array{Activation::gelu, Activation::relu, Activation::silu}[(k / 2) % 3];
    c.use_biases = (k / 6) % 2 == 0;
    c.n_layers = k % 5;
    c.n_heads = 1 + k % 2;
    c.d_head = std::array<std::size_t, 4>{2, 3, 4, 8}[(k / 3) % 4];
    c.d_model = c.n_heads * c.d_head;
    c.d_ff = std::array<std::size_t, 3>{8, 16, 32}[k % 3];
    c.max_len = 8;
    c.vocab = 17;
    c.causal = (k / 4) % 2 == 1;
    c.final_norm = (k / 7) % 2 == 1;
    return random_model(c, 1000 + k);
}

std::size_t grid_len(std::size_t k) { return 1 + (k * 3) % 8; }

Outcome exactness() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (std::size_t k = 0; k < 50; ++k) {
        const Model m = grid_model(k);
        std::mt19937_64 rng(k);
        const auto fwd = model_forward(random_tokens(grid_len(k), m.config.vocab, rng), m);
        const auto t = full_tensor(fwd.trace, m, BiasMode::with_biases);
        worst = std::max(worst, max_abs_diff(apply_operator(t.op, fwd.trace.embedded), fwd.trace.final_hidden));
    }
    const double secs = seconds_since(t0);
    return {worst <= kExactnessTol && secs < kExactnessSeconds,
            "50 models, max |T(X0) - XN| = " + num(worst) + " (tol " + num(kExactnessTol) + "), " + num(secs) +
                " s (limit " + num(kExactnessSeconds) + " s)"};
}

Outcome path_equivalence() {
    double worst = 0.0;
    for (std::size_t k = 0; k < 50; ++k) {
        const Model m = grid_model(k);
        std::mt19937_64 rng(k + 7);
        const auto fwd = model_forward(random_tokens(grid_len(k), m.config.vocab, rng), m);
        const auto t = full_tensor(fwd.trace, m, BiasMode::with_biases);
        const auto linear = t.op.linear_part();
        for (int p = 0; p < 20; ++p) {
            const auto v = random_matrix(fwd.trace.seq_len, m.config.d_model, rng);
            worst = std::max(worst, max_abs_diff(apply_operator(linear, v), patched_forward(fwd.trace, v, m, false)));
            worst = std::max(worst, max_abs_diff(apply_operator(t.op, v), patched_forward(fwd.trace, v, m, true)));
        }
    }
    // Every basis column at L = 4, D = 6.
    double col_worst = 0.0;
    for (auto p : {NormPlacement::post_ln, NormPlacement::pre_ln}) {
        auto c = small_config(3, p, true);
        c.final_norm = true;
        const Model m = random_model(c, 5);
        std::mt19937_64 rng(5);
        const auto fwd = model_forward(random_tokens(4, c.vocab, rng), m);
        const auto view_src = full_tensor(fwd.trace, m, BiasMode::bias_free);
        const auto view = view_src.view();
        for (std::size_t l = 0; l < 4; ++l)
            for (std::size_t d = 0; d < 6; ++d) {
                const auto col = tensor_column(fwd.trace, m, l, d);
                for (std::size_t i = 0; i < 4; ++i)
                    for (std::size_t a = 0; a < 6; ++a)
                        col_worst = std::max(col_worst, std::abs(col(i, a) - view(i, a, l, d)));
            }
    }
    return {worst <= kPathTol && col_worst <= kPathTol,
            "1000 probes max diff " + num(worst) + ", 48 basis columns max diff " + num(col_worst) + " (tol " +
                num(kPathTol) + ")"};
}

Outcome row_sums() {
    double io_worst = 0.0, cls_worst = 0.0;
    for (std::size_t k = 0; k < 20; ++k) {
        Model m = grid_model(k);
        m.config.use_biases = false;
        m = random_model(m.config, 2000 + k);
        if (m.config.n_layers == 0) continue;
        std::mt19937_64 rng(k);
        const auto fwd = model_forward(random_tokens(grid_len(k), m.config.vocab, rng), m);
        const auto t = full_tensor(fwd.trace, m, BiasMode::bias_free);
        const auto& xn = fwd.trace.final_hidden;
        const auto io = collapse_io(t, fwd.trace.embedded, xn);
        const auto c = static_cast<TokenId>(rng() % m.config.vocab);
        const auto cls = collapse_cls(t, fwd.trace.embedded, m.weights.unembed, c);
        for (std::size_t i = 0; i < fwd.trace.seq_len; ++i) {
            double s_io = 0.0, s_cls = 0.0;
            for (std::size_t j = 0; j < fwd.trace.seq_len; ++j) {
                s_io += io.values(i, j);
                s_cls += cls.values(i, j);
            }
            const double target_io = dot(xn.row(i), xn.row(i));
            const double target_cls = fwd.logits(i, c);
            io_worst = std::max(io_worst, std::abs(s_io - target_io) / std::max(1.0, std::abs(target_io)));
            cls_worst = std::max(cls_worst, std::abs(s_cls - target_cls) / std::max(1.0, std::abs(target_cls)));
        }
    }
    return {io_worst <= kRowSumTol && cls_worst <= kRowSumTol,
            "IO rows vs ||XN_i||^2 " + num(io_worst) + ", class rows vs logits " + num(cls_worst) + " (tol " +
                num(kRowSumTol) + ", relative to max(1, |target|))"};
}

Outcome error_bound() {
    std::size_t total = 0, spectral_ok = 0, product_ok = 0, dominated = 0, literal_dominated = 0, models = 0;
    const double norms[] = {1e-3, 1e-2, 1e-1, 1.0};
    for (std::size_t k = 0; k < 12; ++k) {
        const Model m = grid_model(k + 1);  // skip the zero-layer entry
        if (m.config.n_layers == 0) continue;
        ++models;
        std::mt19937_64 rng(k + 31);
        const auto x0 = embed(random_tokens(grid_len(k + 1), m.config.vocab, rng), m);
        std::vector<DenseMatrix> eps;
        for (int trial = 0; trial < 100; ++trial)
            for (double n : norms) {
                auto e = random_matrix(x0.rows(), x0.cols(), rng);
                eps.push_back((n / frobenius_norm(e)) * e);
            }
        for (const auto& r : prop1_check(m, x0, eps)) {
            ++total;
            spectral_ok += r.holds;
            product_ok += r.holds_bound;
            dominated += r.bound_dominates;
        }
        const auto fwd = model_forward_embedded(x0, m);
        const double spectral = spectral_norm(full_tensor(fwd.trace, m, BiasMode::with_biases).op.matrix).value;
        literal_dominated += prop1_bound(m, fwd.trace, XiConvention::variance).value >= spectral;
    }
    const bool pass = spectral_ok == total && product_ok == total && dominated == total;
    return {pass, std::to_string(models) + " models x 100 trials x 4 norms: spectral " + std::to_string(spectral_ok) +
                      "/" + std::to_string(total) + ", product " + std::to_string(product_ok) + "/" +
                      std::to_string(total) + ", product >= spectral " + std::to_string(dominated) + "/" +
                      std::to_string(total) + " [info: literal min-variance xi dominates in " +
                      std::to_string(literal_dominated) + "/" + std::to_string(models) + " models]"};
}

Outcome vectorization_rules() {
    std::mt19937_64 rng(99);
    double worst = 0.0;
    for (int s = 0; s < 100; ++s) {
        const std::size_t L = 1 + rng() % 7, D = 1 + rng() % 7;
        const auto x = random_matrix(L, D, rng);
        const auto a = random_matrix(L, L, rng), b = random_matrix(D, D, rng), h = random_matrix(L, D, rng);
        auto rel = [](const DenseMatrix& got, const DenseMatrix& want) {
            return max_abs_diff(got, want) / std::max(1.0, max_abs(want.data()));
        };
        worst = std::max(worst, rel(apply_operator(bilinear_operator(a, b), x), naive_matmul(naive_matmul(a, x), b)));
        worst = std::max(worst, rel(apply_operator(right_multiply_operator(b, L), x), naive_matmul(x, b)));
        DenseMatrix had(L, D);
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < D; ++j) had(i, j) = h(i, j) * x(i, j);
        worst = std::max(worst, rel(apply_operator(hadamard_operator(h), x), had));
        // vec(AXB) = (B^T kron A) vec X written out entrywise.
        const auto k = kron(b.transpose(), a);
        const auto vx = vec_cols(x);
        DenseMatrix direct(L * D, 1);
        for (std::size_t r = 0; r < L * D; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < L * D; ++c) acc += k(r, c) * vx[c];
            direct(r, 0) = acc;
        }
        const auto axb = naive_matmul(naive_matmul(a, x), b);
        worst = std::max(worst, rel(direct, DenseMatrix(L * D, 1, vec_cols(axb))));
    }
    return {worst <= kVecRuleTol, "100 random shapes, max relative diff " + num(worst) + " (tol " + num(kVecRuleTol) + ")"};
}

Outcome relation_decoding() {
    // Degenerate exactness on random models.
    std::size_t tested = 0, matched = 0;
    for (std::size_t k = 0; k < 6; ++k) {
        auto c = small_config(1 + k % 3, k % 2 ? NormPlacement::pre_ln : NormPlacement::post_ln, k % 3 != 2);
        c.causal = true;
        const Model m = random_model(c, 300 + k);
        RelationSet rel{"r", {}};
        for (TokenId s = 2; s < 10; ++s) rel.examples.push_back({TokenSequence{{1, s}}, {1, 2}, s});
        RelationOptions o;
        o.m = 1;
        o.test_on_train = true;
        for (const auto& s : evaluate_relation(m, rel, o).splits) {
            tested += s.tested;
            matched += s.matched;
        }
    }
    // Trained toy relation model, m = 3, six seeded splits.
    auto task = relation_task(512, 3, 0);
    Model m{task.config, random_weights(task.config, 0)};
    train(m, task.train, TrainOptions{});
    const double train_acc = target_accuracy(m, task.train);
    RelationOptions o;
    o.m = 3;
    double mean = 0.0;
    const auto sets = relation_sets(task.records);
    for (const auto& set : sets) mean += evaluate_relation(m, set, o).mean_accuracy;
    mean /= static_cast<double>(sets.size());
    const double chance = 1.0 / static_cast<double>(task.config.vocab);
    return {matched == tested && tested > 0 && mean > chance,
            "m=1 test=train " + std::to_string(matched) + "/" + std::to_string(tested) + "; toy (train acc " +
                num(train_acc) + ") mean-operator accuracy " + num(mean) + " vs 1/vocab " + num(chance) +
                " over " + std::to_string(sets.size()) + " relations x 6 splits"};
}

Outcome perturbation() {
    auto task = classification_task(256, 10, 0);
    Model m{task.config, random_weights(task.config, 0)};
    train(m, task.train, TrainOptions{});
    const double acc = target_accuracy(m, task.train);

    std::vector<TokenSequence> data;
    for (const auto& r : task.records) data.push_back(r.tokens);
    PerturbationOptions o;
    o.mask_id = ClassifierVocab::mask;
    o.seed = 0;
    const std::vector<std::string> methods{"tensor_norm", "tensor_io", "rollout_attn"};
    const auto r1 = perturbation_suite(m, data, methods, o);
    const auto r2 = perturbation_suite(m, data, methods, o);
    o.threads = 4;
    const auto r4 = perturbation_suite(m, data, methods, o);
    bool deterministic = true;
    for (std::size_t k = 0; k < r1.methods.size(); ++k) {
        for (const auto* other : {&r2, &r4}) {
            deterministic = deterministic && r1.methods[k].hs_mse.values == other->methods[k].hs_mse.values &&
                            r1.methods[k].aopc.values == other->methods[k].aopc.values;
        }
    }
    const double norm_auc = r1.find("tensor_norm").hs_mse_auc;
    const double random_auc = r1.find("random").hs_mse_auc;
    return {acc >= kClassifierAccuracy && norm_auc >= random_auc && deterministic,
            "train acc " + num(acc) + " (min " + num(kClassifierAccuracy) + "); HS-MSE AUC tensor_norm " +
                num(norm_auc) + " vs random " + num(random_auc) + " (margin " + num(norm_auc - random_auc) +
                "); deterministic across runs and 1 vs 4 threads: " + (deterministic ? "yes" : "no") +
                " [info: tensor_io " + num(r1.find("tensor_io").hs_mse_auc) + ", rollout_attn " +
                num(r1.find("rollout_attn").hs_mse_auc) + "]"};
}

Outcome format_robustness() {
    bool exact = true;
    for (std::size_t k = 0; k < 12; ++k) {
        const Model m = grid_model(k);
        for (Dtype d : {Dtype::f64, Dtype::f32}) {
            const auto bytes = encode_container(container_from_model(m, d));
            const Model back = model_from_container(decode_container(bytes));
            exact = exact && back.config == m.config && encode_container(container_from_model(back, d)) == bytes;
            if (d == Dtype::f64) exact = exact && back.weights.layers.size() == m.weights.layers.size() &&
                                         back.weights.tok_embed == m.weights.tok_embed &&
                                         back.weights.unembed == m.weights.unembed &&
                                         (m.config.n_layers == 0 || back.weights.layers.back().w_2 == m.weights.layers.back().w_2);
        }
    }
    const auto good = encode_container(fixture_container(grid_model(3), {TokenSequence{{1, 2, 3}}}, true));
    std::mt19937_64 rng(4242);
    std::size_t typed = 0, untyped = 0, accepted = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto b = good;
        if (trial % 5 == 0) {
            b.resize(rng() % 16);
        } else {
            const int flips = 1 + static_cast<int>(rng() % 4);
            for (int f = 0; f < flips; ++f) b[rng() % 16] ^= static_cast<std::uint8_t>(1 + rng() % 255);
        }
        try {
            (void)fixture_from_container(decode_container(b));
            ++accepted;
        } catch (const FormatError&) {
            ++typed;
        } catch (...) {
            ++untyped;
        }
    }
    return {exact && typed == 1000,
            std::string("f64/f32 round trips bit-exact: ") + (exact ? "yes" : "no") + "; header fuzz typed errors " +
                std::to_string(typed) + "/1000 (untyped " + std::to_string(untyped) + ", accepted " +
                std::to_string(accepted) + ")"};
}

} // namespace

int main() {
    report("A1", "exactness", exactness);
    report("A2", "path-equivalence", path_equivalence);
    report("A3", "row-sum-identities", row_sums);
    report("A4", "error-bound", error_bound);
    report("A5", "vectorization-rules", vectorization_rules);
    report("A6", "relation-decoding", relation_decoding);
    report("A7", "perturbation-ordering", perturbation);
    report("A8", "format-robustness", format_robustness);
    std::printf("%d of 8 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
