#include "tensorlens/eval.hpp"

#include "tensorlens/error.hpp"
#include "tensorlens/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>

namespace tensorlens {

namespace {

RelevanceScores scores_from_row(Vector row, std::size_t target, std::span<const std::size_t> excluded) {
    RelevanceScores r;
    r.maskable.assign(row.size(), true);
    if (target < r.maskable.size()) r.maskable[target] = false;
    for (std::size_t p : excluded)
        if (p < r.maskable.size()) r.maskable[p] = false;
    r.scores = std::move(row);
    return r;
}

std::size_t argmax_row(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Vector softmax(std::span<const double> row) {
    const double m = *std::max_element(row.begin(), row.end());
    Vector p(row.size());
    double z = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) z += (p[i] = std::exp(row[i] - m));
    for (double& v : p) v /= z;
    return p;
}

// splitmix64 finalizer; decorrelates per-example seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

template <class T>
void shuffle_with(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Perturbation

TokenSequence perturb_mask(const TokenSequence& tokens, const RelevanceScores& scores, double fraction,
                           TokenId mask_id) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ValueError("perturbation fraction " + std::to_string(fraction) + " outside [0, 1]");
    }
    if (scores.scores.size() != tokens.ids.size() || scores.maskable.size() != tokens.ids.size()) {
        throw DimensionError("relevance scores do not match the sequence length");
    }
    const auto order = rank_positions(scores);
    if (order.empty()) throw ValueError("no maskable positions");
    const auto count = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(order.size()) - 1e-9));
    TokenSequence out = tokens;
    for (std::size_t k = 0; k < std::min(count, order.size()); ++k) out.ids[order[k]] = mask_id;
    return out;
}

double hs_mse(const ForwardTrace& a, const ForwardTrace& b, std::size_t position, HiddenState which) {
    const auto& ha = last_hidden(a, which);
    const auto& hb = last_hidden(b, which);
    if (ha.cols() != hb.cols()) throw DimensionError("hs_mse: hidden widths differ");
    if (position >= ha.rows() || position >= hb.rows()) throw IndexError("hs_mse: position out of range");
    const auto ra = ha.row(position);
    const auto rb = hb.row(position);
    double s = 0.0;
    for (std::size_t d = 0; d < ra.size(); ++d) s += (ra[d] - rb[d]) * (ra[d] - rb[d]);
    return s / static_cast<double>(ra.size());
}

double aopc(const DenseMatrix& logits_a, const DenseMatrix& logits_b, std::size_t position, TokenId token) {
    if (position >= logits_a.rows() || position >= logits_b.rows()) throw IndexError("aopc: position out of range");
    if (token >= logits_a.cols() || token >= logits_b.cols()) throw IndexError("aopc: token out of range");
    const Vector pa = softmax(logits_a.row(position));
    const Vector pb = softmax(logits_b.row(position));
    return std::abs(pa[token] - pb[token]);
}

std::string_view to_string(PerturbMetric m) {
    return m == PerturbMetric::hs_mse ? "hs_mse" : "aopc";
}

double auc(const PerturbationCurve& curve) {
    if (curve.fractions.size() != curve.values.size()) throw DimensionError("auc: fractions and values differ");
    if (curve.fractions.size() < 2) throw ValueError("auc needs at least two points");
    double area = 0.0;
    for (std::size_t k = 1; k < curve.fractions.size(); ++k) {
        const double dx = curve.fractions[k] - curve.fractions[k - 1];
        if (!(dx > 0.0)) throw ValueError("auc: fractions must be strictly increasing");
        area += 0.5 * dx * (curve.values[k] + curve.values[k - 1]);
    }
    return area;
}

const MethodResult& PerturbationReport::find(std::string_view method) const {
    for (const auto& m : methods)
        if (m.method == method) return m;
    throw ValueError("no result for method '" + std::string(method) + "'");
}

RelevanceScores method_scores(const Model& model, const ForwardTrace& trace, std::string_view method,
                              std::size_t target, std::span<const std::size_t> excluded,
                              std::optional<TokenId> class_id, std::uint64_t random_seed) {
    const std::size_t L = trace.seq_len;
    if (target >= L) throw IndexError("target position " + std::to_string(target) + " outside sequence");
    if (method == kRandomMethod) {
        std::mt19937_64 rng(random_seed);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        Vector row(L);
        for (double& v : row) v = u(rng);
        return scores_from_row(std::move(row), target, excluded);
    }
    const MapMethod m = parse_map_method(method);
    if (is_baseline(m)) {
        const CollapsedMap map = baseline_map(trace, model, m);
        return scores_from_row(Vector(map.values.row(target).begin(), map.values.row(target).end()), target,
                               excluded);
    }
    const OutputSlice slice = output_slice(trace, model, target, BiasMode::bias_free);
    switch (m) {
    case MapMethod::tensor_norm:
        return scores_from_row(collapse_norm_row(slice), target, excluded);
    case MapMethod::tensor_io:
        return scores_from_row(collapse_io_row(slice, trace.embedded, trace.final_hidden.row(target)), target,
                               excluded);
    case MapMethod::tensor_cls: {
        const TokenId c = class_id.value_or(static_cast<TokenId>(argmax_row(trace.logits.row(target))));
        return scores_from_row(collapse_cls_row(slice, trace.embedded, model.weights.unembed, c), target,
                               excluded);
    }
    default:
        throw ValueError("unhandled method '" + std::string(method) + "'");
    }
}

PerturbationReport perturbation_suite(const Model& model, const std::vector<TokenSequence>& dataset,
                                      const std::vector<std::string>& methods,
                                      const PerturbationOptions& options) {
    if (dataset.empty()) throw ValueError("perturbation dataset is empty");
    if (!options.labels.empty() && options.labels.size() != dataset.size()) {
        throw DimensionError("labels must be empty or one per example");
    }
    for (double f : options.fractions)
        if (!(f >= 0.0 && f <= 1.0)) throw ValueError("perturbation fraction outside [0, 1]");

    std::vector<std::string> arms;
    for (const auto& m : methods) {
        if (m == kRandomMethod) continue;
        (void)parse_map_method(m);
        if (std::find(arms.begin(), arms.end(), m) == arms.end()) arms.push_back(m);
    }
    arms.emplace_back(kRandomMethod);

    const std::size_t F = options.fractions.size();
    const std::size_t M = arms.size();
    // values[example][arm][metric][fraction]
    std::vector<std::vector<std::array<Vector, 2>>> values(dataset.size());

    parallel_for(dataset.size(), options.threads, [&](std::size_t e) {
        const TokenSequence& tokens = dataset[e];
        validate_tokens(tokens, model.config);
        const ForwardResult base = model_forward(tokens, model);
        const std::size_t L = tokens.ids.size();
        const std::size_t target = options.target == TargetPosition::first ? 0 : L - 1;
        std::vector<std::size_t> excluded{target};
        excluded.insert(excluded.end(), options.extra_excluded.begin(), options.extra_excluded.end());
        const auto predicted = static_cast<TokenId>(argmax_row(base.logits.row(target)));
        const TokenId class_id =
            !options.labels.empty() && options.labels[e].has_value() ? *options.labels[e] : predicted;

        auto& slot = values[e];
        slot.resize(M);
        for (std::size_t a = 0; a < M; ++a) {
            const RelevanceScores scores = method_scores(model, base.trace, arms[a], target, excluded,
                                                         class_id, mix_seed(options.seed, e));
            slot[a][0].assign(F, 0.0);
            slot[a][1].assign(F, 0.0);
            for (std::size_t k = 0; k < F; ++k) {
                const TokenSequence masked = perturb_mask(tokens, scores, options.fractions[k], options.mask_id);
                if (masked == tokens) continue;
                const ForwardResult pert = model_forward(masked, model);
                slot[a][0][k] = hs_mse(base.trace, pert.trace, target, options.hidden);
                slot[a][1][k] = aopc(base.logits, pert.logits, target, predicted);
            }
        }
    });

    PerturbationReport report;
    const double n = static_cast<double>(dataset.size());
    for (std::size_t a = 0; a < M; ++a) {
        MethodResult r;
        r.method = arms[a];
        r.hs_mse = {options.fractions, Vector(F, 0.0), PerturbMetric::hs_mse, arms[a]};
        r.aopc = {options.fractions, Vector(F, 0.0), PerturbMetric::aopc, arms[a]};
        for (std::size_t e = 0; e < dataset.size(); ++e) {
            for (std::size_t k = 0; k < F; ++k) {
                r.hs_mse.values[k] += values[e][a][0][k];
                r.aopc.values[k] += values[e][a][1][k];
            }
        }
        for (std::size_t k = 0; k < F; ++k) {
            r.hs_mse.values[k] /= n;
            r.aopc.values[k] /= n;
        }
        if (F >= 2) {
            r.hs_mse_auc = auc(r.hs_mse);
            r.aopc_auc = auc(r.aopc);
        }
        report.methods.push_back(std::move(r));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Relation decoding

TokenSequence few_shot_prompt(const std::vector<const RelationExample*>& demos, const RelationExample& query) {
    TokenSequence out;
    for (const RelationExample* d : demos) {
        out.ids.insert(out.ids.end(), d->prompt.ids.begin(), d->prompt.ids.end());
        out.ids.push_back(d->object);
    }
    out.ids.insert(out.ids.end(), query.prompt.ids.begin(), query.prompt.ids.end());
    return out;
}

namespace {

std::vector<const RelationExample*> demos_excluding(const std::vector<RelationExample>& train, std::size_t m,
                                                    std::size_t skip) {
    std::vector<const RelationExample*> demos;
    for (std::size_t k = 0; k < m; ++k)
        if (k != skip) demos.push_back(&train[k]);
    return demos;
}

} // namespace

AffineOperator relation_mean_tensor(const Model& model, const std::vector<RelationExample>& train, std::size_t m) {
    if (m == 0) throw ValueError("relation decoding needs m >= 1");
    if (train.size() < m) {
        throw ValueError("relation has " + std::to_string(train.size()) + " training examples, need " +
                         std::to_string(m));
    }
    std::optional<AffineOperator> sum;
    std::size_t length = 0;
    for (std::size_t k = 0; k < m; ++k) {
        const TokenSequence prompt = few_shot_prompt(demos_excluding(train, m, k), train[k]);
        if (k == 0) {
            length = prompt.ids.size();
        } else if (prompt.ids.size() != length) {
            throw DimensionError("relation prompts differ in length; cannot average their operators");
        }
        validate_tokens(prompt, model.config);
        const ForwardResult fwd = model_forward(prompt, model);
        ModelTensor t = full_tensor(fwd.trace, model, BiasMode::with_biases);
        if (!sum) {
            sum = std::move(t.op);
        } else {
            sum->matrix += t.op.matrix;
            for (std::size_t i = 0; i < sum->bias.size(); ++i) sum->bias[i] += t.op.bias[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(m);
    sum->matrix *= inv;
    for (double& b : sum->bias) b *= inv;
    return std::move(*sum);
}

TokenId relation_decode(const AffineOperator& mean_op, const DenseMatrix& x0, const DenseMatrix& unembed,
                        std::size_t position) {
    if (mean_op.dim() != x0.rows() * x0.cols()) {
        throw DimensionError("operator dimension " + std::to_string(mean_op.dim()) + " does not match input " +
                             std::to_string(x0.rows()) + "x" + std::to_string(x0.cols()));
    }
    if (position >= x0.rows()) throw IndexError("decode position outside sequence");
    if (unembed.rows() != x0.cols()) throw DimensionError("unembedding width mismatch");
    const DenseMatrix y = apply_operator(mean_op, x0);
    const Vector logits = matvec_transposed(unembed, y.row(position));
    return static_cast<TokenId>(argmax_row(logits));
}

RelationResult evaluate_relation(const Model& model, const RelationSet& relation, const RelationOptions& options) {
    const auto& ex = relation.examples;
    if (options.m == 0) throw ValueError("relation decoding needs m >= 1");
    if (ex.size() < options.m + (options.test_on_train ? 0 : 1)) {
        throw ValueError("relation '" + relation.relation + "' has " + std::to_string(ex.size()) +
                         " examples, too few for m = " + std::to_string(options.m));
    }
    RelationResult result;
    result.relation = relation.relation;
    for (std::uint64_t seed : options.seeds) {
        std::vector<std::size_t> idx(ex.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::mt19937_64 rng(seed);
        shuffle_with(idx, rng);

        std::vector<RelationExample> train;
        for (std::size_t k = 0; k < options.m; ++k) train.push_back(ex[idx[k]]);
        const AffineOperator mean_op = relation_mean_tensor(model, train, options.m);
        const auto demos = demos_excluding(train, options.m - 1, options.m);

        RelationSplitResult split;
        split.seed = seed;
        const std::size_t first = options.test_on_train ? 0 : options.m;
        const std::size_t last_index = options.test_on_train ? options.m : idx.size();
        for (std::size_t k = first; k < last_index; ++k) {
            const RelationExample& q = ex[idx[k]];
            const TokenSequence prompt = options.test_on_train
                                             ? few_shot_prompt(demos_excluding(train, options.m, k), q)
                                             : few_shot_prompt(demos, q);
            const ForwardResult fwd = model_forward(prompt, model);
            const std::size_t last = prompt.ids.size() - 1;
            if (options.top_k_filter > 0) {
                const auto row = fwd.logits.row(last);
                const double obj = row[q.object];
                std::size_t above = 0;
                for (double v : row) above += v > obj ? 1 : 0;
                if (above >= options.top_k_filter) continue;
            }
            const auto model_pred = static_cast<TokenId>(argmax_row(fwd.logits.row(last)));
            const TokenId decoded = relation_decode(mean_op, fwd.trace.embedded, model.weights.unembed, last);
            ++split.tested;
            if (decoded == model_pred) ++split.matched;
        }
        result.splits.push_back(split);
    }
    double sum = 0.0;
    for (const auto& s : result.splits) sum += s.accuracy();
    result.mean_accuracy = result.splits.empty() ? 0.0 : sum / static_cast<double>(result.splits.size());
    return result;
}

std::vector<RelationSet> group_relations(std::vector<std::pair<std::string, RelationExample>> records) {
    std::vector<RelationSet> sets;
    std::map<std::string, std::size_t> index;
    for (auto& [name, example] : records) {
        auto [it, inserted] = index.emplace(name, sets.size());
        if (inserted) sets.push_back(RelationSet{name, {}});
        sets[it->second].examples.push_back(std::move(example));
    }
    for (auto& s : sets) {
        std::map<std::size_t, std::size_t> counts;
        for (const auto& e : s.examples) ++counts[e.prompt.ids.size()];
        std::size_t best_len = 0, best_count = 0;
        for (const auto& [len, count] : counts) {
            if (count > best_count) {
                best_len = len;
                best_count = count;
            }
        }
        std::erase_if(s.examples, [&](const RelationExample& e) { return e.prompt.ids.size() != best_len; });
    }
    return sets;
}

// ---------------------------------------------------------------------------
// Approximation error bound

namespace {

double ln_term(const Vector& gamma, const Vector& sigma, const Vector& variance, XiConvention xi) {
    const Vector& src = xi == XiConvention::denominator ? sigma : variance;
    if (src.empty()) throw TraceMismatchError("trace lacks LayerNorm statistics");
    const double m = *std::min_element(src.begin(), src.end());
    if (!(m > 0.0)) throw ValueError("LayerNorm term is not positive (" + std::to_string(m) + ")");
    return max_abs(gamma) / m;
}

double attention_term(const LayerWeights& lw, const ModelConfig& c, std::size_t seq_len) {
    const std::size_t D = c.d_model;
    const std::size_t dh = c.d_head;
    double sum = 0.0;
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        DenseMatrix w_vo(D, D);
        for (std::size_t a = 0; a < D; ++a)
            for (std::size_t b = 0; b < D; ++b) {
                double s = 0.0;
                for (std::size_t k = 0; k < dh; ++k) s += lw.w_v(a, h * dh + k) * lw.w_o(h * dh + k, b);
                w_vo(a, b) = s;
            }
        sum += spectral_norm(w_vo).value;
    }
    return std::sqrt(static_cast<double>(seq_len)) * sum;
}

} // namespace

OperatorNormBound prop1_bound(const Model& model, const ForwardTrace& trace, XiConvention xi) {
    const auto& c = model.config;
    if (trace.layers.size() != c.n_layers) throw TraceMismatchError("trace does not cover the model's layers");
    OperatorNormBound out;
    for (std::size_t n = 0; n < c.n_layers; ++n) {
        const auto& lw = model.weights.layers[n];
        const auto& lt = trace.layers[n];
        LayerBoundTerms t;
        t.ln1 = ln_term(lw.ln1.gamma, lt.sigma1, lt.ln1_input_variance, xi);
        t.ln2 = ln_term(lw.ln2.gamma, lt.sigma2, lt.ln2_input_variance, xi);
        t.attn = attention_term(lw, c, trace.seq_len);
        // |phi(z)/z| <= 1 for gelu, relu and silu.
        t.ffn = spectral_norm(lw.w_1).value * spectral_norm(lw.w_2).value;
        t.factor = c.norm_placement == NormPlacement::post_ln
                       ? t.ln2 * (t.ffn + 1.0) * t.ln1 * (t.attn + 1.0)
                       : (1.0 + t.ffn * t.ln2) * (1.0 + t.attn * t.ln1);
        out.value *= t.factor;
        out.layers.push_back(t);
    }
    if (c.final_norm) {
        out.final_norm = ln_term(model.weights.final_norm.gamma, trace.final_sigma, trace.final_input_variance, xi);
        out.value *= out.final_norm;
    }
    return out;
}

std::vector<BoundReport> prop1_check(const Model& model, const DenseMatrix& x0,
                                     const std::vector<DenseMatrix>& epsilons) {
    const ForwardResult base = model_forward_embedded(x0, model);
    const ModelTensor t = full_tensor(base.trace, model, BiasMode::with_biases);
    const double spectral = spectral_norm(t.op.matrix).value;
    const double bound = prop1_bound(model, base.trace).value;

    std::vector<BoundReport> reports;
    reports.reserve(epsilons.size());
    for (const auto& eps : epsilons) {
        if (eps.rows() != x0.rows() || eps.cols() != x0.cols()) throw DimensionError("perturbation shape mismatch");
        const DenseMatrix xp = x0 + eps;
        const DenseMatrix fp = model_forward_embedded(xp, model).trace.final_hidden;
        BoundReport r;
        r.epsilon_norm = frobenius_norm(eps);
        r.lhs = frobenius_norm(apply_operator(t.op, xp) - fp);
        r.forward_change = frobenius_norm(fp - base.trace.final_hidden);
        r.spectral_norm = spectral;
        r.tensor_norm_bound = bound;
        r.rhs = spectral * r.epsilon_norm + r.forward_change;
        r.rhs_bound = bound * r.epsilon_norm + r.forward_change;
        r.holds = r.lhs <= r.rhs + kBoundSlack;
        r.holds_bound = r.lhs <= r.rhs_bound + kBoundSlack;
        r.bound_dominates = bound >= spectral;
        reports.push_back(r);
    }
    return reports;
}

} // namespace tensorlens
