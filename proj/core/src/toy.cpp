#include "tensorlens/toy.hpp"

#include "tensorlens/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace tensorlens {

namespace {

DenseMatrix columns(const DenseMatrix& m, std::size_t first, std::size_t count) {
    DenseMatrix out(m.rows(), count);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, first + c);
    return out;
}

void set_columns(DenseMatrix& m, std::size_t first, const DenseMatrix& block) {
    for (std::size_t r = 0; r < block.rows(); ++r)
        for (std::size_t c = 0; c < block.cols(); ++c) m(r, first + c) = block(r, c);
}

void add_bias(DenseMatrix& m, const Vector& b) {
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) += b[c];
}

void add_colsum(Vector& g, const DenseMatrix& d) {
    for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) g[c] += d(r, c);
}

// g += a^T b
void add_at_b(DenseMatrix& g, const DenseMatrix& a, const DenseMatrix& b) {
    for (std::size_t k = 0; k < a.rows(); ++k)
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double s = a(k, i);
            if (s == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) g(i, j) += s * b(k, j);
        }
}

DenseMatrix a_bt(const DenseMatrix& a, const DenseMatrix& b) {
    return matmul(a, b.transpose());
}

double activation_derivative(Activation act, double z) {
    switch (act) {
    case Activation::gelu: {
        const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + z * pdf;
    }
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::silu: {
        const double s = 1.0 / (1.0 + std::exp(-z));
        return s * (1.0 + z * (1.0 - s));
    }
    }
    return 1.0;
}

struct NormCache {
    DenseMatrix xhat;
    Vector sigma;
};

DenseMatrix norm_forward(const DenseMatrix& x, const LayerNormWeights& w, double eps, NormCache& cache) {
    const std::size_t D = x.cols();
    cache.xhat = DenseMatrix(x.rows(), D);
    cache.sigma.assign(x.rows(), 0.0);
    DenseMatrix y(x.rows(), D);
    for (std::size_t l = 0; l < x.rows(); ++l) {
        double mean = 0.0;
        for (std::size_t d = 0; d < D; ++d) mean += x(l, d);
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (std::size_t d = 0; d < D; ++d) var += (x(l, d) - mean) * (x(l, d) - mean);
        var /= static_cast<double>(D);
        cache.sigma[l] = std::sqrt(var + eps);
        for (std::size_t d = 0; d < D; ++d) {
            cache.xhat(l, d) = (x(l, d) - mean) / cache.sigma[l];
            y(l, d) = w.gamma[d] * cache.xhat(l, d) + w.beta[d];
        }
    }
    return y;
}

DenseMatrix norm_backward(const NormCache& cache, const LayerNormWeights& w, const DenseMatrix& dy,
                          LayerNormWeights& g) {
    const std::size_t D = dy.cols();
    DenseMatrix dx(dy.rows(), D);
    for (std::size_t l = 0; l < dy.rows(); ++l) {
        double mean_g = 0.0, mean_gx = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            g.gamma[d] += dy(l, d) * cache.xhat(l, d);
            g.beta[d] += dy(l, d);
            const double gh = dy(l, d) * w.gamma[d];
            mean_g += gh;
            mean_gx += gh * cache.xhat(l, d);
        }
        mean_g /= static_cast<double>(D);
        mean_gx /= static_cast<double>(D);
        for (std::size_t d = 0; d < D; ++d) {
            const double gh = dy(l, d) * w.gamma[d];
            dx(l, d) = (gh - mean_g - cache.xhat(l, d) * mean_gx) / cache.sigma[l];
        }
    }
    return dx;
}

struct AttnCache {
    DenseMatrix x, q, k, v, o;
    std::vector<DenseMatrix> a;
};

DenseMatrix attn_forward(const DenseMatrix& x, const LayerWeights& w, const ModelConfig& c, AttnCache& cache) {
    const std::size_t L = x.rows();
    const std::size_t dh = c.d_head;
    const double scale = c.attn_scale ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;
    cache.x = x;
    cache.q = matmul(x, w.w_q);
    add_bias(cache.q, w.b_q);
    cache.k = matmul(x, w.w_k);
    add_bias(cache.k, w.b_k);
    cache.v = matmul(x, w.w_v);
    add_bias(cache.v, w.b_v);
    cache.o = DenseMatrix(L, c.d_model);
    cache.a.clear();
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        const DenseMatrix qh = columns(cache.q, h * dh, dh);
        const DenseMatrix kh = columns(cache.k, h * dh, dh);
        DenseMatrix a(L, L);
        for (std::size_t i = 0; i < L; ++i) {
            const std::size_t visible = c.causal ? i + 1 : L;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < visible; ++j) {
                a(i, j) = dot(qh.row(i), kh.row(j)) * scale;
                mx = std::max(mx, a(i, j));
            }
            double z = 0.0;
            for (std::size_t j = 0; j < visible; ++j) z += (a(i, j) = std::exp(a(i, j) - mx));
            for (std::size_t j = 0; j < visible; ++j) a(i, j) /= z;
        }
        set_columns(cache.o, h * dh, matmul(a, columns(cache.v, h * dh, dh)));
        cache.a.push_back(std::move(a));
    }
    DenseMatrix out = matmul(cache.o, w.w_o);
    add_bias(out, w.b_o);
    return out;
}

DenseMatrix attn_backward(const AttnCache& cache, const LayerWeights& w, const ModelConfig& c,
                          const DenseMatrix& dout, LayerWeights& g) {
    const std::size_t L = dout.rows();
    const std::size_t dh = c.d_head;
    const double scale = c.attn_scale ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;
    add_at_b(g.w_o, cache.o, dout);
    add_colsum(g.b_o, dout);
    const DenseMatrix d_o = a_bt(dout, w.w_o);
    DenseMatrix dq(L, c.d_model), dk(L, c.d_model), dv(L, c.d_model);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        const DenseMatrix& a = cache.a[h];
        const DenseMatrix doh = columns(d_o, h * dh, dh);
        const DenseMatrix vh = columns(cache.v, h * dh, dh);
        const DenseMatrix qh = columns(cache.q, h * dh, dh);
        const DenseMatrix kh = columns(cache.k, h * dh, dh);
        const DenseMatrix da = a_bt(doh, vh);
        set_columns(dv, h * dh, matmul(a.transpose(), doh));
        DenseMatrix ds(L, L);
        for (std::size_t i = 0; i < L; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < L; ++j) row += da(i, j) * a(i, j);
            for (std::size_t j = 0; j < L; ++j) ds(i, j) = a(i, j) * (da(i, j) - row) * scale;
        }
        set_columns(dq, h * dh, matmul(ds, kh));
        set_columns(dk, h * dh, matmul(ds.transpose(), qh));
    }
    add_at_b(g.w_q, cache.x, dq);
    add_at_b(g.w_k, cache.x, dk);
    add_at_b(g.w_v, cache.x, dv);
    add_colsum(g.b_q, dq);
    add_colsum(g.b_k, dk);
    add_colsum(g.b_v, dv);
    return a_bt(dq, w.w_q) + a_bt(dk, w.w_k) + a_bt(dv, w.w_v);
}

struct FfnCache {
    DenseMatrix x, z, h;
};

DenseMatrix ffn_fwd(const DenseMatrix& x, const LayerWeights& w, const ModelConfig& c, FfnCache& cache) {
    cache.x = x;
    cache.z = matmul(x, w.w_1);
    add_bias(cache.z, w.b_1);
    cache.h = DenseMatrix(cache.z.rows(), cache.z.cols());
    for (std::size_t i = 0; i < cache.z.size(); ++i) cache.h.data()[i] = activate(c.activation, cache.z.data()[i]);
    DenseMatrix out = matmul(cache.h, w.w_2);
    add_bias(out, w.b_2);
    return out;
}

DenseMatrix ffn_backward(const FfnCache& cache, const LayerWeights& w, const ModelConfig& c, const DenseMatrix& dout,
                         LayerWeights& g) {
    add_at_b(g.w_2, cache.h, dout);
    add_colsum(g.b_2, dout);
    DenseMatrix dz = a_bt(dout, w.w_2);
    for (std::size_t i = 0; i < dz.size(); ++i) dz.data()[i] *= activation_derivative(c.activation, cache.z.data()[i]);
    add_at_b(g.w_1, cache.x, dz);
    add_colsum(g.b_1, dz);
    return a_bt(dz, w.w_1);
}

struct BlockCache {
    AttnCache attn;
    FfnCache ffn;
    NormCache ln1, ln2;
};

DenseMatrix block_fwd(const DenseMatrix& x, const LayerWeights& w, const ModelConfig& c, BlockCache& bc) {
    if (c.norm_placement == NormPlacement::post_ln) {
        const DenseMatrix y1 = norm_forward(x + attn_forward(x, w, c, bc.attn), w.ln1, c.ln_epsilon, bc.ln1);
        return norm_forward(y1 + ffn_fwd(y1, w, c, bc.ffn), w.ln2, c.ln_epsilon, bc.ln2);
    }
    const DenseMatrix z1 = x + attn_forward(norm_forward(x, w.ln1, c.ln_epsilon, bc.ln1), w, c, bc.attn);
    return z1 + ffn_fwd(norm_forward(z1, w.ln2, c.ln_epsilon, bc.ln2), w, c, bc.ffn);
}

DenseMatrix block_backward(const BlockCache& bc, const LayerWeights& w, const ModelConfig& c, const DenseMatrix& dout,
                           LayerWeights& g) {
    if (c.norm_placement == NormPlacement::post_ln) {
        const DenseMatrix dz2 = norm_backward(bc.ln2, w.ln2, dout, g.ln2);
        const DenseMatrix dy1 = dz2 + ffn_backward(bc.ffn, w, c, dz2, g);
        const DenseMatrix dz1 = norm_backward(bc.ln1, w.ln1, dy1, g.ln1);
        return dz1 + attn_backward(bc.attn, w, c, dz1, g);
    }
    const DenseMatrix dz1 =
        dout + norm_backward(bc.ln2, w.ln2, ffn_backward(bc.ffn, w, c, dout, g), g.ln2);
    return dz1 + norm_backward(bc.ln1, w.ln1, attn_backward(bc.attn, w, c, dz1, g), g.ln1);
}

} // namespace

ModelWeights zero_like(const ModelWeights& w) {
    ModelWeights z = w;
    for (auto s : parameter_spans(z, true)) std::fill(s.begin(), s.end(), 0.0);
    return z;
}

std::vector<std::span<double>> parameter_spans(ModelWeights& w, bool include_biases) {
    std::vector<std::span<double>> out;
    auto m = [&](DenseMatrix& x) { out.emplace_back(x.data()); };
    auto b = [&](Vector& x) {
        if (include_biases) out.emplace_back(x);
    };
    m(w.tok_embed);
    m(w.pos_embed);
    m(w.unembed);
    out.emplace_back(w.final_norm.gamma);
    b(w.final_norm.beta);
    for (auto& l : w.layers) {
        m(l.w_q);
        m(l.w_k);
        m(l.w_v);
        m(l.w_o);
        m(l.w_1);
        m(l.w_2);
        b(l.b_q);
        b(l.b_k);
        b(l.b_v);
        b(l.b_o);
        b(l.b_1);
        b(l.b_2);
        out.emplace_back(l.ln1.gamma);
        out.emplace_back(l.ln2.gamma);
        b(l.ln1.beta);
        b(l.ln2.beta);
    }
    return out;
}

double loss_and_gradients(const Model& model, const TrainExample& ex, ModelWeights* grads) {
    const auto& c = model.config;
    const auto& w = model.weights;
    if (ex.targets.empty()) throw ValueError("training example has no targets");
    validate_tokens(ex.tokens, c);
    const std::size_t L = ex.tokens.ids.size();

    DenseMatrix x = embed(ex.tokens, model);
    std::vector<BlockCache> caches(c.n_layers);
    for (std::size_t n = 0; n < c.n_layers; ++n) x = block_fwd(x, w.layers[n], c, caches[n]);
    NormCache final_cache;
    const DenseMatrix h = c.final_norm ? norm_forward(x, w.final_norm, c.ln_epsilon, final_cache) : x;
    const DenseMatrix logits = matmul(h, w.unembed);

    const double inv = 1.0 / static_cast<double>(ex.targets.size());
    double loss = 0.0;
    DenseMatrix dlogits(L, c.vocab);
    for (const auto& [pos, tok] : ex.targets) {
        if (pos >= L || tok >= c.vocab) throw IndexError("training target out of range");
        const auto row = logits.row(pos);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        loss += (std::log(z) + mx - row[tok]) * inv;
        for (std::size_t k = 0; k < c.vocab; ++k) dlogits(pos, k) += std::exp(row[k] - mx) / z * inv;
        dlogits(pos, tok) -= inv;
    }
    if (!grads) return loss;

    ModelWeights& g = *grads;
    add_at_b(g.unembed, h, dlogits);
    DenseMatrix dx = a_bt(dlogits, w.unembed);
    if (c.final_norm) dx = norm_backward(final_cache, w.final_norm, dx, g.final_norm);
    for (std::size_t n = c.n_layers; n-- > 0;) dx = block_backward(caches[n], w.layers[n], c, dx, g.layers[n]);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t d = 0; d < c.d_model; ++d) {
            g.tok_embed(ex.tokens.ids[l], d) += dx(l, d);
            g.pos_embed(l, d) += dx(l, d);
        }
    }
    return loss;
}

TrainReport train(Model& model, const std::vector<TrainExample>& data, const TrainOptions& o) {
    if (data.empty()) throw ValueError("training set is empty");
    if (o.batch == 0) throw ValueError("batch size must be positive");
    const bool biases = model.config.use_biases;
    ModelWeights m1 = zero_like(model.weights);
    ModelWeights m2 = zero_like(model.weights);
    auto p = parameter_spans(model.weights, biases);
    auto s1 = parameter_spans(m1, biases);
    auto s2 = parameter_spans(m2, biases);
    std::mt19937_64 rng(o.seed);
    TrainReport report;
    for (std::size_t step = 1; step <= o.steps; ++step) {
        ModelWeights g = zero_like(model.weights);
        double loss = 0.0;
        for (std::size_t b = 0; b < o.batch; ++b) {
            loss += loss_and_gradients(model, data[rng() % data.size()], &g);
        }
        report.loss.push_back(loss / static_cast<double>(o.batch));
        auto gs = parameter_spans(g, biases);
        double sq = 0.0;
        for (auto s : gs)
            for (double& v : s) {
                v /= static_cast<double>(o.batch);
                sq += v * v;
            }
        const double gnorm = std::sqrt(sq);
        const double clip = o.clip_norm > 0.0 && gnorm > o.clip_norm ? o.clip_norm / gnorm : 1.0;
        const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(step));
        for (std::size_t k = 0; k < p.size(); ++k) {
            for (std::size_t i = 0; i < p[k].size(); ++i) {
                const double gi = gs[k][i] * clip;
                s1[k][i] = o.beta1 * s1[k][i] + (1.0 - o.beta1) * gi;
                s2[k][i] = o.beta2 * s2[k][i] + (1.0 - o.beta2) * gi * gi;
                p[k][i] -= o.learning_rate * (s1[k][i] / c1) / (std::sqrt(s2[k][i] / c2) + o.adam_epsilon);
            }
        }
    }
    return report;
}

double target_accuracy(const Model& model, const std::vector<TrainExample>& data) {
    std::size_t hit = 0, total = 0;
    for (const auto& ex : data) {
        const ForwardResult f = model_forward(ex.tokens, model);
        for (const auto& [pos, tok] : ex.targets) {
            const auto row = f.logits.row(pos);
            hit += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == tok ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Tasks

namespace {

ModelConfig toy_config(std::size_t vocab, std::size_t max_len) {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.d_head = 8;
    c.d_ff = 32;
    c.max_len = max_len;
    c.vocab = vocab;
    c.mask_token = 0;
    return c;
}

} // namespace

ToyTask classification_task(std::size_t n_examples, std::size_t seq_len, std::uint64_t seed) {
    using V = ClassifierVocab;
    if (seq_len < 2) throw ValueError("classification sequences need at least two positions");
    ToyTask task;
    task.config = toy_config(V::size, seq_len);
    task.config.norm_placement = NormPlacement::post_ln;
    task.config.causal = false;
    std::mt19937_64 rng(seed);
    for (std::size_t e = 0; e < n_examples; ++e) {
        const bool positive = e % 2 == 0;
        TokenSequence t;
        t.ids.push_back(V::cls);
        for (std::size_t l = 1; l < seq_len; ++l)
            t.ids.push_back(V::first_neutral + static_cast<TokenId>(rng() % V::neutral));
        const std::size_t at = 1 + rng() % (seq_len - 1);
        const TokenId base = positive ? V::first_pos_keyword : V::first_neg_keyword;
        t.ids[at] = base + static_cast<TokenId>(rng() % V::keywords_per_class);
        const TokenId label = positive ? V::pos : V::neg;
        task.train.push_back({t, {{0, label}}});
        DatasetRecord r;
        r.tokens = t;
        r.label = label;
        task.records.push_back(std::move(r));
    }
    return task;
}

ToyTask relation_task(std::size_t n_examples, std::size_t shots, std::uint64_t seed) {
    using V = RelationVocab;
    if (shots == 0) throw ValueError("relation prompts need at least one shot");
    ToyTask task;
    task.config = toy_config(V::size, 3 * shots + 2);
    task.config.norm_placement = NormPlacement::pre_ln;
    task.config.causal = true;
    std::mt19937_64 rng(seed);
    std::vector<std::vector<TokenId>> maps(V::relations);
    for (auto& m : maps) {
        m.resize(V::entities);
        for (std::size_t i = 0; i < V::entities; ++i) m[i] = V::first_entity + static_cast<TokenId>(i);
        for (std::size_t i = V::entities; i > 1; --i) std::swap(m[i - 1], m[rng() % i]);
    }
    for (std::size_t e = 0; e < n_examples; ++e) {
        const std::size_t r = rng() % V::relations;
        const TokenId rel = V::first_relation + static_cast<TokenId>(r);
        TrainExample ex;
        for (std::size_t k = 0; k < shots; ++k) {
            const std::size_t s = rng() % V::entities;
            ex.tokens.ids.push_back(rel);
            ex.tokens.ids.push_back(V::first_entity + static_cast<TokenId>(s));
            ex.targets.emplace_back(ex.tokens.ids.size() - 1, maps[r][s]);
            if (k + 1 < shots) ex.tokens.ids.push_back(maps[r][s]);
        }
        task.train.push_back(std::move(ex));
    }
    for (std::size_t r = 0; r < V::relations; ++r) {
        for (std::size_t s = 0; s < V::entities; ++s) {
            DatasetRecord rec;
            rec.tokens.ids = {V::first_relation + static_cast<TokenId>(r), V::first_entity + static_cast<TokenId>(s)};
            rec.relation = "r" + std::to_string(r);
            rec.subject_span = std::pair<std::size_t, std::size_t>{1, 2};
            rec.object_token = maps[r][s];
            task.records.push_back(std::move(rec));
        }
    }
    return task;
}

} // namespace tensorlens
