#include "tensorlens/model.hpp"

#include "tensorlens/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace tensorlens {

std::string_view to_string(NormPlacement p) {
    return p == NormPlacement::post_ln ? "post_ln" : "pre_ln";
}

std::string_view to_string(Activation a) {
    switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
    case Activation::silu: return "silu";
    }
    return "gelu";
}

NormPlacement parse_norm_placement(std::string_view s) {
    if (s == "post_ln") return NormPlacement::post_ln;
    if (s == "pre_ln") return NormPlacement::pre_ln;
    throw ValueError("unknown norm placement '" + std::string(s) + "'");
}

Activation parse_activation(std::string_view s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    if (s == "silu") return Activation::silu;
    throw ValueError("unknown activation '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
    if (n_heads == 0 || d_head == 0) throw ValueError("n_heads and d_head must be positive");
    if (d_model != n_heads * d_head) {
        throw ValueError("d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
                         std::to_string(n_heads) + "*" + std::to_string(d_head) + ")");
    }
    if (d_model < 2) throw ValueError("d_model must be at least 2 for LayerNorm");
    if (d_ff < 1) throw ValueError("d_ff must be positive");
    if (max_len < 1) throw ValueError("max_len must be positive");
    if (vocab < 1) throw ValueError("vocab must be positive");
    if (!(ln_epsilon > 0.0) || !std::isfinite(ln_epsilon)) throw ValueError("ln_epsilon must be > 0");
    if (mask_token && *mask_token >= vocab) throw ValueError("mask_token outside vocabulary");
}

namespace {

void check_matrix(const DenseMatrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeMismatchError(name + ": expected " + std::to_string(rows) + "x" +
                                 std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                                 std::to_string(m.cols()));
    }
    if (!m.all_finite()) throw ValueError(name + ": non-finite entries");
}

void check_vector(const Vector& v, std::size_t n, const std::string& name) {
    if (v.size() != n) {
        throw ShapeMismatchError(name + ": expected length " + std::to_string(n) + ", got " +
                                 std::to_string(v.size()));
    }
    if (!std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); })) {
        throw ValueError(name + ": non-finite entries");
    }
}

} // namespace

void ModelWeights::validate(const ModelConfig& c) const {
    c.validate();
    const std::size_t D = c.d_model;
    if (layers.size() != c.n_layers) {
        throw ShapeMismatchError("expected " + std::to_string(c.n_layers) + " layers, got " +
                                 std::to_string(layers.size()));
    }
    for (std::size_t n = 0; n < layers.size(); ++n) {
        const auto& l = layers[n];
        const std::string p = "layers." + std::to_string(n) + ".";
        check_matrix(l.w_q, D, D, p + "attn.w_q");
        check_matrix(l.w_k, D, D, p + "attn.w_k");
        check_matrix(l.w_v, D, D, p + "attn.w_v");
        check_matrix(l.w_o, D, D, p + "attn.w_o");
        check_vector(l.b_q, D, p + "attn.b_q");
        check_vector(l.b_k, D, p + "attn.b_k");
        check_vector(l.b_v, D, p + "attn.b_v");
        check_vector(l.b_o, D, p + "attn.b_o");
        check_matrix(l.w_1, D, c.d_ff, p + "ffn.w_1");
        check_vector(l.b_1, c.d_ff, p + "ffn.b_1");
        check_matrix(l.w_2, c.d_ff, D, p + "ffn.w_2");
        check_vector(l.b_2, D, p + "ffn.b_2");
        check_vector(l.ln1.gamma, D, p + "ln1.gamma");
        check_vector(l.ln1.beta, D, p + "ln1.beta");
        check_vector(l.ln2.gamma, D, p + "ln2.gamma");
        check_vector(l.ln2.beta, D, p + "ln2.beta");
    }
    check_matrix(tok_embed, c.vocab, D, "tok_embed");
    check_matrix(pos_embed, c.max_len, D, "pos_embed");
    check_matrix(unembed, D, c.vocab, "unembed");
    if (c.final_norm) {
        check_vector(final_norm.gamma, D, "final_norm.gamma");
        check_vector(final_norm.beta, D, "final_norm.beta");
    }
}

const DenseMatrix& last_hidden(const ForwardTrace& trace, HiddenState which) {
    return which == HiddenState::after_final_norm ? trace.final_hidden : trace.last_block_output;
}

void validate_tokens(const TokenSequence& tokens, const ModelConfig& config) {
    if (tokens.ids.empty()) throw ValueError("empty token sequence");
    if (tokens.size() > config.max_len) {
        throw IndexError("sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                         std::to_string(config.max_len));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens.ids[i] >= config.vocab) {
            throw IndexError("token id " + std::to_string(tokens.ids[i]) + " at position " +
                             std::to_string(i) + " outside vocabulary of " +
                             std::to_string(config.vocab));
        }
    }
}

DenseMatrix embed(const TokenSequence& tokens, const Model& model) {
    validate_tokens(tokens, model.config);
    const std::size_t L = tokens.size();
    const std::size_t D = model.config.d_model;
    DenseMatrix x(L, D);
    for (std::size_t l = 0; l < L; ++l) {
        const auto e = model.weights.tok_embed.row(tokens.ids[l]);
        const auto p = model.weights.pos_embed.row(l);
        for (std::size_t d = 0; d < D; ++d) x(l, d) = e[d] + p[d];
    }
    return x;
}

namespace {

// y = gamma (.) (x - mean) / sigma (+ beta). Shared by the real and the
// frozen LayerNorm so both run identical arithmetic.
DenseMatrix normalize_rows(const DenseMatrix& x, std::span<const double> sigma,
                           const LayerNormWeights& norm, bool with_beta) {
    const std::size_t D = x.cols();
    DenseMatrix y(x.rows(), D);
    for (std::size_t l = 0; l < x.rows(); ++l) {
        const auto row = x.row(l);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(D);
        for (std::size_t d = 0; d < D; ++d) {
            double v = (row[d] - mean) / sigma[l] * norm.gamma[d];
            if (with_beta) v += norm.beta[d];
            y(l, d) = v;
        }
    }
    return y;
}

void add_row_bias(DenseMatrix& m, std::span<const double> b) {
    for (std::size_t l = 0; l < m.rows(); ++l) {
        auto row = m.row(l);
        for (std::size_t d = 0; d < row.size(); ++d) row[d] += b[d];
    }
}

DenseMatrix head_columns(const DenseMatrix& w, std::size_t h, std::size_t dh) {
    DenseMatrix out(w.rows(), dh);
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < dh; ++c) out(r, c) = w(r, h * dh + c);
    return out;
}

DenseMatrix head_rows(const DenseMatrix& w, std::size_t h, std::size_t dh) {
    DenseMatrix out(dh, w.cols());
    for (std::size_t r = 0; r < dh; ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) out(r, c) = w(h * dh + r, c);
    return out;
}

std::span<const double> head_slice(const Vector& b, std::size_t h, std::size_t dh) {
    return std::span<const double>(b).subspan(h * dh, dh);
}

// sum_h A_h (X W_v,h [+ b_v,h]) W_o,h [+ b_o]
DenseMatrix value_path(const DenseMatrix& x, const std::vector<DenseMatrix>& attention,
                       const LayerWeights& layer, const ModelConfig& config, bool include_bias) {
    const std::size_t dh = config.d_head;
    DenseMatrix out(x.rows(), config.d_model);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
        DenseMatrix v = matmul(x, head_columns(layer.w_v, h, dh));
        if (include_bias) add_row_bias(v, head_slice(layer.b_v, h, dh));
        out += matmul(matmul(attention[h], v), head_rows(layer.w_o, h, dh));
    }
    if (include_bias) add_row_bias(out, layer.b_o);
    return out;
}

// (psi (.) (X M1 [+ b1])) M2 [+ b2]
DenseMatrix frozen_ffn(const DenseMatrix& x, const DenseMatrix& psi, const LayerWeights& layer,
                       bool include_bias) {
    DenseMatrix z = matmul(x, layer.w_1);
    if (include_bias) add_row_bias(z, layer.b_1);
    DenseMatrix out = matmul(hadamard(psi, z), layer.w_2);
    if (include_bias) add_row_bias(out, layer.b_2);
    return out;
}

std::vector<DenseMatrix> attention_weights(const DenseMatrix& x, const LayerWeights& layer,
                                           const ModelConfig& config) {
    const std::size_t L = x.rows();
    const std::size_t dh = config.d_head;
    const double scale = config.attn_scale ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;
    std::vector<DenseMatrix> result;
    result.reserve(config.n_heads);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
        DenseMatrix q = matmul(x, head_columns(layer.w_q, h, dh));
        DenseMatrix k = matmul(x, head_columns(layer.w_k, h, dh));
        add_row_bias(q, head_slice(layer.b_q, h, dh));
        add_row_bias(k, head_slice(layer.b_k, h, dh));
        DenseMatrix a(L, L);
        for (std::size_t i = 0; i < L; ++i) {
            const std::size_t visible = config.causal ? i + 1 : L;
            double row_max = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < visible; ++j) {
                const double s = dot(q.row(i), k.row(j)) * scale;
                if (std::isnan(s)) throw ValueError("NaN in attention logits");
                a(i, j) = s;
                row_max = std::max(row_max, s);
            }
            if (!std::isfinite(row_max)) throw ValueError("non-finite attention logits");
            double total = 0.0;
            for (std::size_t j = 0; j < visible; ++j) {
                a(i, j) = std::exp(a(i, j) - row_max);
                total += a(i, j);
            }
            for (std::size_t j = 0; j < visible; ++j) a(i, j) /= total;
            // masked entries stay exactly zero
        }
        result.push_back(std::move(a));
    }
    return result;
}

constexpr double kRatioFloor = 1e-12;

} // namespace

AttentionResult attention_forward(const DenseMatrix& x, const LayerWeights& layer,
                                  const ModelConfig& config) {
    if (x.cols() != config.d_model) throw DimensionError("attention_forward: width mismatch");
    AttentionResult r;
    r.attention = attention_weights(x, layer, config);
    r.output = value_path(x, r.attention, layer, config, true);
    return r;
}

LayerNormResult layernorm_forward(const DenseMatrix& x, const LayerNormWeights& norm, double epsilon) {
    const std::size_t D = x.cols();
    if (D < 2) throw DimensionError("layernorm_forward needs D >= 2");
    if (norm.gamma.size() != D || norm.beta.size() != D) throw DimensionError("layernorm_forward: gamma/beta width");
    LayerNormResult r;
    r.sigma.resize(x.rows());
    r.variance.resize(x.rows());
    for (std::size_t l = 0; l < x.rows(); ++l) {
        const auto row = x.row(l);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(D);
        r.variance[l] = var;
        r.sigma[l] = std::sqrt(var + epsilon);
    }
    r.output = normalize_rows(x, r.sigma, norm, true);
    return r;
}

double activate(Activation act, double z) {
    switch (act) {
    case Activation::gelu: return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2));
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::silu: return z / (1.0 + std::exp(-z));
    }
    return z;
}

double activation_ratio(Activation act, double z) {
    if (std::abs(z) < kRatioFloor) return act == Activation::relu ? 0.0 : 0.5;
    return activate(act, z) / z;
}

FfnResult ffn_forward(const DenseMatrix& x, const LayerWeights& layer, const ModelConfig& config) {
    if (x.cols() != config.d_model) throw DimensionError("ffn_forward: width mismatch");
    FfnResult r;
    r.pre_activation = matmul(x, layer.w_1);
    add_row_bias(r.pre_activation, layer.b_1);
    DenseMatrix h(r.pre_activation.rows(), r.pre_activation.cols());
    r.psi = DenseMatrix(h.rows(), h.cols());
    for (std::size_t i = 0; i < h.size(); ++i) {
        const double z = r.pre_activation.data()[i];
        h.data()[i] = activate(config.activation, z);
        r.psi.data()[i] = activation_ratio(config.activation, z);
    }
    r.output = matmul(h, layer.w_2);
    add_row_bias(r.output, layer.b_2);
    return r;
}

DenseMatrix block_forward(const DenseMatrix& x, const LayerWeights& layer, const ModelConfig& config,
                          LayerTrace* trace) {
    LayerTrace local;
    LayerTrace& t = trace ? *trace : local;
    t.input = x;
    if (config.norm_placement == NormPlacement::post_ln) {
        t.attn_input = x;
        auto attn = attention_forward(x, layer, config);
        t.attention = std::move(attn.attention);
        t.attn_output = attn.output;
        auto ln1 = layernorm_forward(x + attn.output, layer.ln1, config.ln_epsilon);
        t.sigma1 = std::move(ln1.sigma);
        t.ln1_input_variance = std::move(ln1.variance);
        t.mid = std::move(ln1.output);
        t.ffn_input = t.mid;
        auto ffn = ffn_forward(t.mid, layer, config);
        t.psi = std::move(ffn.psi);
        t.ffn_pre_activation = std::move(ffn.pre_activation);
        t.ffn_output = ffn.output;
        auto ln2 = layernorm_forward(t.mid + ffn.output, layer.ln2, config.ln_epsilon);
        t.sigma2 = std::move(ln2.sigma);
        t.ln2_input_variance = std::move(ln2.variance);
        return std::move(ln2.output);
    }
    auto ln1 = layernorm_forward(x, layer.ln1, config.ln_epsilon);
    t.sigma1 = std::move(ln1.sigma);
    t.ln1_input_variance = std::move(ln1.variance);
    t.attn_input = std::move(ln1.output);
    auto attn = attention_forward(t.attn_input, layer, config);
    t.attention = std::move(attn.attention);
    t.attn_output = attn.output;
    t.mid = x + attn.output;
    auto ln2 = layernorm_forward(t.mid, layer.ln2, config.ln_epsilon);
    t.sigma2 = std::move(ln2.sigma);
    t.ln2_input_variance = std::move(ln2.variance);
    t.ffn_input = std::move(ln2.output);
    auto ffn = ffn_forward(t.ffn_input, layer, config);
    t.psi = std::move(ffn.psi);
    t.ffn_pre_activation = std::move(ffn.pre_activation);
    t.ffn_output = ffn.output;
    return t.mid + ffn.output;
}

ForwardResult model_forward_embedded(const DenseMatrix& x0, const Model& model) {
    const auto& c = model.config;
    if (x0.cols() != c.d_model) throw DimensionError("model_forward: input width mismatch");
    if (x0.rows() == 0 || x0.rows() > c.max_len) throw IndexError("model_forward: bad sequence length");
    ForwardResult r;
    auto& t = r.trace;
    t.seq_len = x0.rows();
    t.embedded = x0;
    t.layers.resize(c.n_layers);
    DenseMatrix x = x0;
    for (std::size_t n = 0; n < c.n_layers; ++n) {
        x = block_forward(x, model.weights.layers[n], c, &t.layers[n]);
    }
    t.last_block_output = x;
    if (c.final_norm) {
        auto fn = layernorm_forward(x, model.weights.final_norm, c.ln_epsilon);
        t.final_sigma = std::move(fn.sigma);
        t.final_input_variance = std::move(fn.variance);
        t.final_hidden = std::move(fn.output);
    } else {
        t.final_hidden = x;
    }
    t.logits = matmul(t.final_hidden, model.weights.unembed);
    r.logits = t.logits;
    return r;
}

ForwardResult model_forward(const TokenSequence& tokens, const Model& model) {
    ForwardResult r = model_forward_embedded(embed(tokens, model), model);
    r.trace.tokens = tokens.ids;
    return r;
}

const DenseMatrix& range_input(const ForwardTrace& trace, LayerRange range) {
    if (range.begin == trace.layers.size()) return trace.last_block_output;
    return trace.layers.at(range.begin).input;
}

const DenseMatrix& range_output(const ForwardTrace& trace, const ModelConfig& config, LayerRange range) {
    if (range.end == config.n_layers) return trace.final_hidden;
    return trace.layers.at(range.end).input;
}

namespace {

void check_range(const ForwardTrace& trace, const ModelConfig& config, LayerRange range) {
    if (range.begin > range.end || range.end > config.n_layers) {
        throw IndexError("layer range [" + std::to_string(range.begin) + ", " +
                         std::to_string(range.end) + ") invalid for " +
                         std::to_string(config.n_layers) + " layers");
    }
    if (trace.layers.size() != config.n_layers) {
        throw TraceMismatchError("trace has " + std::to_string(trace.layers.size()) +
                                 " layers, model has " + std::to_string(config.n_layers));
    }
    if (config.final_norm && trace.final_sigma.size() != trace.seq_len) {
        throw TraceMismatchError("trace lacks final-norm statistics");
    }
}

} // namespace

DenseMatrix patched_forward(const ForwardTrace& trace, const DenseMatrix& v, const Model& model,
                            bool include_bias, std::optional<LayerRange> range_opt) {
    const auto& c = model.config;
    const LayerRange range = range_opt.value_or(LayerRange::all(c));
    check_range(trace, c, range);
    if (v.rows() != trace.seq_len || v.cols() != c.d_model) {
        throw TraceMismatchError("patched_forward: input is " + std::to_string(v.rows()) + "x" +
                                 std::to_string(v.cols()) + ", trace expects " +
                                 std::to_string(trace.seq_len) + "x" + std::to_string(c.d_model));
    }
    DenseMatrix x = v;
    for (std::size_t n = range.begin; n < range.end; ++n) {
        const auto& lw = model.weights.layers[n];
        const auto& lt = trace.layers[n];
        if (lt.attention.size() != c.n_heads || lt.psi.cols() != c.d_ff) {
            throw TraceMismatchError("trace layer " + std::to_string(n) + " does not match config");
        }
        if (c.norm_placement == NormPlacement::post_ln) {
            DenseMatrix r1 = x + value_path(x, lt.attention, lw, c, include_bias);
            DenseMatrix z = normalize_rows(r1, lt.sigma1, lw.ln1, include_bias);
            DenseMatrix r2 = z + frozen_ffn(z, lt.psi, lw, include_bias);
            x = normalize_rows(r2, lt.sigma2, lw.ln2, include_bias);
        } else {
            DenseMatrix n1 = normalize_rows(x, lt.sigma1, lw.ln1, include_bias);
            DenseMatrix y = x + value_path(n1, lt.attention, lw, c, include_bias);
            DenseMatrix n2 = normalize_rows(y, lt.sigma2, lw.ln2, include_bias);
            x = y + frozen_ffn(n2, lt.psi, lw, include_bias);
        }
    }
    if (c.final_norm && range.end == c.n_layers) {
        x = normalize_rows(x, trace.final_sigma, model.weights.final_norm, include_bias);
    }
    return x;
}

ModelWeights random_weights(const ModelConfig& c, std::uint64_t seed, double scale) {
    c.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto matrix = [&](std::size_t r, std::size_t cols, double sd) {
        DenseMatrix m(r, cols);
        for (auto& v : m.data()) v = sd * normal(rng);
        return m;
    };
    auto vec = [&](std::size_t n, double mean, double sd) {
        Vector v(n);
        for (auto& x : v) x = mean + sd * normal(rng);
        return v;
    };
    const double bias_sd = c.use_biases ? 0.1 : 0.0;
    const std::size_t D = c.d_model;
    const double proj_sd = scale / std::sqrt(static_cast<double>(D));
    ModelWeights w;
    w.layers.resize(c.n_layers);
    for (auto& l : w.layers) {
        l.w_q = matrix(D, D, proj_sd);
        l.w_k = matrix(D, D, proj_sd);
        l.w_v = matrix(D, D, proj_sd);
        l.w_o = matrix(D, D, proj_sd);
        l.b_q = vec(D, 0.0, bias_sd);
        l.b_k = vec(D, 0.0, bias_sd);
        l.b_v = vec(D, 0.0, bias_sd);
        l.b_o = vec(D, 0.0, bias_sd);
        l.w_1 = matrix(D, c.d_ff, proj_sd);
        l.b_1 = vec(c.d_ff, 0.0, bias_sd);
        l.w_2 = matrix(c.d_ff, D, scale / std::sqrt(static_cast<double>(c.d_ff)));
        l.b_2 = vec(D, 0.0, bias_sd);
        l.ln1 = {vec(D, 1.0, 0.1), vec(D, 0.0, bias_sd)};
        l.ln2 = {vec(D, 1.0, 0.1), vec(D, 0.0, bias_sd)};
    }
    w.tok_embed = matrix(c.vocab, D, 1.0);
    w.pos_embed = matrix(c.max_len, D, 0.5);
    w.unembed = matrix(D, c.vocab, 1.0 / std::sqrt(static_cast<double>(D)));
    if (c.final_norm) w.final_norm = {vec(D, 1.0, 0.1), vec(D, 0.0, bias_sd)};
    return w;
}

Model random_model(const ModelConfig& config, std::uint64_t seed, double scale) {
    return Model{config, random_weights(config, seed, scale)};
}

} // namespace tensorlens
