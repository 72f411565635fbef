#include "tensorlens/tensorize.hpp"

#include "tensorlens/error.hpp"
#include "tensorlens/parallel.hpp"

#include <string>

namespace tensorlens {

std::string_view to_string(BiasMode mode) {
    return mode == BiasMode::with_biases ? "with_biases" : "bias_free";
}

namespace {

Vector broadcast_bias(std::span<const double> row_bias, std::size_t seq_len) {
    Vector v(seq_len * row_bias.size());
    for (std::size_t d = 0; d < row_bias.size(); ++d)
        for (std::size_t l = 0; l < seq_len; ++l) v[flat_index(l, d, seq_len)] = row_bias[d];
    return v;
}

void check_layer(const ForwardTrace& trace, std::size_t layer, const Model& model) {
    if (layer >= model.config.n_layers || layer >= trace.layers.size()) {
        throw IndexError("layer " + std::to_string(layer) + " not covered by model/trace");
    }
}

void check_dense_cap(std::size_t dim, std::size_t cap) {
    const double entries = static_cast<double>(dim) * static_cast<double>(dim);
    if (entries > static_cast<double>(cap)) {
        throw MemoryCapError("dense operator of dim " + std::to_string(dim) + " needs " +
                             std::to_string(static_cast<unsigned long long>(entries)) +
                             " entries, above the cap of " + std::to_string(cap) +
                             "; use output_slice or patched_forward instead");
    }
}

} // namespace

SublayerTensor attention_tensor(const ForwardTrace& trace, std::size_t layer, const Model& model,
                                BiasMode mode) {
    check_layer(trace, layer, model);
    const auto& c = model.config;
    const auto& lw = model.weights.layers[layer];
    const auto& lt = trace.layers[layer];
    const std::size_t L = trace.seq_len;
    const std::size_t D = c.d_model;
    const std::size_t dh = c.d_head;
    if (lt.attention.size() != c.n_heads) {
        throw DimensionError("trace has " + std::to_string(lt.attention.size()) +
                             " heads, config expects " + std::to_string(c.n_heads));
    }
    if (lw.w_v.cols() != c.n_heads * dh || lw.w_o.rows() != c.n_heads * dh) {
        throw DimensionError("value/output projections do not match the head layout");
    }
    DenseMatrix matrix(L * D, L * D);
    Vector head_bias(D, 0.0);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        // W_vo = W_v,h W_o,h  (D x D)
        DenseMatrix w_vo(D, D);
        for (std::size_t a = 0; a < D; ++a)
            for (std::size_t b = 0; b < D; ++b) {
                double s = 0.0;
                for (std::size_t k = 0; k < dh; ++k) s += lw.w_v(a, h * dh + k) * lw.w_o(h * dh + k, b);
                w_vo(a, b) = s;
            }
        matrix += kron(w_vo.transpose(), lt.attention[h]);
        for (std::size_t b = 0; b < D; ++b) {
            double s = 0.0;
            for (std::size_t k = 0; k < dh; ++k) s += lw.b_v[h * dh + k] * lw.w_o(h * dh + k, b);
            head_bias[b] += s;
        }
    }
    Vector bias(L * D, 0.0);
    if (mode == BiasMode::with_biases) {
        for (std::size_t b = 0; b < D; ++b) head_bias[b] += lw.b_o[b];
        bias = broadcast_bias(head_bias, L);
    }
    return {SublayerKind::attention, AffineOperator(std::move(matrix), std::move(bias)), layer, false};
}

SublayerTensor layernorm_tensor(std::span<const double> sigma, const LayerNormWeights& norm,
                                BiasMode mode, std::size_t layer_index) {
    const std::size_t L = sigma.size();
    const std::size_t D = norm.gamma.size();
    if (norm.beta.size() != D) throw DimensionError("layernorm_tensor: beta width");
    Vector inv_sigma(L);
    for (std::size_t l = 0; l < L; ++l) {
        if (!(sigma[l] > 0.0)) {
            throw ValueError("layernorm_tensor: sigma must be positive (position " +
                             std::to_string(l) + ")");
        }
        inv_sigma[l] = 1.0 / sigma[l];
    }
    // (I - 11^T/D) diag(gamma)
    DenseMatrix centered(D, D);
    for (std::size_t a = 0; a < D; ++a)
        for (std::size_t b = 0; b < D; ++b)
            centered(a, b) = ((a == b ? 1.0 : 0.0) - 1.0 / static_cast<double>(D)) * norm.gamma[b];
    DenseMatrix matrix = kron(centered.transpose(), DenseMatrix::diagonal(inv_sigma));
    Vector bias = mode == BiasMode::with_biases ? broadcast_bias(norm.beta, L) : Vector(L * D, 0.0);
    return {SublayerKind::layernorm, AffineOperator(std::move(matrix), std::move(bias)), layer_index, false};
}

SublayerTensor ffn_tensor(const DenseMatrix& psi, const LayerWeights& layer, BiasMode mode,
                          std::size_t layer_index) {
    const std::size_t L = psi.rows();
    const std::size_t F = psi.cols();
    const std::size_t D = layer.w_1.rows();
    if (layer.w_1.cols() != F || layer.w_2.rows() != F || layer.w_2.cols() != D) {
        throw DimensionError("ffn_tensor: psi is " + std::to_string(L) + "x" + std::to_string(F) +
                             " but M1 is " + std::to_string(layer.w_1.rows()) + "x" +
                             std::to_string(layer.w_1.cols()));
    }
    // Entry [f(i,a), f(j,b)] = [i == j] * sum_k M1[b,k] psi[i,k] M2[k,a]: the
    // operator is block diagonal in the token axis.
    DenseMatrix matrix(L * D, L * D);
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t a = 0; a < D; ++a) {
            for (std::size_t b = 0; b < D; ++b) {
                double s = 0.0;
                for (std::size_t k = 0; k < F; ++k) s += layer.w_1(b, k) * psi(i, k) * layer.w_2(k, a);
                matrix(flat_index(i, a, L), flat_index(i, b, L)) = s;
            }
        }
    }
    Vector bias(L * D, 0.0);
    if (mode == BiasMode::with_biases) {
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t a = 0; a < D; ++a) {
                double s = layer.b_2[a];
                for (std::size_t k = 0; k < F; ++k) s += psi(i, k) * layer.b_1[k] * layer.w_2(k, a);
                bias[flat_index(i, a, L)] = s;
            }
    }
    return {SublayerKind::ffn, AffineOperator(std::move(matrix), std::move(bias)), layer_index, false};
}

SublayerTensor residual_wrap(SublayerTensor t) {
    if (t.residual_wrapped) throw ValueError("residual_wrap: sublayer already wrapped");
    for (std::size_t i = 0; i < t.op.dim(); ++i) t.op.matrix(i, i) += 1.0;
    t.residual_wrapped = true;
    return t;
}

BlockTensor block_tensor(const ForwardTrace& trace, std::size_t layer, const Model& model, BiasMode mode) {
    check_layer(trace, layer, model);
    const auto& lw = model.weights.layers[layer];
    const auto& lt = trace.layers[layer];
    if (lt.sigma1.size() != trace.seq_len || lt.sigma2.size() != trace.seq_len) {
        throw TraceMismatchError("trace layer " + std::to_string(layer) + " lacks LayerNorm statistics");
    }
    const auto attn = attention_tensor(trace, layer, model, mode);
    const auto ln1 = layernorm_tensor(lt.sigma1, lw.ln1, mode, layer);
    const auto ffn = ffn_tensor(lt.psi, lw, mode, layer);
    const auto ln2 = layernorm_tensor(lt.sigma2, lw.ln2, mode, layer);

    BlockTensor block;
    block.placement = model.config.norm_placement;
    block.layer_index = layer;
    if (block.placement == NormPlacement::post_ln) {
        // L2 (M + I) L1 (A + I)
        const auto first = compose(ln1.op, residual_wrap(attn).op);
        const auto second = compose(ln2.op, residual_wrap(ffn).op);
        block.op = compose(second, first);
    } else {
        // (I + M L2)(I + A L1)
        SublayerTensor attn_branch{SublayerKind::composite, compose(attn.op, ln1.op), layer, false};
        SublayerTensor ffn_branch{SublayerKind::composite, compose(ffn.op, ln2.op), layer, false};
        block.op = compose(residual_wrap(std::move(ffn_branch)).op,
                           residual_wrap(std::move(attn_branch)).op);
    }
    return block;
}

namespace {

LayerRange resolve_range(const Model& model, const ForwardTrace& trace, std::optional<LayerRange> range) {
    const LayerRange r = range.value_or(LayerRange::all(model.config));
    if (r.begin > r.end || r.end > model.config.n_layers) {
        throw IndexError("layer range [" + std::to_string(r.begin) + ", " + std::to_string(r.end) +
                         ") invalid for " + std::to_string(model.config.n_layers) + " layers");
    }
    if (trace.layers.size() != model.config.n_layers) {
        throw TraceMismatchError("trace does not cover the model's layers");
    }
    return r;
}

bool range_has_final_norm(const Model& model, LayerRange r) {
    return model.config.final_norm && r.end == model.config.n_layers;
}

} // namespace

ModelTensor full_tensor(const ForwardTrace& trace, const Model& model, BiasMode mode,
                        FullTensorOptions options) {
    const LayerRange range = resolve_range(model, trace, options.range);
    const std::size_t L = trace.seq_len;
    const std::size_t D = model.config.d_model;
    check_dense_cap(L * D, options.entry_cap);
    AffineOperator op = AffineOperator::identity(L * D);
    for (std::size_t n = range.begin; n < range.end; ++n) {
        op = compose(block_tensor(trace, n, model, mode).op, op);
    }
    if (range_has_final_norm(model, range)) {
        op = compose(layernorm_tensor(trace.final_sigma, model.weights.final_norm, mode).op, op);
    }
    return {std::move(op), L, D, mode, range};
}

Vector bias_by_recursion(const ForwardTrace& trace, const Model& model, std::optional<LayerRange> range_opt) {
    const LayerRange range = resolve_range(model, trace, range_opt);
    const std::size_t dim = trace.seq_len * model.config.d_model;
    // b_full = b_N + T_N (b_{N-1} + T_{N-1}(...))
    Vector bias(dim, 0.0);
    for (std::size_t n = range.begin; n < range.end; ++n) {
        const auto block = block_tensor(trace, n, model, BiasMode::with_biases);
        Vector next = matvec(block.op.matrix, bias);
        for (std::size_t i = 0; i < dim; ++i) next[i] += block.op.bias[i];
        bias = std::move(next);
    }
    if (range_has_final_norm(model, range)) {
        const auto fn = layernorm_tensor(trace.final_sigma, model.weights.final_norm, BiasMode::with_biases);
        Vector next = matvec(fn.op.matrix, bias);
        for (std::size_t i = 0; i < dim; ++i) next[i] += fn.op.bias[i];
        bias = std::move(next);
    }
    return bias;
}

DenseMatrix tensor_column(const ForwardTrace& trace, const Model& model, std::size_t position,
                          std::size_t channel, std::optional<LayerRange> range) {
    if (position >= trace.seq_len || channel >= model.config.d_model) {
        throw IndexError("tensor_column: (" + std::to_string(position) + ", " + std::to_string(channel) +
                         ") outside " + std::to_string(trace.seq_len) + "x" +
                         std::to_string(model.config.d_model));
    }
    DenseMatrix basis(trace.seq_len, model.config.d_model);
    basis(position, channel) = 1.0;
    return patched_forward(trace, basis, model, false, range);
}

DenseMatrix affine_bias(const ForwardTrace& trace, const Model& model, BiasMode mode,
                        std::optional<LayerRange> range) {
    DenseMatrix zero(trace.seq_len, model.config.d_model);
    if (mode == BiasMode::bias_free) return zero;
    return patched_forward(trace, zero, model, true, range);
}

ModelTensor materialize_by_columns(const ForwardTrace& trace, const Model& model, BiasMode mode,
                                   ColumnOptions options) {
    const LayerRange range = resolve_range(model, trace, options.range);
    const std::size_t L = trace.seq_len;
    const std::size_t D = model.config.d_model;
    check_dense_cap(L * D, options.entry_cap);
    DenseMatrix matrix(L * D, L * D);
    parallel_for(L * D, options.threads, [&](std::size_t col) {
        const std::size_t l = col % L;
        const std::size_t d = col / L;
        const DenseMatrix out = tensor_column(trace, model, l, d, range);
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t a = 0; a < D; ++a) matrix(flat_index(i, a, L), col) = out(i, a);
    });
    Vector bias = vec_cols(affine_bias(trace, model, mode, range));
    return {AffineOperator(std::move(matrix), std::move(bias)), L, D, mode, range};
}

OutputSlice::OutputSlice(std::size_t position, std::size_t seq_len, std::size_t width)
    : position_(position), seq_len_(seq_len), width_(width),
      data_(width * seq_len * width, 0.0), bias_(width, 0.0) {}

DenseMatrix OutputSlice::block(std::size_t j) const {
    DenseMatrix m(width_, width_);
    for (std::size_t a = 0; a < width_; ++a)
        for (std::size_t b = 0; b < width_; ++b) m(a, b) = at(a, j, b);
    return m;
}

Vector OutputSlice::contract(const DenseMatrix& x) const {
    if (x.rows() != seq_len_ || x.cols() != width_) throw DimensionError("OutputSlice::contract: shape");
    Vector out = bias_;
    for (std::size_t a = 0; a < width_; ++a) {
        double s = 0.0;
        for (std::size_t j = 0; j < seq_len_; ++j)
            for (std::size_t b = 0; b < width_; ++b) s += at(a, j, b) * x(j, b);
        out[a] += s;
    }
    return out;
}

OutputSlice output_slice(const ForwardTrace& trace, const Model& model, std::size_t position,
                         BiasMode mode, ColumnOptions options) {
    const LayerRange range = resolve_range(model, trace, options.range);
    const std::size_t L = trace.seq_len;
    const std::size_t D = model.config.d_model;
    if (position >= L) {
        throw IndexError("output_slice: position " + std::to_string(position) + " outside length " +
                         std::to_string(L));
    }
    OutputSlice slice(position, L, D);
    parallel_for(L * D, options.threads, [&](std::size_t col) {
        const std::size_t j = col / D;
        const std::size_t b = col % D;
        const DenseMatrix out = tensor_column(trace, model, j, b, range);
        for (std::size_t a = 0; a < D; ++a) slice.at(a, j, b) = out(position, a);
    });
    const DenseMatrix bias = affine_bias(trace, model, mode, range);
    for (std::size_t a = 0; a < D; ++a) slice.bias()[a] = bias(position, a);
    return slice;
}

} // namespace tensorlens
