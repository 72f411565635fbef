#include "tensorlens/collapse.hpp"

#include "tensorlens/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

namespace tensorlens {

namespace {

struct MethodName {
    MapMethod method;
    std::string_view name;
};

constexpr std::array kMethodNames{
    MethodName{MapMethod::tensor_norm, "tensor_norm"},
    MethodName{MapMethod::tensor_io, "tensor_io"},
    MethodName{MapMethod::tensor_cls, "tensor_cls"},
    MethodName{MapMethod::rollout_attn, "rollout_attn"},
    MethodName{MapMethod::rollout_wattn, "rollout_wattn"},
    MethodName{MapMethod::rollout_wattnresln, "rollout_wattnresln"},
    MethodName{MapMethod::rollout_glbenc, "rollout_glbenc"},
    MethodName{MapMethod::mean_attn, "mean_attn"},
    MethodName{MapMethod::mean_wattn, "mean_wattn"},
    MethodName{MapMethod::mean_wattnresln, "mean_wattnresln"},
    MethodName{MapMethod::mean_glbenc, "mean_glbenc"},
};

double slice_norm(const DenseMatrix& s, SliceNorm norm) {
    return norm == SliceNorm::frobenius ? frobenius_norm(s) : spectral_norm(s).value;
}

void require_bias_free(const ModelTensor& t, const char* what) {
    if (t.bias_mode != BiasMode::bias_free) {
        throw BiasModeError(std::string(what) + " needs the bias-free tensor (got " +
                            std::string(to_string(t.bias_mode)) + ")");
    }
}

void require_projection(const DenseMatrix& m, std::size_t L, std::size_t D, const char* what) {
    if (m.rows() != L || m.cols() != D) {
        throw DimensionError(std::string(what) + ": projection must be " + std::to_string(L) + "x" +
                             std::to_string(D));
    }
}

enum class Intra { attn, wattn, wattnresln, glbenc };
enum class Cross { rollout, mean };

Intra intra_of(MapMethod m) {
    switch (m) {
    case MapMethod::rollout_attn:
    case MapMethod::mean_attn: return Intra::attn;
    case MapMethod::rollout_wattn:
    case MapMethod::mean_wattn: return Intra::wattn;
    case MapMethod::rollout_wattnresln:
    case MapMethod::mean_wattnresln: return Intra::wattnresln;
    case MapMethod::rollout_glbenc:
    case MapMethod::mean_glbenc: return Intra::glbenc;
    default: throw ValueError("not a baseline method: " + std::string(to_string(m)));
    }
}

Cross cross_of(MapMethod m) {
    switch (m) {
    case MapMethod::rollout_attn:
    case MapMethod::rollout_wattn:
    case MapMethod::rollout_wattnresln:
    case MapMethod::rollout_glbenc: return Cross::rollout;
    default: return Cross::mean;
    }
}

DenseMatrix norm_collapse(const AffineOperator& op, std::size_t L, std::size_t D) {
    const Tensor4View view(op, L, D);
    DenseMatrix out(L, L);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
            double s = 0.0;
            for (std::size_t a = 0; a < D; ++a)
                for (std::size_t b = 0; b < D; ++b) s += view(i, a, j, b) * view(i, a, j, b);
            out(i, j) = std::sqrt(s);
        }
    return out;
}

} // namespace

std::string_view to_string(MapMethod m) {
    for (const auto& e : kMethodNames)
        if (e.method == m) return e.name;
    return "unknown";
}

MapMethod parse_map_method(std::string_view s) {
    for (const auto& e : kMethodNames)
        if (e.name == s) return e.method;
    throw ValueError("unknown map method '" + std::string(s) + "'");
}

bool is_baseline(MapMethod m) {
    return m != MapMethod::tensor_norm && m != MapMethod::tensor_io && m != MapMethod::tensor_cls;
}

const std::vector<MapMethod>& all_map_methods() {
    static const std::vector<MapMethod> methods = [] {
        std::vector<MapMethod> v;
        for (const auto& e : kMethodNames) v.push_back(e.method);
        return v;
    }();
    return methods;
}

CollapsedMap collapse_norm(const Tensor4View& t, SliceNorm norm) {
    const std::size_t L = t.seq_len();
    CollapsedMap map{DenseMatrix(L, L), MapMethod::tensor_norm, std::nullopt};
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) map.values(i, j) = slice_norm(t.slice(i, j), norm);
    return map;
}

Vector collapse_norm_row(const OutputSlice& slice, SliceNorm norm) {
    Vector row(slice.seq_len());
    for (std::size_t j = 0; j < slice.seq_len(); ++j) row[j] = slice_norm(slice.block(j), norm);
    return row;
}

CollapsedMap collapse_io(const ModelTensor& t, const DenseMatrix& in_proj, const DenseMatrix& out_proj) {
    require_bias_free(t, "collapse_io");
    const std::size_t L = t.seq_len;
    const std::size_t D = t.width;
    require_projection(in_proj, L, D, "collapse_io");
    require_projection(out_proj, L, D, "collapse_io");
    const auto view = t.view();
    CollapsedMap map{DenseMatrix(L, L), MapMethod::tensor_io, std::nullopt};
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
            double s = 0.0;
            for (std::size_t a = 0; a < D; ++a) {
                double inner = 0.0;
                for (std::size_t b = 0; b < D; ++b) inner += view(i, a, j, b) * in_proj(j, b);
                s += out_proj(i, a) * inner;
            }
            map.values(i, j) = s;
        }
    return map;
}

Vector collapse_io_row(const OutputSlice& slice, const DenseMatrix& in_proj, std::span<const double> out_row) {
    const std::size_t L = slice.seq_len();
    const std::size_t D = slice.width();
    require_projection(in_proj, L, D, "collapse_io_row");
    if (out_row.size() != D) throw DimensionError("collapse_io_row: output row width");
    Vector row(L, 0.0);
    for (std::size_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < D; ++a) {
            double inner = 0.0;
            for (std::size_t b = 0; b < D; ++b) inner += slice.at(a, j, b) * in_proj(j, b);
            s += out_row[a] * inner;
        }
        row[j] = s;
    }
    return row;
}

DenseMatrix collapse_with_vector(const ModelTensor& t, const DenseMatrix& in_proj,
                                 std::span<const double> out_vector) {
    const std::size_t L = t.seq_len;
    const std::size_t D = t.width;
    require_projection(in_proj, L, D, "collapse_with_vector");
    if (out_vector.size() != D) throw DimensionError("collapse_with_vector: output vector width");
    const auto view = t.view();
    DenseMatrix out(L, L);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
            double s = 0.0;
            for (std::size_t a = 0; a < D; ++a) {
                double inner = 0.0;
                for (std::size_t b = 0; b < D; ++b) inner += view(i, a, j, b) * in_proj(j, b);
                s += out_vector[a] * inner;
            }
            out(i, j) = s;
        }
    return out;
}

namespace {

Vector unembed_column(const DenseMatrix& unembed, std::size_t D, TokenId c) {
    if (unembed.rows() != D) throw DimensionError("collapse_cls: unembedding width");
    if (c >= unembed.cols()) {
        throw IndexError("class " + std::to_string(c) + " outside vocabulary of " +
                         std::to_string(unembed.cols()));
    }
    Vector col(D);
    for (std::size_t a = 0; a < D; ++a) col[a] = unembed(a, c);
    return col;
}

} // namespace

CollapsedMap collapse_cls(const ModelTensor& t, const DenseMatrix& in_proj, const DenseMatrix& unembed,
                          TokenId class_id) {
    require_bias_free(t, "collapse_cls");
    const Vector col = unembed_column(unembed, t.width, class_id);
    return {collapse_with_vector(t, in_proj, col), MapMethod::tensor_cls, class_id};
}

Vector collapse_cls_row(const OutputSlice& slice, const DenseMatrix& in_proj, const DenseMatrix& unembed,
                        TokenId class_id) {
    const Vector col = unembed_column(unembed, slice.width(), class_id);
    return collapse_io_row(slice, in_proj, col);
}

DenseMatrix normalize_rows_to_one(DenseMatrix m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto row = m.row(i);
        const double s = std::accumulate(row.begin(), row.end(), 0.0);
        if (s == 0.0) continue;
        for (auto& v : row) v /= s;
    }
    return m;
}

std::vector<DenseMatrix> layer_maps(const ForwardTrace& trace, const Model& model, MapMethod method) {
    const Intra intra = intra_of(method);
    const auto& c = model.config;
    const std::size_t L = trace.seq_len;
    const std::size_t D = c.d_model;
    const std::size_t dh = c.d_head;
    if (trace.layers.size() != c.n_layers) throw TraceMismatchError("trace does not cover the model");
    std::vector<DenseMatrix> maps;
    maps.reserve(c.n_layers);
    for (std::size_t n = 0; n < c.n_layers; ++n) {
        const auto& lt = trace.layers[n];
        const auto& lw = model.weights.layers[n];
        switch (intra) {
        case Intra::attn: {
            DenseMatrix m(L, L);
            for (const auto& a : lt.attention) m += a;
            m *= 1.0 / static_cast<double>(lt.attention.size());
            maps.push_back(std::move(m));
            break;
        }
        case Intra::wattn: {
            DenseMatrix m(L, L);
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                // ||x_j W_v,h W_o,h|| for every source token j
                Vector value_norm(L);
                for (std::size_t j = 0; j < L; ++j) {
                    Vector v(dh, 0.0);
                    for (std::size_t k = 0; k < dh; ++k)
                        for (std::size_t b = 0; b < D; ++b) v[k] += lt.attn_input(j, b) * lw.w_v(b, h * dh + k);
                    Vector out(D, 0.0);
                    for (std::size_t a = 0; a < D; ++a)
                        for (std::size_t k = 0; k < dh; ++k) out[a] += v[k] * lw.w_o(h * dh + k, a);
                    value_norm[j] = norm2(out);
                }
                for (std::size_t i = 0; i < L; ++i)
                    for (std::size_t j = 0; j < L; ++j) m(i, j) += lt.attention[h](i, j) * value_norm[j];
            }
            maps.push_back(normalize_rows_to_one(std::move(m)));
            break;
        }
        case Intra::wattnresln:
        case Intra::glbenc: {
            const auto attn = attention_tensor(trace, n, model, BiasMode::bias_free);
            const auto ln1 = layernorm_tensor(lt.sigma1, lw.ln1, BiasMode::bias_free, n);
            AffineOperator partial;
            if (intra == Intra::glbenc) {
                partial = block_tensor(trace, n, model, BiasMode::bias_free).op;
            } else if (c.norm_placement == NormPlacement::post_ln) {
                partial = compose(ln1.op, residual_wrap(attn).op);
            } else {
                SublayerTensor branch{SublayerKind::composite, compose(attn.op, ln1.op), n, false};
                partial = residual_wrap(std::move(branch)).op;
            }
            maps.push_back(normalize_rows_to_one(norm_collapse(partial, L, D)));
            break;
        }
        }
    }
    return maps;
}

DenseMatrix rollout(const std::vector<DenseMatrix>& per_layer) {
    if (per_layer.empty()) throw ValueError("rollout of an empty layer list");
    const std::size_t L = per_layer.front().rows();
    DenseMatrix result = DenseMatrix::identity(L);
    for (const auto& m : per_layer) {
        DenseMatrix mixed = 0.5 * m + 0.5 * DenseMatrix::identity(L);
        result = matmul(normalize_rows_to_one(std::move(mixed)), result);
    }
    return result;
}

DenseMatrix layer_mean(const std::vector<DenseMatrix>& per_layer) {
    if (per_layer.empty()) throw ValueError("mean of an empty layer list");
    DenseMatrix result(per_layer.front().rows(), per_layer.front().cols());
    for (const auto& m : per_layer) result += m;
    result *= 1.0 / static_cast<double>(per_layer.size());
    return result;
}

CollapsedMap baseline_map(const ForwardTrace& trace, const Model& model, MapMethod method) {
    const auto maps = layer_maps(trace, model, method);
    if (maps.empty()) throw ValueError("baseline maps need at least one layer");
    DenseMatrix values = cross_of(method) == Cross::rollout ? rollout(maps) : layer_mean(maps);
    return {std::move(values), method, std::nullopt};
}

RelevanceScores relevance_scores(const CollapsedMap& map, std::size_t target,
                                 std::span<const std::size_t> excluded) {
    if (target >= map.values.rows()) {
        throw IndexError("relevance_scores: target row " + std::to_string(target) + " outside map");
    }
    RelevanceScores r;
    const auto row = map.values.row(target);
    r.scores.assign(row.begin(), row.end());
    r.maskable.assign(row.size(), true);
    for (std::size_t p : excluded)
        if (p < r.maskable.size()) r.maskable[p] = false;
    return r;
}

std::vector<std::size_t> rank_positions(const RelevanceScores& scores) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < scores.scores.size(); ++i)
        if (scores.maskable[i]) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores.scores[a] > scores.scores[b];
    });
    return order;
}

} // namespace tensorlens
