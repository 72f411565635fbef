#pragma once

// Collapsing the L x D x L x D tensor into L x L generalized attention maps,
// and the attention-aggregation baselines they are compared against.

#include "tensorlens/model.hpp"
#include "tensorlens/tensorize.hpp"

#include <optional>
#include <string_view>
#include <vector>

namespace tensorlens {

enum class MapMethod {
    tensor_norm,
    tensor_io,
    tensor_cls,
    rollout_attn,
    rollout_wattn,
    rollout_wattnresln,
    rollout_glbenc,
    mean_attn,
    mean_wattn,
    mean_wattnresln,
    mean_glbenc,
};

std::string_view to_string(MapMethod m);
MapMethod parse_map_method(std::string_view s);
bool is_baseline(MapMethod m);
const std::vector<MapMethod>& all_map_methods();

struct CollapsedMap {
    DenseMatrix values;  // L x L, entry (i, j) reads "output i <- input j"
    MapMethod method = MapMethod::tensor_norm;
    std::optional<TokenId> class_id;
};

enum class SliceNorm { frobenius, spectral };

/// out[i, j] = ||T[i, :, j, :]||.
CollapsedMap collapse_norm(const Tensor4View& t, SliceNorm norm = SliceNorm::frobenius);
/// Row l_out of the same map, computed from an output slice.
Vector collapse_norm_row(const OutputSlice& slice, SliceNorm norm = SliceNorm::frobenius);

/// out[i, j] = out_proj[i, :] . T[i, :, j, :] . in_proj[j, :]. Requires a
/// bias-free tensor; with out_proj = X^N and in_proj = X^0 rows sum to ||X^N[i]||^2
/// on bias-free models.
CollapsedMap collapse_io(const ModelTensor& t, const DenseMatrix& in_proj, const DenseMatrix& out_proj);
Vector collapse_io_row(const OutputSlice& slice, const DenseMatrix& in_proj, std::span<const double> out_row);

/// out[i, j] = E_out[:, c] . T[i, :, j, :] . in_proj[j, :]. Requires a bias-free tensor.
CollapsedMap collapse_cls(const ModelTensor& t, const DenseMatrix& in_proj, const DenseMatrix& unembed,
                          TokenId class_id);
/// Same contraction with an arbitrary output-side vector (used for linearity checks).
DenseMatrix collapse_with_vector(const ModelTensor& t, const DenseMatrix& in_proj,
                                 std::span<const double> out_vector);
Vector collapse_cls_row(const OutputSlice& slice, const DenseMatrix& in_proj, const DenseMatrix& unembed,
                        TokenId class_id);

/// Per-layer intra-layer maps used by the baselines (one L x L map per layer).
std::vector<DenseMatrix> layer_maps(const ForwardTrace& trace, const Model& model, MapMethod method);

/// Rollout / mean cross-layer aggregation of the baseline maps.
CollapsedMap baseline_map(const ForwardTrace& trace, const Model& model, MapMethod method);

/// prod_n norm_rows(0.5 M_n + 0.5 I), deepest layer leftmost.
DenseMatrix rollout(const std::vector<DenseMatrix>& per_layer);
DenseMatrix layer_mean(const std::vector<DenseMatrix>& per_layer);
DenseMatrix normalize_rows_to_one(DenseMatrix m);

struct RelevanceScores {
    Vector scores;
    std::vector<bool> maskable;
};

/// Row `target` of the map; positions in `excluded` are never ranked.
RelevanceScores relevance_scores(const CollapsedMap& map, std::size_t target,
                                 std::span<const std::size_t> excluded = {});

/// Maskable positions by descending score; ties go to the lower index.
std::vector<std::size_t> rank_positions(const RelevanceScores& scores);

} // namespace tensorlens
