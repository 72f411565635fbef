#pragma once

// Sublayer, block and whole-model affine operators at a traced input, plus the
// matrix-free column path (probing the patched forward with basis matrices).

#include "tensorlens/linalg.hpp"
#include "tensorlens/model.hpp"

#include <optional>

namespace tensorlens {

enum class BiasMode { with_biases, bias_free };

std::string_view to_string(BiasMode mode);

enum class SublayerKind { attention, layernorm, ffn, composite };

struct SublayerTensor {
    SublayerKind kind = SublayerKind::composite;
    AffineOperator op;
    std::size_t layer_index = 0;
    bool residual_wrapped = false;
};

struct BlockTensor {
    AffineOperator op;
    NormPlacement placement = NormPlacement::post_ln;
    std::size_t layer_index = 0;
};

struct ModelTensor {
    AffineOperator op;
    std::size_t seq_len = 0;
    std::size_t width = 0;
    BiasMode bias_mode = BiasMode::with_biases;
    LayerRange range;

    Tensor4View view() const { return Tensor4View(op, seq_len, width); }
};

/// sum_h (W_v,h W_o,h)^T kron A_h, bias = broadcast(sum_h b_v,h W_o,h + b_o).
SublayerTensor attention_tensor(const ForwardTrace& trace, std::size_t layer, const Model& model,
                                BiasMode mode);

/// [(I - 11^T/D) diag(gamma)]^T kron diag(1/sigma), bias = broadcast(beta).
SublayerTensor layernorm_tensor(std::span<const double> sigma, const LayerNormWeights& norm,
                                BiasMode mode, std::size_t layer_index = 0);

/// (M2^T kron I) diag(vec psi) (M1^T kron I), assembled without forming the
/// L*d_ff intermediates. Bias: b2 + (M2^T kron I) diag(vec psi) vec(b1).
SublayerTensor ffn_tensor(const DenseMatrix& psi, const LayerWeights& layer, BiasMode mode,
                          std::size_t layer_index = 0);

/// Adds the identity (X -> X + g(X)). Wrapping twice is a logic error.
SublayerTensor residual_wrap(SublayerTensor t);

BlockTensor block_tensor(const ForwardTrace& trace, std::size_t layer, const Model& model, BiasMode mode);

/// Default cap on dense operator entries, (L*D)^2.
inline constexpr std::size_t kDefaultDenseEntryCap = std::size_t{1} << 31;

struct FullTensorOptions {
    std::optional<LayerRange> range;
    std::size_t entry_cap = kDefaultDenseEntryCap;
};

/// Dense composition of the block tensors in the range (and the final-norm
/// operator when the range ends at the last block).
ModelTensor full_tensor(const ForwardTrace& trace, const Model& model, BiasMode mode,
                        FullTensorOptions options = {});

/// Bias of the whole affine map built by recursing block biases through the
/// following block operators.
Vector bias_by_recursion(const ForwardTrace& trace, const Model& model,
                         std::optional<LayerRange> range = std::nullopt);

/// T[:, :, l, d] as an L x D matrix, i.e. patched_forward(E^{l,d}) without biases.
DenseMatrix tensor_column(const ForwardTrace& trace, const Model& model, std::size_t position,
                          std::size_t channel, std::optional<LayerRange> range = std::nullopt);

/// Affine bias of the map, i.e. patched_forward(0) with biases. Zero in bias_free mode.
DenseMatrix affine_bias(const ForwardTrace& trace, const Model& model, BiasMode mode,
                        std::optional<LayerRange> range = std::nullopt);

struct ColumnOptions {
    std::optional<LayerRange> range;
    std::size_t threads = 1;
    std::size_t entry_cap = kDefaultDenseEntryCap;
};

/// Dense operator assembled from L*D column probes (never composes matrices).
ModelTensor materialize_by_columns(const ForwardTrace& trace, const Model& model, BiasMode mode,
                                   ColumnOptions options = {});

/// T[l_out, :, :, :] as a D x L x D slab, plus the matching bias row.
class OutputSlice {
public:
    OutputSlice(std::size_t position, std::size_t seq_len, std::size_t width);

    std::size_t position() const noexcept { return position_; }
    std::size_t seq_len() const noexcept { return seq_len_; }
    std::size_t width() const noexcept { return width_; }

    double& at(std::size_t d_out, std::size_t j, std::size_t d_in) {
        return data_[(d_out * seq_len_ + j) * width_ + d_in];
    }
    double at(std::size_t d_out, std::size_t j, std::size_t d_in) const {
        return data_[(d_out * seq_len_ + j) * width_ + d_in];
    }
    /// T[l_out, :, j, :] as D x D.
    DenseMatrix block(std::size_t j) const;

    Vector& bias() noexcept { return bias_; }
    const Vector& bias() const noexcept { return bias_; }

    /// sum_j T[l_out, :, j, :] X[j, :] + bias row.
    Vector contract(const DenseMatrix& x) const;

private:
    std::size_t position_, seq_len_, width_;
    std::vector<double> data_;
    Vector bias_;
};

OutputSlice output_slice(const ForwardTrace& trace, const Model& model, std::size_t position,
                         BiasMode mode, ColumnOptions options = {});

} // namespace tensorlens
