#pragma once

// A small, fully traced Transformer. Every input-dependent quantity that the
// linearization freezes (attention matrices, activation ratios, LayerNorm
// denominators) is recorded in a ForwardTrace, and patched_forward replays
// the block recursion with those quantities held fixed.

#include "tensorlens/linalg.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tensorlens {

using TokenId = std::uint32_t;

enum class NormPlacement { post_ln, pre_ln };
enum class Activation { gelu, relu, silu };

std::string_view to_string(NormPlacement p);
std::string_view to_string(Activation a);
NormPlacement parse_norm_placement(std::string_view s);
Activation parse_activation(std::string_view s);

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_model = 8;
    std::size_t d_head = 4;
    std::size_t d_ff = 16;
    std::size_t max_len = 16;
    std::size_t vocab = 32;
    NormPlacement norm_placement = NormPlacement::post_ln;
    Activation activation = Activation::gelu;
    bool causal = false;
    double ln_epsilon = 1e-5;
    bool use_biases = true;
    /// Divide attention logits by sqrt(d_head).
    bool attn_scale = true;
    /// LayerNorm after the last block, before unembedding.
    bool final_norm = false;
    /// Replacement token for perturbation masking, if the model reserves one.
    std::optional<TokenId> mask_token;

    /// Throws ValueError when the invariants (D = H * d_head, ...) fail.
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerNormWeights {
    Vector gamma;
    Vector beta;
};

struct LayerWeights {
    // Heads are stored side by side: head h owns columns [h*d_head, (h+1)*d_head)
    // of w_q, w_k, w_v and the same rows of w_o.
    DenseMatrix w_q, w_k, w_v, w_o;  // D x D
    Vector b_q, b_k, b_v, b_o;       // D
    DenseMatrix w_1;                 // D x d_ff
    Vector b_1;                      // d_ff
    DenseMatrix w_2;                 // d_ff x D
    Vector b_2;                      // D
    LayerNormWeights ln1, ln2;
};

struct ModelWeights {
    std::vector<LayerWeights> layers;
    DenseMatrix tok_embed;  // V x D
    DenseMatrix pos_embed;  // max_len x D
    DenseMatrix unembed;    // D x V
    LayerNormWeights final_norm;  // empty unless config.final_norm

    /// Throws ShapeMismatchError / ValueError on shape or finiteness problems.
    void validate(const ModelConfig& config) const;
};

struct Model {
    ModelConfig config;
    ModelWeights weights;
};

struct TokenSequence {
    std::vector<TokenId> ids;
    std::size_t size() const noexcept { return ids.size(); }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct LayerTrace {
    DenseMatrix input;       // X^n
    DenseMatrix attn_input;  // what the attention sublayer saw (X^n, or LN1(X^n) for pre-LN)
    std::vector<DenseMatrix> attention;  // A_h, L x L each
    DenseMatrix attn_output;             // Attn(attn_input), biases included
    DenseMatrix mid;                     // Z^n: input of the FFN residual branch
    DenseMatrix ffn_input;               // what the FFN saw
    DenseMatrix ffn_pre_activation;      // X M1 + b1
    DenseMatrix psi;                     // phi(z)/z, L x d_ff
    DenseMatrix ffn_output;
    Vector sigma1, sigma2;               // sqrt(Var + eps) per token
    Vector ln1_input_variance, ln2_input_variance;
};

struct ForwardTrace {
    std::vector<TokenId> tokens;  // empty when the forward started from embeddings
    std::size_t seq_len = 0;
    DenseMatrix embedded;          // X^0
    std::vector<LayerTrace> layers;
    DenseMatrix last_block_output; // X^N before any final norm
    Vector final_sigma;            // final-norm denominators (empty if no final norm)
    Vector final_input_variance;
    DenseMatrix final_hidden;      // output of F: X^N, after the final norm when present
    DenseMatrix logits;            // L x V
};

/// Which hidden state is "the last hidden state" of a run.
enum class HiddenState { after_final_norm, before_final_norm };
const DenseMatrix& last_hidden(const ForwardTrace& trace, HiddenState which = HiddenState::after_final_norm);

DenseMatrix embed(const TokenSequence& tokens, const Model& model);

struct AttentionResult {
    DenseMatrix output;
    std::vector<DenseMatrix> attention;
};
AttentionResult attention_forward(const DenseMatrix& x, const LayerWeights& layer, const ModelConfig& config);

struct LayerNormResult {
    DenseMatrix output;
    Vector sigma;
    Vector variance;
};
LayerNormResult layernorm_forward(const DenseMatrix& x, const LayerNormWeights& norm, double epsilon);

struct FfnResult {
    DenseMatrix output;
    DenseMatrix psi;
    DenseMatrix pre_activation;
};
FfnResult ffn_forward(const DenseMatrix& x, const LayerWeights& layer, const ModelConfig& config);

double activate(Activation act, double z);
/// phi(z)/z, with phi'(0) substituted when |z| < 1e-12 (gelu, silu: 0.5; relu: 0).
double activation_ratio(Activation act, double z);

/// One block on its input; fills the layer trace when given.
DenseMatrix block_forward(const DenseMatrix& x, const LayerWeights& layer, const ModelConfig& config,
                          LayerTrace* trace = nullptr);

struct ForwardResult {
    DenseMatrix logits;
    ForwardTrace trace;
};
ForwardResult model_forward(const TokenSequence& tokens, const Model& model);
/// Forward from an already embedded input X^0 (used for perturbed inputs).
ForwardResult model_forward_embedded(const DenseMatrix& x0, const Model& model);

/// Half-open block range [begin, end). end == n_layers includes the final norm.
struct LayerRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    static LayerRange all(const ModelConfig& config) { return {0, config.n_layers}; }
    friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

/// Hidden state entering the range (X^begin).
const DenseMatrix& range_input(const ForwardTrace& trace, LayerRange range);
/// Hidden state leaving the range (X^end, or the final hidden state when end == N).
const DenseMatrix& range_output(const ForwardTrace& trace, const ModelConfig& config, LayerRange range);

/// Re-runs the blocks in `range` with softmax, activation ratios and LayerNorm
/// denominators frozen from `trace`. The result is affine in `v`; with
/// include_bias = false it is linear.
DenseMatrix patched_forward(const ForwardTrace& trace, const DenseMatrix& v, const Model& model,
                            bool include_bias, std::optional<LayerRange> range = std::nullopt);

/// Seeded random weights: N(0, scale / sqrt(fan_in)) projections, gamma near 1,
/// small biases (all biases and betas zero when config.use_biases is false).
ModelWeights random_weights(const ModelConfig& config, std::uint64_t seed, double scale = 1.0);
Model random_model(const ModelConfig& config, std::uint64_t seed, double scale = 1.0);

void validate_tokens(const TokenSequence& tokens, const ModelConfig& config);

} // namespace tensorlens
