#pragma once

// Perturbation harness, relation decoding through the mean affine operator,
// and numerical verification of the linearization error bound.

#include "tensorlens/collapse.hpp"
#include "tensorlens/model.hpp"
#include "tensorlens/tensorize.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tensorlens {

// ---------------------------------------------------------------------------
// Perturbation

/// Replaces the ceil(fraction * maskable) highest-scoring maskable positions
/// with mask_id. Throws ValueError when nothing is maskable or fraction is
/// outside [0, 1].
TokenSequence perturb_mask(const TokenSequence& tokens, const RelevanceScores& scores, double fraction,
                           TokenId mask_id);

/// Mean over D of squared differences of the last hidden state at `position`.
double hs_mse(const ForwardTrace& a, const ForwardTrace& b, std::size_t position,
              HiddenState which = HiddenState::after_final_norm);

/// |softmax(a[position])[token] - softmax(b[position])[token]|.
double aopc(const DenseMatrix& logits_a, const DenseMatrix& logits_b, std::size_t position, TokenId token);

enum class PerturbMetric { hs_mse, aopc };
std::string_view to_string(PerturbMetric m);

struct PerturbationCurve {
    std::vector<double> fractions;
    std::vector<double> values;
    PerturbMetric metric = PerturbMetric::hs_mse;
    std::string method;
};

/// Trapezoidal area over the fraction axis (not normalized).
double auc(const PerturbationCurve& curve);

/// Name of the random-order control arm.
inline constexpr std::string_view kRandomMethod = "random";

enum class TargetPosition { first, last };

struct PerturbationOptions {
    std::vector<double> fractions{0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
    TargetPosition target = TargetPosition::first;
    TokenId mask_id = 0;
    /// Positions never masked besides the target itself.
    std::vector<std::size_t> extra_excluded;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    /// For tensor_cls: use this label per example instead of the argmax prediction.
    std::vector<std::optional<TokenId>> labels;
    HiddenState hidden = HiddenState::after_final_norm;
};

struct MethodResult {
    std::string method;
    PerturbationCurve hs_mse;
    PerturbationCurve aopc;
    double hs_mse_auc = 0.0;
    double aopc_auc = 0.0;
};

struct PerturbationReport {
    std::vector<MethodResult> methods;  // requested methods, then the random control
    const MethodResult& find(std::string_view method) const;
};

/// Relevance scores of one example for a method name (a MapMethod name or
/// "random"). Tensor methods use the bias-free output slice of the target row.
RelevanceScores method_scores(const Model& model, const ForwardTrace& trace, std::string_view method,
                              std::size_t target, std::span<const std::size_t> excluded,
                              std::optional<TokenId> class_id, std::uint64_t random_seed);

PerturbationReport perturbation_suite(const Model& model, const std::vector<TokenSequence>& dataset,
                                      const std::vector<std::string>& methods,
                                      const PerturbationOptions& options);

// ---------------------------------------------------------------------------
// Relation decoding

struct RelationExample {
    TokenSequence prompt;  // query tokens, e.g. (relation, subject)
    std::pair<std::size_t, std::size_t> subject_span{0, 0};
    TokenId object = 0;
};

struct RelationSet {
    std::string relation;
    std::vector<RelationExample> examples;
};

/// Demonstrations (prompt followed by object) concatenated, then the query prompt.
TokenSequence few_shot_prompt(const std::vector<const RelationExample*>& demos, const RelationExample& query);

/// Mean of the full affine operators (matrix and bias together) of the first
/// m examples, each prefixed by the other m - 1 as demonstrations.
AffineOperator relation_mean_tensor(const Model& model, const std::vector<RelationExample>& train, std::size_t m);

/// Applies the operator to vec(X^0), projects row `position` with the
/// unembedding and returns the argmax token.
TokenId relation_decode(const AffineOperator& mean_op, const DenseMatrix& x0, const DenseMatrix& unembed,
                        std::size_t position);

struct RelationOptions {
    std::size_t m = 3;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5};
    /// Keep only test examples whose object is in the model's top-k (0 = off).
    std::size_t top_k_filter = 0;
    /// Decode the training examples themselves (each with its own training
    /// prefix) instead of the held-out ones.
    bool test_on_train = false;
};

struct RelationSplitResult {
    std::uint64_t seed = 0;
    std::size_t tested = 0;
    std::size_t matched = 0;
    double accuracy() const { return tested == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(tested); }
};

struct RelationResult {
    std::string relation;
    std::vector<RelationSplitResult> splits;
    double mean_accuracy = 0.0;
};

/// Per seed: shuffle, take m train examples, decode every remaining example
/// (prefixed by the first m - 1 train examples) and compare with the model's
/// own argmax.
RelationResult evaluate_relation(const Model& model, const RelationSet& relation, const RelationOptions& options);

/// Groups relation records by id, keeping only the most common prompt length
/// per relation.
std::vector<RelationSet> group_relations(std::vector<std::pair<std::string, RelationExample>> records);

// ---------------------------------------------------------------------------
// Approximation error bound

struct LayerBoundTerms {
    double ln1 = 0.0;   // ||gamma1||_inf / xi1
    double ln2 = 0.0;
    double attn = 0.0;  // sqrt(L) * sum_h ||W_vo^h||_2
    double ffn = 0.0;   // ||M1||_2 ||M2||_2
    double factor = 0.0;
};

struct OperatorNormBound {
    double value = 1.0;
    std::vector<LayerBoundTerms> layers;
    double final_norm = 1.0;
};

/// How the data-dependent LayerNorm term is measured at each norm's input.
enum class XiConvention {
    /// min_l sqrt(Var_l + eps): the actual largest entry of diag(1/sigma).
    denominator,
    /// min_l Var_l taken literally; not an upper bound once Var exceeds 1.
    variance,
};

/// Product bound on ||T_X||_2 from weight norms and the LayerNorm term at
/// each norm's input. Post-LN blocks contribute ||L2|| (||M|| + 1) ||L1|| (||A|| + 1),
/// pre-LN blocks (1 + ||M|| ||L2||)(1 + ||A|| ||L1||).
OperatorNormBound prop1_bound(const Model& model, const ForwardTrace& trace,
                              XiConvention xi = XiConvention::denominator);

struct BoundReport {
    double epsilon_norm = 0.0;
    double lhs = 0.0;               // ||T_X(X + eps) - F(X + eps)||
    double forward_change = 0.0;    // ||F(X + eps) - F(X)||
    double spectral_norm = 0.0;     // ||T_X||_2 by power iteration
    double tensor_norm_bound = 0.0; // product bound
    double rhs = 0.0;               // spectral_norm * ||eps|| + forward_change
    double rhs_bound = 0.0;         // tensor_norm_bound * ||eps|| + forward_change
    bool holds = false;             // lhs <= rhs + 1e-9
    bool holds_bound = false;       // lhs <= rhs_bound + 1e-9
    bool bound_dominates = false;   // tensor_norm_bound >= spectral_norm
};

inline constexpr double kBoundSlack = 1e-9;

/// One report per perturbation; the operator is built once at x0.
std::vector<BoundReport> prop1_check(const Model& model, const DenseMatrix& x0,
                                     const std::vector<DenseMatrix>& epsilons);

} // namespace tensorlens
