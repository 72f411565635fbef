#pragma once

// Small trainer (manual backprop + Adam) and two synthetic tasks used to
// produce trained models for the evaluation harness: a CLS-token keyword
// classifier and a few-shot subject -> object relation task.

#include "tensorlens/model.hpp"
#include "tensorlens/modelio.hpp"

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace tensorlens {

struct TrainExample {
    TokenSequence tokens;
    /// (position, token) pairs scored with cross-entropy on the logits.
    std::vector<std::pair<std::size_t, TokenId>> targets;
};

/// Mean cross-entropy over the example's targets. When `grads` is non-null the
/// gradient is added into it (same layout as the weights).
double loss_and_gradients(const Model& model, const TrainExample& example, ModelWeights* grads);

/// All weight arrays of the model in a fixed order. Bias and beta arrays are
/// left out when `include_biases` is false.
std::vector<std::span<double>> parameter_spans(ModelWeights& w, bool include_biases);

/// Zero-filled weights with the model's shapes.
ModelWeights zero_like(const ModelWeights& w);

struct TrainOptions {
    std::size_t steps = 1500;
    std::size_t batch = 16;
    double learning_rate = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double clip_norm = 1.0;  // global gradient norm clip (0 = off)
    std::uint64_t seed = 0;
};

struct TrainReport {
    std::vector<double> loss;  // mean batch loss per step
};

TrainReport train(Model& model, const std::vector<TrainExample>& data, const TrainOptions& options);

/// Fraction of targets whose argmax logit equals the target token.
double target_accuracy(const Model& model, const std::vector<TrainExample>& data);

// ---------------------------------------------------------------------------
// Tasks

struct ToyTask {
    ModelConfig config;
    std::vector<TrainExample> train;
    /// Evaluation records (label or relation fields filled).
    std::vector<DatasetRecord> records;
};

/// Keyword polarity classifier. Token 0 is the mask, 1 the CLS token at
/// position 0, 2/3 the negative/positive label tokens; one polarity keyword
/// is placed among neutral filler and the label is predicted at position 0.
struct ClassifierVocab {
    static constexpr TokenId mask = 0, cls = 1, neg = 2, pos = 3;
    static constexpr TokenId first_pos_keyword = 4, first_neg_keyword = 8, first_neutral = 12;
    static constexpr std::size_t keywords_per_class = 4, neutral = 12, size = 24;
};
ToyTask classification_task(std::size_t n_examples, std::size_t seq_len, std::uint64_t seed);

/// Five relations, each a permutation of eight entities. Prompts are
/// [r s1 o1 r s2 o2 r s] and objects are predicted after every subject.
struct RelationVocab {
    static constexpr TokenId mask = 0, first_relation = 1, first_entity = 6;
    static constexpr std::size_t relations = 5, entities = 8, size = 14;
};
ToyTask relation_task(std::size_t n_examples, std::size_t shots, std::uint64_t seed);

} // namespace tensorlens
