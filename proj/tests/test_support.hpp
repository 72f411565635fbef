#pragma once

#include "tensorlens/linalg.hpp"
#include "tensorlens/model.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace tltest {

using namespace tensorlens;

inline DenseMatrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> dist(0.0, sd);
    DenseMatrix m(rows, cols);
    for (auto& v : m.data()) v = dist(rng);
    return m;
}

inline Vector random_vector(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> dist(0.0, sd);
    Vector v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

inline TokenSequence random_tokens(std::size_t len, std::size_t vocab, std::mt19937_64& rng) {
    TokenSequence t;
    for (std::size_t i = 0; i < len; ++i) t.ids.push_back(static_cast<TokenId>(rng() % vocab));
    return t;
}

inline ModelConfig small_config(std::size_t layers = 2, NormPlacement p = NormPlacement::post_ln,
                                bool biases = true, Activation act = Activation::gelu) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_head = 3;
    c.d_model = 6;
    c.d_ff = 10;
    c.max_len = 8;
    c.vocab = 11;
    c.norm_placement = p;
    c.use_biases = biases;
    c.activation = act;
    return c;
}

// Naive product used as an oracle against the library kernels.
inline DenseMatrix naive_matmul(const DenseMatrix& a, const DenseMatrix& b) {
    DenseMatrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

// Relative Frobenius distance.
inline double rel_error(const DenseMatrix& a, const DenseMatrix& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
        den += b.data()[i] * b.data()[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

} // namespace tltest
