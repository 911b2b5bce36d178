#pragma once

#include <vector>

#include "medmap/tensor.hpp"

namespace medmap {

struct TsneConfig {
    real perplexity = 12.0;
    int iterations = 500;
    real learning_rate = 0.0;  // <= 0 selects max(N / 48, 50), which tracks the map scale with N
    std::uint64_t seed = 0;
};

struct TsneKlPoint {
    int iteration;
    real kl;
};

struct TsneResult {
    Tensor points;                     // [N, 2]
    real kl_post_exaggeration = 0.0;   // true objective right after the boosted phase ends
    real kl_final = 0.0;               // true objective at the last iteration
    std::vector<TsneKlPoint> kl_curve; // sampled during optimization (true objective)
};

// Conditional affinities P[i][j] = p_{j|i}: Gaussian rows whose bandwidths are
// binary-searched until each row's entropy matches log(perplexity). Zero
// diagonal, rows sum to 1. Preconditions: 3*perplexity < N, N <= 5000 (exact
// pairwise implementation), perplexity > 1, finite input.
Tensor tsne_conditionals(const Tensor& embeddings, real perplexity);

// Symmetrized joint affinities (P + P^T) / (2N), floored at 1e-12 off the
// diagonal; exactly symmetric, total mass 1 up to the floor.
Tensor tsne_affinities(const Tensor& embeddings, real perplexity);

// KL(P || Q(Y)) where Q is the normalized Student-t kernel of the 2-D layout.
real tsne_kl(const Tensor& p, const Tensor& y);

// Analytic layout gradient: dKL/dy_i = 4 sum_j (p_ij - q_ij) w_ij (y_i - y_j)
// with w_ij = 1/(1 + |y_i - y_j|^2). Exact for a proper affinity matrix.
Tensor tsne_gradient(const Tensor& p, const Tensor& y);

// Exact O(N^2) t-SNE to 2-D: x12 early exaggeration for the first 250
// iterations, momentum 0.5 switching to 0.8 when the boost lifts, per-element
// adaptive gains, layout recentered each step. Deterministic given the seed.
TsneResult tsne_embed(const Tensor& embeddings, const TsneConfig& config);

}  // namespace medmap
