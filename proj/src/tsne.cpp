#include "medmap/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "medmap/common.hpp"
#include "medmap/rng.hpp"

namespace medmap {

namespace {

constexpr int kExaggerationIters = 250;
constexpr real kExaggeration = 12.0;
constexpr real kAffinityFloor = 1e-12;

void check_embeddings(const Tensor& embeddings, real perplexity) {
    if (embeddings.rank() != 2) throw ValidationError("tsne: embeddings must be [N, E]");
    int n = embeddings.dim(0);
    if (n > 5000) throw ValidationError("tsne: exact pairwise implementation caps N at 5000");
    if (embeddings.dim(1) < 1) throw ValidationError("tsne: empty feature dimension");
    if (!(perplexity > 1.0)) throw ValidationError("tsne: perplexity must exceed 1");
    if (!(3.0 * perplexity < real(n)))
        throw ValidationError("tsne: infeasible perplexity " + std::to_string(perplexity) + " for N = " +
                              std::to_string(n) + " (need 3*perplexity < N)");
    for (std::int64_t i = 0; i < embeddings.size(); ++i)
        if (!std::isfinite(embeddings[i])) throw ValidationError("tsne: non-finite embedding value");
}

// squared euclidean distances, zero diagonal
Tensor pairwise_sq(const Tensor& x) {
    int n = x.dim(0), e = x.dim(1);
    Tensor d({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            real s = 0.0;
            const real* a = x.data() + std::int64_t(i) * e;
            const real* b = x.data() + std::int64_t(j) * e;
            for (int k = 0; k < e; ++k) {
                real dk = a[k] - b[k];
                s += dk * dk;
            }
            d[std::int64_t(i) * n + j] = s;
            d[std::int64_t(j) * n + i] = s;
        }
    return d;
}

// Student-t numerators w_ij = 1/(1+|yi-yj|^2) and their total; zero diagonal.
std::pair<Tensor, real> student_weights(const Tensor& y) {
    Tensor w = pairwise_sq(y);
    int n = y.dim(0);
    real total = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            std::int64_t at = std::int64_t(i) * n + j;
            if (i == j) {
                w[at] = 0.0;
            } else {
                w[at] = 1.0 / (1.0 + w[at]);
                total += w[at];
            }
        }
    return {std::move(w), total};
}

}  // namespace

Tensor tsne_conditionals(const Tensor& embeddings, real perplexity) {
    check_embeddings(embeddings, perplexity);
    int n = embeddings.dim(0);
    Tensor d = pairwise_sq(embeddings);
    Tensor p({n, n});
    const real target = std::log(perplexity);

    std::vector<real> row(std::size_t(n), 0.0);
    for (int i = 0; i < n; ++i) {
        const real* di = d.data() + std::int64_t(i) * n;
        real dmin = 0.0;
        bool first = true;
        for (int j = 0; j < n; ++j)
            if (j != i && (first || di[j] < dmin)) {
                dmin = di[j];
                first = false;
            }

        real beta = 1.0, lo = 0.0, hi = 0.0;  // hi == 0 means unbounded above
        for (int it = 0; it < 50; ++it) {
            real sum = 0.0, dot = 0.0;
            for (int j = 0; j < n; ++j) {
                if (j == i) {
                    row[std::size_t(j)] = 0.0;
                    continue;
                }
                real e = std::exp(-beta * (di[j] - dmin));
                row[std::size_t(j)] = e;
                sum += e;
                dot += e * (di[j] - dmin);
            }
            real entropy = std::log(sum) + beta * dot / sum;
            real diff = entropy - target;
            if (std::abs(diff) < 1e-5) break;
            if (diff > 0) {  // too spread out: sharpen
                lo = beta;
                beta = (hi == 0.0) ? beta * 2.0 : 0.5 * (lo + hi);
            } else {
                hi = beta;
                beta = (lo == 0.0) ? beta * 0.5 : 0.5 * (lo + hi);
            }
        }
        real sum = 0.0;
        for (int j = 0; j < n; ++j) sum += row[std::size_t(j)];
        for (int j = 0; j < n; ++j) p[std::int64_t(i) * n + j] = row[std::size_t(j)] / sum;
    }
    return p;
}

Tensor tsne_affinities(const Tensor& embeddings, real perplexity) {
    Tensor cond = tsne_conditionals(embeddings, perplexity);
    int n = cond.dim(0);
    Tensor joint({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            real v = (cond[std::int64_t(i) * n + j] + cond[std::int64_t(j) * n + i]) / (2.0 * n);
            v = std::max(v, kAffinityFloor);
            joint[std::int64_t(i) * n + j] = v;
            joint[std::int64_t(j) * n + i] = v;
        }
    return joint;
}

real tsne_kl(const Tensor& p, const Tensor& y) {
    int n = y.dim(0);
    if (p.rank() != 2 || p.dim(0) != n || p.dim(1) != n || y.dim(1) != 2)
        throw ValidationError("tsne_kl: expected p [N,N] and y [N,2]");
    auto [w, total] = student_weights(y);
    real kl = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            std::int64_t at = std::int64_t(i) * n + j;
            real q = std::max(w[at] / total, kAffinityFloor);
            kl += p[at] * std::log(p[at] / q);
        }
    return kl;
}

Tensor tsne_gradient(const Tensor& p, const Tensor& y) {
    int n = y.dim(0);
    if (p.rank() != 2 || p.dim(0) != n || p.dim(1) != n || y.dim(1) != 2)
        throw ValidationError("tsne_gradient: expected p [N,N] and y [N,2]");
    auto [w, total] = student_weights(y);
    Tensor grad({n, 2});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            std::int64_t at = std::int64_t(i) * n + j;
            real coeff = 4.0 * (p[at] - w[at] / total) * w[at];
            for (int k = 0; k < 2; ++k)
                grad[std::int64_t(i) * 2 + k] += coeff * (y[std::int64_t(i) * 2 + k] - y[std::int64_t(j) * 2 + k]);
        }
    return grad;
}

TsneResult tsne_embed(const Tensor& embeddings, const TsneConfig& config) {
    if (config.iterations < 1) throw ValidationError("tsne: iterations must be >= 1");
    if (!std::isfinite(config.learning_rate)) throw ValidationError("tsne: learning rate must be finite");
    Tensor p = tsne_affinities(embeddings, config.perplexity);  // validates the embeddings
    int n = embeddings.dim(0);
    real learning_rate = config.learning_rate > 0
                             ? config.learning_rate
                             : std::max(real(n) / (kExaggeration * 4.0), 50.0);

    Rng rng(config.seed);
    Tensor y({n, 2});
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] = 1e-4 * rng.normal();
    Tensor velocity({n, 2});
    Tensor gains = Tensor::full({n, 2}, 1.0);

    Tensor boosted = p;
    for (std::int64_t i = 0; i < boosted.size(); ++i) boosted[i] *= kExaggeration;

    TsneResult result;
    bool lifted = false;
    for (int iter = 1; iter <= config.iterations; ++iter) {
        bool boosting = iter <= kExaggerationIters;
        Tensor grad = tsne_gradient(boosting ? boosted : p, y);
        real momentum = boosting ? 0.5 : 0.8;
        for (std::int64_t i = 0; i < y.size(); ++i) {
            // gradient opposing the motion = steady descent: grow the gain
            bool descending = (grad[i] > 0) != (velocity[i] > 0);
            gains[i] = descending ? gains[i] + 0.2 : gains[i] * 0.8;
            gains[i] = std::max(gains[i], 0.01);
            velocity[i] = momentum * velocity[i] - learning_rate * gains[i] * grad[i];
            y[i] += velocity[i];
        }
        real mean_x = 0.0, mean_y = 0.0;
        for (int i = 0; i < n; ++i) {
            mean_x += y[std::int64_t(i) * 2];
            mean_y += y[std::int64_t(i) * 2 + 1];
        }
        mean_x /= n;
        mean_y /= n;
        for (int i = 0; i < n; ++i) {
            y[std::int64_t(i) * 2] -= mean_x;
            y[std::int64_t(i) * 2 + 1] -= mean_y;
        }
        if (!lifted && (iter == kExaggerationIters || iter == config.iterations)) {
            result.kl_post_exaggeration = tsne_kl(p, y);
            lifted = true;
        }
        if (iter % 25 == 0 || iter == config.iterations)
            result.kl_curve.push_back(TsneKlPoint{iter, tsne_kl(p, y)});
    }
    result.kl_final = tsne_kl(p, y);
    result.points = std::move(y);
    return result;
}

}  // namespace medmap
