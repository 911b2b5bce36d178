#pragma once

#include <algorithm>
#include <cmath>

#include "medmap/common.hpp"

namespace medmap {

// Shared row kernels. The softmax used by the tape ops and the pure loss
// helpers must be the same code so that e.g. KL(p‖p) evaluates to exactly 0.
inline void softmax_row(real* x, int n) {
    real m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    real s = 0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - m);
        s += x[i];
    }
    for (int i = 0; i < n; ++i) x[i] /= s;
}

inline void log_softmax_row(real* x, int n) {
    real m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    real s = 0;
    for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
    real lse = m + std::log(s);
    for (int i = 0; i < n; ++i) x[i] -= lse;
}

inline real sigmoid(real x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace medmap
