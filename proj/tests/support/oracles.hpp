#pragma once

// Independent reference implementations the tests check the library against.
// Everything here is written the slow, obvious way on purpose.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "dialmae/param_store.hpp"

namespace oracle {

// Five-point central difference w.r.t. an arbitrary double slot. The O(h^4)
// stencil keeps truncation error near roundoff (~1e-12 absolute at h=1e-3),
// so even near-zero gradients compare cleanly against the analytic values.
inline double fd_grad_at(double& slot, const std::function<double()>& f, double h = 1e-3) {
    const double saved = slot;
    slot = saved + 2.0 * h;
    const double f2p = f();
    slot = saved + h;
    const double f1p = f();
    slot = saved - h;
    const double f1m = f();
    slot = saved - 2.0 * h;
    const double f2m = f();
    slot = saved;
    return (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h);
}

// Same stencil addressed by flat index into a parameter store.
inline double fd_grad(dialmae::ParamStore& store, size_t flat_index,
                      const std::function<double()>& f, double h = 1e-3) {
    return fd_grad_at(store.flat()[flat_index], f, h);
}

inline double grad_rel_err(double analytic, double fd) {
    const double scale = std::max({std::abs(analytic), std::abs(fd), 1e-7});
    return std::abs(analytic - fd) / scale;
}

inline bool grad_close(double analytic, double fd, double rtol = 1e-4) {
    return grad_rel_err(analytic, fd) < rtol;
}

// Unstabilized softmax cross-entropy of one row: -log(exp(l_y) / sum exp(l_j)).
inline double naive_ce_row(const std::vector<double>& logits, int label) {
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    return -std::log(std::exp(logits[static_cast<size_t>(label)]) / z);
}

inline std::vector<double> naive_softmax(const std::vector<double>& logits) {
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    std::vector<double> p;
    p.reserve(logits.size());
    for (double l : logits) p.push_back(std::exp(l) / z);
    return p;
}

// Brute-force InfoNCE over score rows: mean_i of -log(exp(s_ii)/sum_j exp(s_ij)).
inline double naive_info_nce(const std::vector<std::vector<double>>& scores) {
    double total = 0.0;
    for (size_t i = 0; i < scores.size(); ++i)
        total += naive_ce_row(scores[i], static_cast<int>(i));
    return total / static_cast<double>(scores.size());
}

// Rank of the positive (1-based) under descending score, ties by index.
inline int naive_rank_of(const std::vector<double>& scores, size_t positive) {
    int rank = 1;
    for (size_t j = 0; j < scores.size(); ++j) {
        if (j == positive) continue;
        if (scores[j] > scores[positive] || (scores[j] == scores[positive] && j < positive)) ++rank;
    }
    return rank;
}

inline double naive_recall_at_k(const std::vector<int>& positive_ranks, int k) {
    size_t hits = 0;
    for (int r : positive_ranks)
        if (r <= k) ++hits;
    return static_cast<double>(hits) / static_cast<double>(positive_ranks.size());
}

}  // namespace oracle
