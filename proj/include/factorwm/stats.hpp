#pragma once

#include "factorwm/rng.hpp"

#include <cstdint>
#include <vector>

namespace fwm {

/// Non-owning row-major matrix view.
struct MatView {
    const double* data = nullptr;
    std::int64_t rows = 0;
    std::int64_t cols = 0;

    const double* row(std::int64_t i) const { return data + i * cols; }
};

/// Bandwidth sentinel: pass <= 0 to use the median heuristic (median pairwise
/// Euclidean distance over a permutation-invariant subsample of <= 1000 rows).
inline constexpr double kMedianBandwidth = -1.0;

struct KrrResult {
    std::vector<double> prediction; // [x_test.rows, dy] row-major
    double bandwidth = 0.0;
    double ridge = 0.0;
    bool bandwidth_fallback = false; // zero-variance inputs, bandwidth forced to 1.0
};

/// RBF-kernel ridge regression: k(x, x') = exp(-|x-x'|^2 / (2 bw^2)),
/// alpha = (K + ridge I)^{-1} Y via Cholesky, prediction = K_test alpha.
KrrResult krr_fit_predict(MatView x_train, MatView y_train, MatView x_test,
                          double bandwidth, double ridge);

/// Same, selecting ridge from `ridges` by held-out R^2 on a 75/25 split of
/// the training rows (shuffled with `rng`), then refitting on all rows.
KrrResult krr_fit_predict_auto(MatView x_train, MatView y_train, MatView x_test,
                               double bandwidth, const std::vector<double>& ridges,
                               RngStream& rng);

struct GroupedKrrResult {
    std::vector<std::vector<double>> predictions; // one [m, dy_t] block per target
    std::vector<double> ridges;                   // selected per target
    double bandwidth = 0.0;
    bool bandwidth_fallback = false;
};

/// Several regressions sharing one training input (one kernel matrix, one
/// factorization per candidate ridge); each target still picks its own ridge.
GroupedKrrResult krr_fit_predict_grouped(MatView x_train,
                                         const std::vector<MatView>& y_targets,
                                         MatView x_test, double bandwidth,
                                         const std::vector<double>& ridges,
                                         RngStream& rng);

/// 1 - SS_res/SS_tot averaged over output dimensions. Throws DomainError if
/// any target dimension has zero variance.
double r2_score(MatView y_true, MatView y_pred);

double median_pairwise_distance(MatView x, std::int64_t max_rows = 1000);

} // namespace fwm
