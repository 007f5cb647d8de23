#pragma once

#include "factorwm/rng.hpp"
#include "factorwm/world_model.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace fwm {

struct IdentConfig {
    std::int64_t n_fit = 5000;
    std::int64_t n_test = 2000;
    std::vector<double> ridges = {1e-3, 1e-2, 1e-1};
};

/// Two-directional block-wise R^2 plus the full cross-block leakage matrix
/// (true block i -> estimated block j, held-out KRR R^2). Blocks with zero
/// width report NaN.
struct IdentReport {
    std::array<double, 4> r2_true_to_est{};
    std::array<double, 4> r2_est_to_true{};
    std::array<std::array<double, 4>, 4> leakage{};
    std::int64_t n_fit = 0;
    std::int64_t n_test = 0;
    std::int64_t epoch = 0;

    double avg_true_to_est() const;
    double avg_est_to_true() const;
};

/// Posterior-mean latents for every step of every trajectory, obtained by
/// filtering real observations (means fed back as history; first `lags`
/// steps use zero-padded history and are excluded from evaluation samples).
/// Returns an [n * steps, d_s] row-major matrix.
std::vector<double> posterior_mean_latents(const WorldModel& wm, const TrajectoryBatch& data);

/// Fits KRR both ways between true and estimated blocks on disjoint fit/test
/// subsamples. Requires data.has_latents().
IdentReport evaluate_identifiability(const WorldModel& wm, const TrajectoryBatch& data,
                                     const IdentConfig& config, std::int64_t epoch,
                                     RngStream rng);

/// Same measurement on pre-aligned matrices: row i of `estimated` is the
/// model's latent for the step whose ground truth is row i of `true_latents`
/// (both [n_rows, dims.total()], row-major).
IdentReport evaluate_identifiability_arrays(const std::vector<double>& true_latents,
                                            const std::vector<double>& estimated,
                                            std::int64_t n_rows, const BlockDims& dims,
                                            const IdentConfig& config, std::int64_t epoch,
                                            RngStream rng);

} // namespace fwm
