#include "factorwm/ident_eval.hpp"

#include "factorwm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fwm {

namespace {

double nan_value() {
    return std::numeric_limits<double>::quiet_NaN();
}

double avg_finite(const std::array<double, 4>& v) {
    double sum = 0.0;
    int count = 0;
    for (double x : v) {
        if (std::isfinite(x)) {
            sum += x;
            ++count;
        }
    }
    return count ? sum / count : nan_value();
}

} // namespace

double IdentReport::avg_true_to_est() const { return avg_finite(r2_true_to_est); }
double IdentReport::avg_est_to_true() const { return avg_finite(r2_est_to_true); }

std::vector<double> posterior_mean_latents(const WorldModel& wm, const TrajectoryBatch& data) {
    const WorldModelConfig& cfg = wm.config();
    std::int64_t ds = cfg.dims.total();
    std::int64_t n = data.n;
    std::vector<double> means(static_cast<std::size_t>(n * data.steps * ds), 0.0);

    auto eps = wm.zero_eps(n);
    Tensor zero_lat = Tensor::zeros({n, ds});
    Tensor zero_act = Tensor::zeros({n, cfg.action_dim});
    std::vector<Tensor> mean_history; // one [n, ds] tensor per time step
    std::vector<Tensor> lat_hist(static_cast<std::size_t>(cfg.lags));
    std::vector<Tensor> act_hist(static_cast<std::size_t>(cfg.lags));

    for (std::int64_t t = 0; t < data.steps; ++t) {
        Tensor obs = Tensor::zeros({n, data.obs_dim});
        for (std::int64_t traj = 0; traj < n; ++traj) {
            std::copy_n(data.obs_at(traj, t), data.obs_dim, obs.raw().begin() + traj * data.obs_dim);
        }
        for (std::int64_t k = 0; k < cfg.lags; ++k) {
            std::int64_t src = t - cfg.lags + k;
            lat_hist[static_cast<std::size_t>(k)] = src < 0 ? zero_lat : mean_history[static_cast<std::size_t>(src)];
        }
        // Action history comes straight from the data.
        for (std::int64_t k = 0; k < cfg.lags; ++k) {
            std::int64_t src = t - cfg.lags + k;
            if (src < 0) {
                act_hist[static_cast<std::size_t>(k)] = zero_act;
            } else {
                Tensor past = Tensor::zeros({n, data.action_dim});
                for (std::int64_t traj = 0; traj < n; ++traj) {
                    std::copy_n(data.action_at(traj, src), data.action_dim, past.raw().begin() + traj * data.action_dim);
                }
                act_hist[static_cast<std::size_t>(k)] = std::move(past);
            }
        }
        LatentBlocks blocks = wm.posterior(nullptr, obs, lat_hist, act_hist, eps);
        Tensor mu = blocks.full_mu();
        mean_history.push_back(mu);
        for (std::int64_t traj = 0; traj < n; ++traj) {
            std::copy_n(mu.data().begin() + traj * ds, ds, means.begin() + (traj * data.steps + t) * ds);
        }
    }
    return means;
}

IdentReport evaluate_identifiability(const WorldModel& wm, const TrajectoryBatch& data,
                                     const IdentConfig& config, std::int64_t epoch,
                                     RngStream rng) {
    if (!data.has_latents()) {
        throw EvalError("identifiability evaluation needs ground-truth latents");
    }
    std::int64_t ds = data.dims.total();
    std::int64_t lags = wm.config().lags;

    std::vector<double> est = posterior_mean_latents(wm, data);

    // Drop the zero-padded burn-in steps, keeping true/estimated rows aligned.
    std::vector<double> true_rows, est_rows;
    std::int64_t n_rows = data.n * (data.steps - lags);
    true_rows.reserve(static_cast<std::size_t>(n_rows * ds));
    est_rows.reserve(static_cast<std::size_t>(n_rows * ds));
    for (std::int64_t traj = 0; traj < data.n; ++traj) {
        for (std::int64_t t = lags; t < data.steps; ++t) {
            const double* lat = data.latent_at(traj, t);
            true_rows.insert(true_rows.end(), lat, lat + ds);
            const double* e = est.data() + (traj * data.steps + t) * ds;
            est_rows.insert(est_rows.end(), e, e + ds);
        }
    }
    return evaluate_identifiability_arrays(true_rows, est_rows, n_rows, data.dims, config, epoch, rng);
}

IdentReport evaluate_identifiability_arrays(const std::vector<double>& true_latents,
                                            const std::vector<double>& estimated,
                                            std::int64_t n_rows, const BlockDims& dims,
                                            const IdentConfig& config, std::int64_t epoch,
                                            RngStream rng) {
    std::int64_t ds = dims.total();
    if (static_cast<std::int64_t>(true_latents.size()) != n_rows * ds ||
        static_cast<std::int64_t>(estimated.size()) != n_rows * ds) {
        throw ShapeError("evaluate_identifiability_arrays: matrix sizes do not match n_rows x dims");
    }
    std::vector<std::int64_t> eligible(static_cast<std::size_t>(n_rows));
    for (std::int64_t i = 0; i < n_rows; ++i) eligible[static_cast<std::size_t>(i)] = i;
    std::int64_t need = config.n_fit + config.n_test;
    if (n_rows < need) {
        throw EvalError("not enough samples: need " + std::to_string(need) + ", have " + std::to_string(n_rows));
    }
    for (std::int64_t i = static_cast<std::int64_t>(eligible.size()) - 1; i > 0; --i) {
        std::swap(eligible[static_cast<std::size_t>(i)], eligible[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
    }

    auto build = [&](const std::vector<double>& source, std::int64_t offset, std::int64_t count,
                     std::int64_t col0, std::int64_t width) {
        std::vector<double> out(static_cast<std::size_t>(count * width));
        for (std::int64_t i = 0; i < count; ++i) {
            std::int64_t row = eligible[static_cast<std::size_t>(offset + i)];
            std::copy_n(source.begin() + row * ds + col0, width, out.begin() + i * width);
        }
        return out;
    };

    IdentReport report;
    report.n_fit = config.n_fit;
    report.n_test = config.n_test;
    report.epoch = epoch;
    for (auto& row : report.leakage) row.fill(nan_value());
    report.r2_true_to_est.fill(nan_value());
    report.r2_est_to_true.fill(nan_value());

    // true -> est: one kernel per true source block, all four targets share it.
    for (int i = 0; i < 4; ++i) {
        std::int64_t wi = dims.dim(i);
        if (wi == 0) continue;
        std::vector<double> x_fit = build(true_latents, 0, config.n_fit, dims.offset(i), wi);
        std::vector<double> x_test = build(true_latents, config.n_fit, config.n_test, dims.offset(i), wi);
        std::vector<std::vector<double>> y_fit(4), y_test(4);
        std::vector<MatView> targets;
        std::vector<int> target_block;
        for (int j = 0; j < 4; ++j) {
            std::int64_t wj = dims.dim(j);
            if (wj == 0) continue;
            y_fit[static_cast<std::size_t>(j)] = build(estimated, 0, config.n_fit, dims.offset(j), wj);
            y_test[static_cast<std::size_t>(j)] = build(estimated, config.n_fit, config.n_test, dims.offset(j), wj);
            targets.push_back(MatView{y_fit[static_cast<std::size_t>(j)].data(), config.n_fit, wj});
            target_block.push_back(j);
        }
        GroupedKrrResult fit = krr_fit_predict_grouped(
            MatView{x_fit.data(), config.n_fit, wi}, targets,
            MatView{x_test.data(), config.n_test, wi}, kMedianBandwidth, config.ridges, rng);
        for (std::size_t k = 0; k < target_block.size(); ++k) {
            int j = target_block[k];
            std::int64_t wj = dims.dim(j);
            double r2 = r2_score(MatView{y_test[static_cast<std::size_t>(j)].data(), config.n_test, wj},
                                 MatView{fit.predictions[k].data(), config.n_test, wj});
            report.leakage[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = r2;
            if (i == j) report.r2_true_to_est[static_cast<std::size_t>(i)] = r2;
        }
    }

    // est -> true, within block only.
    for (int j = 0; j < 4; ++j) {
        std::int64_t wj = dims.dim(j);
        if (wj == 0) continue;
        std::vector<double> x_fit = build(estimated, 0, config.n_fit, dims.offset(j), wj);
        std::vector<double> x_test = build(estimated, config.n_fit, config.n_test, dims.offset(j), wj);
        std::vector<double> y_fit = build(true_latents, 0, config.n_fit, dims.offset(j), wj);
        std::vector<double> y_test = build(true_latents, config.n_fit, config.n_test, dims.offset(j), wj);
        std::vector<MatView> targets{MatView{y_fit.data(), config.n_fit, wj}};
        GroupedKrrResult fit = krr_fit_predict_grouped(
            MatView{x_fit.data(), config.n_fit, wj}, targets,
            MatView{x_test.data(), config.n_test, wj}, kMedianBandwidth, config.ridges, rng);
        report.r2_est_to_true[static_cast<std::size_t>(j)] =
            r2_score(MatView{y_test.data(), config.n_test, wj},
                     MatView{fit.predictions[0].data(), config.n_test, wj});
    }
    return report;
}

} // namespace fwm
