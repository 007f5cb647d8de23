#include "factorwm/stats.hpp"

#include "factorwm/errors.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace fwm {

namespace {

using Eigen::MatrixXd;

MatrixXd to_eigen(MatView m) {
    MatrixXd out(m.rows, m.cols);
    for (std::int64_t i = 0; i < m.rows; ++i) {
        for (std::int64_t j = 0; j < m.cols; ++j) {
            out(i, j) = m.data[i * m.cols + j];
        }
    }
    return out;
}

MatrixXd rbf_kernel(const MatrixXd& a, const MatrixXd& b, double bandwidth) {
    // |x-y|^2 expanded via squared norms keeps this a single GEMM.
    Eigen::VectorXd an = a.rowwise().squaredNorm();
    Eigen::VectorXd bn = b.rowwise().squaredNorm();
    MatrixXd d2 = (-2.0 * a * b.transpose());
    d2.colwise() += an;
    d2.rowwise() += bn.transpose();
    double inv = -0.5 / (bandwidth * bandwidth);
    return (d2.array().max(0.0) * inv).exp();
}

double resolve_bandwidth(MatView x, double bandwidth, bool* fallback) {
    if (bandwidth > 0.0) return bandwidth;
    double med = median_pairwise_distance(x);
    if (med <= 0.0) {
        if (fallback) *fallback = true;
        std::fprintf(stderr, "krr: zero-variance inputs, falling back to bandwidth 1.0\n");
        return 1.0;
    }
    return med;
}

} // namespace

double median_pairwise_distance(MatView x, std::int64_t max_rows) {
    if (x.rows < 2) {
        throw DomainError("median_pairwise_distance needs at least two rows");
    }
    // Subsample in a permutation-invariant way: order rows by (norm, coords)
    // and stride through the sorted order.
    std::vector<std::int64_t> order(static_cast<std::size_t>(x.rows));
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::int64_t> pick;
    if (x.rows > max_rows) {
        std::vector<double> norms(static_cast<std::size_t>(x.rows));
        for (std::int64_t i = 0; i < x.rows; ++i) {
            double s = 0.0;
            const double* r = x.row(i);
            for (std::int64_t j = 0; j < x.cols; ++j) s += r[j] * r[j];
            norms[static_cast<std::size_t>(i)] = s;
        }
        std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
            if (norms[static_cast<std::size_t>(a)] != norms[static_cast<std::size_t>(b)]) {
                return norms[static_cast<std::size_t>(a)] < norms[static_cast<std::size_t>(b)];
            }
            const double* ra = x.row(a);
            const double* rb = x.row(b);
            return std::lexicographical_compare(ra, ra + x.cols, rb, rb + x.cols);
        });
        for (std::int64_t i = 0; i < max_rows; ++i) {
            pick.push_back(order[static_cast<std::size_t>(i * x.rows / max_rows)]);
        }
    } else {
        pick = order;
    }
    std::vector<double> dists;
    dists.reserve(pick.size() * (pick.size() - 1) / 2);
    for (std::size_t i = 0; i < pick.size(); ++i) {
        const double* ri = x.row(pick[i]);
        for (std::size_t j = i + 1; j < pick.size(); ++j) {
            const double* rj = x.row(pick[j]);
            double s = 0.0;
            for (std::int64_t c = 0; c < x.cols; ++c) {
                double d = ri[c] - rj[c];
                s += d * d;
            }
            dists.push_back(std::sqrt(s));
        }
    }
    std::size_t mid = dists.size() / 2;
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
    return dists[mid];
}

KrrResult krr_fit_predict(MatView x_train, MatView y_train, MatView x_test,
                          double bandwidth, double ridge) {
    std::vector<MatView> ys{y_train};
    RngStream unused(0);
    GroupedKrrResult g = krr_fit_predict_grouped(x_train, ys, x_test, bandwidth, {ridge}, unused);
    KrrResult out;
    out.prediction = std::move(g.predictions[0]);
    out.bandwidth = g.bandwidth;
    out.ridge = ridge;
    out.bandwidth_fallback = g.bandwidth_fallback;
    return out;
}

KrrResult krr_fit_predict_auto(MatView x_train, MatView y_train, MatView x_test,
                               double bandwidth, const std::vector<double>& ridges,
                               RngStream& rng) {
    std::vector<MatView> ys{y_train};
    GroupedKrrResult g = krr_fit_predict_grouped(x_train, ys, x_test, bandwidth, ridges, rng);
    KrrResult out;
    out.prediction = std::move(g.predictions[0]);
    out.bandwidth = g.bandwidth;
    out.ridge = g.ridges[0];
    out.bandwidth_fallback = g.bandwidth_fallback;
    return out;
}

GroupedKrrResult krr_fit_predict_grouped(MatView x_train,
                                         const std::vector<MatView>& y_targets,
                                         MatView x_test, double bandwidth,
                                         const std::vector<double>& ridges,
                                         RngStream& rng) {
    if (x_train.rows < 2) {
        throw DomainError("krr needs at least two training rows");
    }
    for (const MatView& y : y_targets) {
        if (y.rows != x_train.rows) {
            throw ShapeError("krr: X has " + std::to_string(x_train.rows) + " rows but Y has " + std::to_string(y.rows));
        }
    }
    if (ridges.empty()) {
        throw DomainError("krr: empty ridge candidate list");
    }
    for (double r : ridges) {
        if (!(r > 0.0)) {
            throw DomainError("krr: ridge must be positive, got " + std::to_string(r));
        }
    }

    GroupedKrrResult out;
    out.bandwidth = resolve_bandwidth(x_train, bandwidth, &out.bandwidth_fallback);

    MatrixXd x = to_eigen(x_train);
    MatrixXd xt = to_eigen(x_test);

    out.ridges.assign(y_targets.size(), ridges[0]);
    if (ridges.size() > 1) {
        // 75/25 split for ridge selection.
        std::vector<std::int64_t> perm(static_cast<std::size_t>(x_train.rows));
        std::iota(perm.begin(), perm.end(), 0);
        for (std::int64_t i = x_train.rows - 1; i > 0; --i) {
            std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
        }
        std::int64_t n_fit = std::max<std::int64_t>(2, (3 * x_train.rows) / 4);
        std::int64_t n_val = x_train.rows - n_fit;
        if (n_val >= 2) {
            MatrixXd xf(n_fit, x_train.cols), xv(n_val, x_train.cols);
            for (std::int64_t i = 0; i < n_fit; ++i) xf.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
            for (std::int64_t i = 0; i < n_val; ++i) xv.row(i) = x.row(perm[static_cast<std::size_t>(n_fit + i)]);
            MatrixXd kf = rbf_kernel(xf, xf, out.bandwidth);
            MatrixXd kv = rbf_kernel(xv, xf, out.bandwidth);
            std::vector<double> best(y_targets.size(), -std::numeric_limits<double>::infinity());
            for (double ridge : ridges) {
                MatrixXd kr = kf + ridge * MatrixXd::Identity(n_fit, n_fit);
                Eigen::LLT<MatrixXd> llt(kr);
                if (llt.info() != Eigen::Success) {
                    throw NumericError("krr: Cholesky failed during ridge selection");
                }
                for (std::size_t t = 0; t < y_targets.size(); ++t) {
                    const MatView& y = y_targets[t];
                    MatrixXd yf(n_fit, y.cols), yv(n_val, y.cols);
                    for (std::int64_t i = 0; i < n_fit; ++i) {
                        for (std::int64_t j = 0; j < y.cols; ++j) yf(i, j) = y.data[perm[static_cast<std::size_t>(i)] * y.cols + j];
                    }
                    for (std::int64_t i = 0; i < n_val; ++i) {
                        for (std::int64_t j = 0; j < y.cols; ++j) yv(i, j) = y.data[perm[static_cast<std::size_t>(n_fit + i)] * y.cols + j];
                    }
                    MatrixXd alpha = llt.solve(yf);
                    MatrixXd pred = kv * alpha;
                    // Held-out R^2, tolerant of zero-variance slices.
                    double score = 0.0;
                    for (std::int64_t j = 0; j < y.cols; ++j) {
                        double mean = yv.col(j).mean();
                        double tot = (yv.col(j).array() - mean).square().sum();
                        double res = (yv.col(j) - pred.col(j)).squaredNorm();
                        score += tot > 0.0 ? 1.0 - res / tot : 0.0;
                    }
                    score /= static_cast<double>(y.cols);
                    if (score > best[t]) {
                        best[t] = score;
                        out.ridges[t] = ridge;
                    }
                }
            }
        }
    }

    // Final fit on all rows, one factorization per distinct selected ridge.
    MatrixXd k = rbf_kernel(x, x, out.bandwidth);
    MatrixXd kt = rbf_kernel(xt, x, out.bandwidth);
    out.predictions.resize(y_targets.size());
    std::vector<double> distinct = out.ridges;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    for (double ridge : distinct) {
        MatrixXd kr = k + ridge * MatrixXd::Identity(x_train.rows, x_train.rows);
        Eigen::LLT<MatrixXd> llt(kr);
        if (llt.info() != Eigen::Success) {
            throw NumericError("krr: Cholesky failed at ridge " + std::to_string(ridge));
        }
        for (std::size_t t = 0; t < y_targets.size(); ++t) {
            if (out.ridges[t] != ridge) continue;
            MatrixXd y = to_eigen(y_targets[t]);
            MatrixXd alpha = llt.solve(y);
            MatrixXd pred = kt * alpha;
            std::vector<double>& dst = out.predictions[t];
            dst.resize(static_cast<std::size_t>(pred.rows() * pred.cols()));
            for (std::int64_t i = 0; i < pred.rows(); ++i) {
                for (std::int64_t j = 0; j < pred.cols(); ++j) {
                    dst[static_cast<std::size_t>(i * pred.cols() + j)] = pred(i, j);
                }
            }
        }
    }
    return out;
}

double r2_score(MatView y_true, MatView y_pred) {
    if (y_true.rows != y_pred.rows || y_true.cols != y_pred.cols) {
        throw ShapeError("r2_score: shape mismatch");
    }
    if (y_true.rows < 2) {
        throw DomainError("r2_score needs at least two rows");
    }
    double total = 0.0;
    for (std::int64_t j = 0; j < y_true.cols; ++j) {
        double mean = 0.0;
        for (std::int64_t i = 0; i < y_true.rows; ++i) mean += y_true.data[i * y_true.cols + j];
        mean /= static_cast<double>(y_true.rows);
        double ss_tot = 0.0, ss_res = 0.0;
        for (std::int64_t i = 0; i < y_true.rows; ++i) {
            double t = y_true.data[i * y_true.cols + j];
            double p = y_pred.data[i * y_pred.cols + j];
            ss_tot += (t - mean) * (t - mean);
            ss_res += (t - p) * (t - p);
        }
        if (ss_tot <= 0.0) {
            throw DomainError("r2_score: target dimension " + std::to_string(j) + " has zero variance");
        }
        total += 1.0 - ss_res / ss_tot;
    }
    return total / static_cast<double>(y_true.cols);
}

} // namespace fwm
