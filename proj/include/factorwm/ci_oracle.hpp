#pragma once

#include "factorwm/stats.hpp"
#include "factorwm/synth_env.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace fwm {

/// The environment's causal graph unrolled over a time window, one node per
/// latent dimension per step plus action/reward/cumulative-reward nodes.
/// Latents in the first `lags` steps are exogenous roots (the rollout's
/// initial draws); actions are always exogenous. There are no instantaneous
/// latent-latent edges.
class TemplateGraph {
public:
    enum class Kind { latent, action, reward, cum_reward };

    struct NodeInfo {
        Kind kind;
        int t;
        std::int64_t dim; // latent dimension, or -1
    };

    static TemplateGraph unroll(const BlockDims& dims, std::int64_t lags,
                                std::int64_t horizon, int window);

    int latent(int t, std::int64_t dim) const;
    int action(int t) const;
    int reward(int t) const;
    /// R_t aggregates r_{t .. t+horizon-1}; only defined while the window
    /// covers the whole sum.
    int cum_reward(int t) const;

    int num_nodes() const { return static_cast<int>(info_.size()); }
    const NodeInfo& info(int node) const;
    const std::vector<int>& parents(int node) const;
    const std::vector<int>& children(int node) const;

    int window() const { return window_; }
    const BlockDims& dims() const { return dims_; }

private:
    int add_node(Kind kind, int t, std::int64_t dim);
    void add_edge(int from, int to);
    void check(int node) const;

    BlockDims dims_;
    std::int64_t lags_ = 0;
    std::int64_t horizon_ = 0;
    int window_ = 0;
    std::vector<NodeInfo> info_;
    std::vector<std::vector<int>> parents_;
    std::vector<std::vector<int>> children_;
    std::vector<std::vector<int>> latent_ids_; // [t][dim]
    std::vector<int> action_ids_, reward_ids_, cum_ids_;
};

/// Standard active-trail reachability (collider opened by conditioning on it
/// or a descendant). x and y must not be in z.
bool d_separated(const TemplateGraph& graph, int x, int y, const std::vector<int>& z);

/// Partial correlation from a covariance matrix (row-major n x n) via the
/// precision of the {x, y} union z submatrix. Throws NumericError when the
/// submatrix is near-singular.
double partial_correlation(const std::vector<double>& cov, int n, int x, int y,
                           const std::vector<int>& z);

/// Sample partial correlation from data rows (columns are variables).
double empirical_partial_correlation(MatView data, int x, int y, const std::vector<int>& z);

/// Exact joint covariance of a linear-Gaussian instance over a window:
/// variables are [s_t(0..ds-1), a_t(0..da-1), r_t] for t = 0..window-1, with
/// one-hot actions relaxed to independent N(0, action_var) inputs. Built by
/// expressing every variable as a linear map of independent roots.
class WindowCovariance {
public:
    WindowCovariance(const GroundTruthModel& linear_system, int window,
                     double action_var = 1.0);

    int s_index(int t, std::int64_t dim) const;
    int a_index(int t, std::int64_t dim) const;
    int r_index(int t) const;
    int size() const { return static_cast<int>(cov_.size() ? dim_ : 0); }

    double at(int i, int j) const { return cov_[static_cast<std::size_t>(i) * dim_ + static_cast<std::size_t>(j)]; }
    const std::vector<double>& matrix() const { return cov_; }

    /// Appends the derived variable R_t0 = sum_{k<horizon} gamma^k r_{t0+k};
    /// returns its index.
    int append_cum_return(int t0, double gamma, std::int64_t horizon);

    double partial_corr(int x, int y, const std::vector<int>& z) const;

private:
    void rebuild_cov();
    void check_time(int t) const;

    BlockDims dims_;
    std::int64_t action_dim_ = 0;
    std::int64_t lags_ = 0;
    int window_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> coeff_;     // [vars x roots] linear map onto roots
    std::vector<double> root_var_;
    std::size_t n_roots_ = 0;
    std::vector<double> cov_;
};

WindowCovariance exact_covariance(const GroundTruthModel& linear_system, int window,
                                  double action_var = 1.0);

struct CiTestConfig {
    double gamma = 0.95;
    std::int64_t horizon = 20;
    double threshold = 1e-6;
    bool include_current_action = false;
    double action_var = 1.0;
};

struct DimensionVerdict {
    bool reward_relevant = false;
    bool controllable = false;
    double reward_stat = 0.0; // max |partial corr| over the reward test
    double ctrl_stat = 0.0;   // max |partial corr| over action dims
    bool dsep_reward_dependent = false;
    bool dsep_ctrl_dependent = false;

    int block() const {
        if (reward_relevant) return controllable ? kCtrlRew : kUnctrlRew;
        return controllable ? kCtrlFree : kNoise;
    }
};

struct ClassificationResult {
    std::vector<DimensionVerdict> dims;
    double threshold = 0.0;
    int fixpoint_iterations = 0;
    /// Partial-correlation verdicts match d-separation on every tested pair.
    bool oracle_agreement = true;
};

/// Labels every latent dimension by the two conditional-independence tests of
/// the category characterization:
///   reward-relevant iff s_{i,t} correlates with R_t given
///     (a_{t-tau:t-1} [, a_t], s^rew_{t-tau:t-1}), where the s^rew
///     conditioning set is resolved by fixpoint iteration;
///   controllable iff s_{i,t} correlates with a_{t-1} given s_{t-tau:t-1}.
/// d-separation verdicts on the template graph are computed alongside.
ClassificationResult classify_dimensions(const GroundTruthModel& linear_system,
                                         const CiTestConfig& config);

struct ClassificationRun {
    GroundTruthModel model;
    ClassificationResult result;
    int resamples = 0;
};

/// classify_dimensions with faithfulness guard: draws fresh generic
/// coefficients (new seed) whenever a d-sep-dependent pair lands at or below
/// the threshold, up to max_attempts.
ClassificationRun classify_with_resampling(EnvSpec spec, const CiTestConfig& config,
                                           int max_attempts = 20);

} // namespace fwm
