#include "factorwm/ci_oracle.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <set>

namespace fwm {

int TemplateGraph::add_node(Kind kind, int t, std::int64_t dim) {
    info_.push_back(NodeInfo{kind, t, dim});
    parents_.emplace_back();
    children_.emplace_back();
    return static_cast<int>(info_.size()) - 1;
}

void TemplateGraph::add_edge(int from, int to) {
    parents_[static_cast<std::size_t>(to)].push_back(from);
    children_[static_cast<std::size_t>(from)].push_back(to);
}

void TemplateGraph::check(int node) const {
    if (node < 0 || node >= num_nodes()) {
        throw GraphError("unknown node id " + std::to_string(node));
    }
}

const TemplateGraph::NodeInfo& TemplateGraph::info(int node) const {
    check(node);
    return info_[static_cast<std::size_t>(node)];
}

const std::vector<int>& TemplateGraph::parents(int node) const {
    check(node);
    return parents_[static_cast<std::size_t>(node)];
}

const std::vector<int>& TemplateGraph::children(int node) const {
    check(node);
    return children_[static_cast<std::size_t>(node)];
}

int TemplateGraph::latent(int t, std::int64_t dim) const {
    if (t < 0 || t >= window_ || dim < 0 || dim >= dims_.total()) {
        throw GraphError("no latent node (t=" + std::to_string(t) + ", dim=" + std::to_string(dim) + ")");
    }
    return latent_ids_[static_cast<std::size_t>(t)][static_cast<std::size_t>(dim)];
}

int TemplateGraph::action(int t) const {
    if (t < 0 || t >= window_) throw GraphError("no action node at t=" + std::to_string(t));
    return action_ids_[static_cast<std::size_t>(t)];
}

int TemplateGraph::reward(int t) const {
    if (t < 0 || t >= window_) throw GraphError("no reward node at t=" + std::to_string(t));
    return reward_ids_[static_cast<std::size_t>(t)];
}

int TemplateGraph::cum_reward(int t) const {
    if (t < 0 || t >= static_cast<int>(cum_ids_.size()) || cum_ids_[static_cast<std::size_t>(t)] < 0) {
        throw GraphError("no cumulative-reward node at t=" + std::to_string(t) + " (window too short)");
    }
    return cum_ids_[static_cast<std::size_t>(t)];
}

TemplateGraph TemplateGraph::unroll(const BlockDims& dims, std::int64_t lags,
                                    std::int64_t horizon, int window) {
    if (window < static_cast<int>(lags) + 1 || horizon < 1) {
        throw GraphError("unroll needs window > lags and horizon >= 1");
    }
    TemplateGraph g;
    g.dims_ = dims;
    g.lags_ = lags;
    g.horizon_ = horizon;
    g.window_ = window;

    std::int64_t ds = dims.total();
    g.latent_ids_.resize(static_cast<std::size_t>(window));
    for (int t = 0; t < window; ++t) {
        for (std::int64_t i = 0; i < ds; ++i) {
            g.latent_ids_[static_cast<std::size_t>(t)].push_back(g.add_node(Kind::latent, t, i));
        }
        g.action_ids_.push_back(g.add_node(Kind::action, t, -1));
        g.reward_ids_.push_back(g.add_node(Kind::reward, t, -1));
    }

    for (int t = 0; t < window; ++t) {
        if (t >= static_cast<int>(lags)) {
            for (int b = 0; b < 4; ++b) {
                bool full = (b == kCtrlFree || b == kNoise);
                bool acts = (b == kCtrlRew || b == kCtrlFree);
                std::int64_t d_src = full ? ds : dims.rew();
                for (std::int64_t k = 1; k <= lags; ++k) {
                    int u = t - static_cast<int>(k);
                    for (std::int64_t j = 0; j < dims.dim(b); ++j) {
                        int dst = g.latent_ids_[static_cast<std::size_t>(t)][static_cast<std::size_t>(dims.offset(b) + j)];
                        for (std::int64_t i = 0; i < d_src; ++i) {
                            g.add_edge(g.latent_ids_[static_cast<std::size_t>(u)][static_cast<std::size_t>(i)], dst);
                        }
                        if (acts) {
                            g.add_edge(g.action_ids_[static_cast<std::size_t>(u)], dst);
                        }
                    }
                }
            }
        }
        for (std::int64_t i = 0; i < dims.rew(); ++i) {
            g.add_edge(g.latent_ids_[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)],
                       g.reward_ids_[static_cast<std::size_t>(t)]);
        }
    }

    g.cum_ids_.assign(static_cast<std::size_t>(window), -1);
    for (int t = 0; t + static_cast<int>(horizon) - 1 < window; ++t) {
        int node = g.add_node(Kind::cum_reward, t, -1);
        g.cum_ids_[static_cast<std::size_t>(t)] = node;
        for (std::int64_t k = 0; k < horizon; ++k) {
            g.add_edge(g.reward_ids_[static_cast<std::size_t>(t + k)], node);
        }
    }
    return g;
}

bool d_separated(const TemplateGraph& graph, int x, int y, const std::vector<int>& z) {
    if (x == y) {
        throw GraphError("d_separated: x and y must differ");
    }
    std::vector<char> in_z(static_cast<std::size_t>(graph.num_nodes()), 0);
    for (int n : z) {
        graph.info(n);
        if (n == x || n == y) {
            throw GraphError("d_separated: x and y must not be conditioned on");
        }
        in_z[static_cast<std::size_t>(n)] = 1;
    }
    graph.info(x);
    graph.info(y);

    // Ancestral closure of Z: a collider is active iff it lies in this set.
    std::vector<char> anc(static_cast<std::size_t>(graph.num_nodes()), 0);
    std::deque<int> frontier(z.begin(), z.end());
    for (int n : z) anc[static_cast<std::size_t>(n)] = 1;
    while (!frontier.empty()) {
        int n = frontier.front();
        frontier.pop_front();
        for (int p : graph.parents(n)) {
            if (!anc[static_cast<std::size_t>(p)]) {
                anc[static_cast<std::size_t>(p)] = 1;
                frontier.push_back(p);
            }
        }
    }

    // Reachability over active trails; direction 0 = arrived from a child
    // (moving up), 1 = arrived from a parent (moving down).
    std::vector<std::array<char, 2>> visited(static_cast<std::size_t>(graph.num_nodes()), {0, 0});
    std::deque<std::pair<int, int>> queue;
    queue.emplace_back(x, 0);
    while (!queue.empty()) {
        auto [n, dir] = queue.front();
        queue.pop_front();
        if (visited[static_cast<std::size_t>(n)][static_cast<std::size_t>(dir)]) continue;
        visited[static_cast<std::size_t>(n)][static_cast<std::size_t>(dir)] = 1;
        if (n == y) return false;
        if (dir == 0) {
            if (!in_z[static_cast<std::size_t>(n)]) {
                for (int p : graph.parents(n)) queue.emplace_back(p, 0);
                for (int c : graph.children(n)) queue.emplace_back(c, 1);
            }
        } else {
            if (!in_z[static_cast<std::size_t>(n)]) {
                for (int c : graph.children(n)) queue.emplace_back(c, 1);
            }
            if (anc[static_cast<std::size_t>(n)]) {
                for (int p : graph.parents(n)) queue.emplace_back(p, 0);
            }
        }
    }
    return true;
}

double partial_correlation(const std::vector<double>& cov, int n, int x, int y,
                           const std::vector<int>& z) {
    if (x == y || x < 0 || y < 0 || x >= n || y >= n) {
        throw DomainError("partial_correlation: bad variable indices");
    }
    std::vector<int> sel{x, y};
    for (int v : z) {
        if (v == x || v == y) {
            throw DomainError("partial_correlation: conditioning set overlaps x or y");
        }
        if (v < 0 || v >= n) throw DomainError("partial_correlation: bad conditioning index");
        sel.push_back(v);
    }
    int k = static_cast<int>(sel.size());
    Eigen::MatrixXd sub(k, k);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            sub(i, j) = cov[static_cast<std::size_t>(sel[static_cast<std::size_t>(i)]) * static_cast<std::size_t>(n) + static_cast<std::size_t>(sel[static_cast<std::size_t>(j)])];
        }
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(sub);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(sub);
        double cond = svd.singularValues()(0) / std::max(svd.singularValues()(k - 1), 1e-300);
        throw NumericError("partial_correlation: singular submatrix (condition number " + std::to_string(cond) + ")");
    }
    Eigen::MatrixXd prec = ldlt.solve(Eigen::MatrixXd::Identity(k, k));
    double denom = std::sqrt(prec(0, 0) * prec(1, 1));
    if (!(denom > 0.0) || !std::isfinite(denom)) {
        throw NumericError("partial_correlation: non-positive precision diagonal");
    }
    return -prec(0, 1) / denom;
}

double empirical_partial_correlation(MatView data, int x, int y, const std::vector<int>& z) {
    std::vector<int> sel{x, y};
    sel.insert(sel.end(), z.begin(), z.end());
    int k = static_cast<int>(sel.size());
    std::vector<double> mean(static_cast<std::size_t>(k), 0.0);
    for (std::int64_t r = 0; r < data.rows; ++r) {
        for (int c = 0; c < k; ++c) mean[static_cast<std::size_t>(c)] += data.row(r)[sel[static_cast<std::size_t>(c)]];
    }
    for (double& m : mean) m /= static_cast<double>(data.rows);
    std::vector<double> cov(static_cast<std::size_t>(k * k), 0.0);
    for (std::int64_t r = 0; r < data.rows; ++r) {
        for (int i = 0; i < k; ++i) {
            double di = data.row(r)[sel[static_cast<std::size_t>(i)]] - mean[static_cast<std::size_t>(i)];
            for (int j = i; j < k; ++j) {
                double dj = data.row(r)[sel[static_cast<std::size_t>(j)]] - mean[static_cast<std::size_t>(j)];
                cov[static_cast<std::size_t>(i * k + j)] += di * dj;
            }
        }
    }
    for (int i = 0; i < k; ++i) {
        for (int j = i; j < k; ++j) {
            double v = cov[static_cast<std::size_t>(i * k + j)] / static_cast<double>(data.rows - 1);
            cov[static_cast<std::size_t>(i * k + j)] = v;
            cov[static_cast<std::size_t>(j * k + i)] = v;
        }
    }
    std::vector<int> zz;
    for (int c = 2; c < k; ++c) zz.push_back(c);
    return partial_correlation(cov, k, 0, 1, zz);
}

WindowCovariance::WindowCovariance(const GroundTruthModel& model, int window, double action_var) {
    if (!model.linear) {
        throw Error("exact_covariance requires a linear system");
    }
    const EnvSpec& spec = model.spec;
    dims_ = spec.dims;
    action_dim_ = spec.action_dim;
    lags_ = spec.lags;
    window_ = window;
    if (window < static_cast<int>(lags_) + 1) {
        throw GraphError("window must exceed the lag count");
    }

    std::int64_t ds = dims_.total();
    std::int64_t da = action_dim_;
    std::size_t vars = static_cast<std::size_t>(window) * static_cast<std::size_t>(ds + da + 1);
    // Roots: initial latents, every action entry, process noise per generated step.
    std::size_t roots_init = static_cast<std::size_t>(lags_ * ds);
    std::size_t roots_act = static_cast<std::size_t>(window) * static_cast<std::size_t>(da);
    std::size_t roots_noise = static_cast<std::size_t>(window - lags_) * static_cast<std::size_t>(ds);
    n_roots_ = roots_init + roots_act + roots_noise;
    dim_ = vars;
    coeff_.assign(vars * n_roots_, 0.0);
    root_var_.assign(n_roots_, 1.0);
    for (std::size_t i = 0; i < roots_act; ++i) root_var_[roots_init + i] = action_var;
    double s2 = spec.noise_std * spec.noise_std;
    for (std::size_t i = 0; i < roots_noise; ++i) root_var_[roots_init + roots_act + i] = s2;

    auto row = [&](int idx) { return coeff_.data() + static_cast<std::size_t>(idx) * n_roots_; };

    for (int t = 0; t < window; ++t) {
        for (std::int64_t m = 0; m < da; ++m) {
            row(a_index(t, m))[roots_init + static_cast<std::size_t>(t * da + m)] = 1.0;
        }
        if (t < static_cast<int>(lags_)) {
            for (std::int64_t i = 0; i < ds; ++i) {
                row(s_index(t, i))[static_cast<std::size_t>(t * ds + i)] = 1.0;
            }
        } else {
            for (int b = 0; b < 4; ++b) {
                std::int64_t d_b = dims_.dim(b);
                if (d_b == 0) continue;
                const Tensor& w = model.transitions[static_cast<std::size_t>(b)].weight(0);
                bool full = model.block_reads_full_history(b);
                bool acts = model.block_reads_actions(b);
                std::int64_t d_src = full ? ds : dims_.rew();
                for (std::int64_t j = 0; j < d_b; ++j) {
                    double* dst = row(s_index(t, dims_.offset(b) + j));
                    for (std::int64_t k = 0; k < lags_; ++k) {
                        int u = t - static_cast<int>(lags_) + static_cast<int>(k);
                        for (std::int64_t i = 0; i < d_src; ++i) {
                            double wv = w(k * d_src + i, j);
                            if (wv == 0.0) continue;
                            const double* src = row(s_index(u, i));
                            for (std::size_t c = 0; c < n_roots_; ++c) dst[c] += wv * src[c];
                        }
                        if (acts) {
                            for (std::int64_t m = 0; m < da; ++m) {
                                double wv = w(lags_ * d_src + k * da + m, j);
                                if (wv == 0.0) continue;
                                const double* src = row(a_index(u, m));
                                for (std::size_t c = 0; c < n_roots_; ++c) dst[c] += wv * src[c];
                            }
                        }
                    }
                    dst[roots_init + roots_act + static_cast<std::size_t>((t - lags_) * ds + dims_.offset(b) + j)] = 1.0;
                }
            }
        }
        if (dims_.rew() > 0) {
            const Tensor& w2 = model.reward_map.weight(0);
            double* dst = row(r_index(t));
            for (std::int64_t i = 0; i < dims_.rew(); ++i) {
                double wv = w2(i, 0);
                const double* src = row(s_index(t, i));
                for (std::size_t c = 0; c < n_roots_; ++c) dst[c] += wv * src[c];
            }
        }
    }
    rebuild_cov();
}

void WindowCovariance::check_time(int t) const {
    if (t < 0 || t >= window_) {
        throw GraphError("time index " + std::to_string(t) + " outside window");
    }
}

int WindowCovariance::s_index(int t, std::int64_t dim) const {
    check_time(t);
    if (dim < 0 || dim >= dims_.total()) throw GraphError("bad latent dim");
    return t * static_cast<int>(dims_.total() + action_dim_ + 1) + static_cast<int>(dim);
}

int WindowCovariance::a_index(int t, std::int64_t dim) const {
    check_time(t);
    if (dim < 0 || dim >= action_dim_) throw GraphError("bad action dim");
    return t * static_cast<int>(dims_.total() + action_dim_ + 1) + static_cast<int>(dims_.total() + dim);
}

int WindowCovariance::r_index(int t) const {
    check_time(t);
    return t * static_cast<int>(dims_.total() + action_dim_ + 1) + static_cast<int>(dims_.total() + action_dim_);
}

int WindowCovariance::append_cum_return(int t0, double gamma, std::int64_t horizon) {
    check_time(t0);
    if (t0 + static_cast<int>(horizon) - 1 >= window_) {
        throw GraphError("cumulative return exceeds the window");
    }
    std::vector<double> new_row(n_roots_, 0.0);
    double wgt = 1.0;
    for (std::int64_t k = 0; k < horizon; ++k) {
        const double* src = coeff_.data() + static_cast<std::size_t>(r_index(t0 + static_cast<int>(k))) * n_roots_;
        for (std::size_t c = 0; c < n_roots_; ++c) new_row[c] += wgt * src[c];
        wgt *= gamma;
    }
    coeff_.insert(coeff_.end(), new_row.begin(), new_row.end());
    dim_ += 1;
    rebuild_cov();
    return static_cast<int>(dim_) - 1;
}

void WindowCovariance::rebuild_cov() {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        coeff_.data(), static_cast<Eigen::Index>(dim_), static_cast<Eigen::Index>(n_roots_));
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(root_var_.data(), static_cast<Eigen::Index>(n_roots_));
    Eigen::MatrixXd cov = m * v.asDiagonal() * m.transpose();
    cov_.resize(dim_ * dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
        for (std::size_t j = 0; j < dim_; ++j) {
            cov_[i * dim_ + j] = cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
    }
}

double WindowCovariance::partial_corr(int x, int y, const std::vector<int>& z) const {
    return partial_correlation(cov_, static_cast<int>(dim_), x, y, z);
}

WindowCovariance exact_covariance(const GroundTruthModel& linear_system, int window, double action_var) {
    return WindowCovariance(linear_system, window, action_var);
}

ClassificationResult classify_dimensions(const GroundTruthModel& linear_system,
                                         const CiTestConfig& config) {
    const EnvSpec& spec = linear_system.spec;
    std::int64_t ds = spec.dims.total();
    std::int64_t da = spec.action_dim;
    int t0 = static_cast<int>(spec.lags) + 1;
    int window = t0 + static_cast<int>(config.horizon);

    WindowCovariance wc(linear_system, window, config.action_var);
    int r_var = wc.append_cum_return(t0, config.gamma, config.horizon);
    TemplateGraph graph = TemplateGraph::unroll(spec.dims, spec.lags, config.horizon, window);
    int r_node = graph.cum_reward(t0);

    ClassificationResult out;
    out.threshold = config.threshold;
    out.dims.resize(static_cast<std::size_t>(ds));

    // Controllability: s_{i,t0} vs a_{t0-1} given the lagged latent window.
    {
        std::vector<int> z_cov, z_graph;
        for (int u = t0 - static_cast<int>(spec.lags); u < t0; ++u) {
            for (std::int64_t i = 0; i < ds; ++i) {
                z_cov.push_back(wc.s_index(u, i));
                z_graph.push_back(graph.latent(u, i));
            }
        }
        for (std::int64_t i = 0; i < ds; ++i) {
            double stat = 0.0;
            for (std::int64_t m = 0; m < da; ++m) {
                stat = std::max(stat, std::abs(wc.partial_corr(wc.s_index(t0, i), wc.a_index(t0 - 1, m), z_cov)));
            }
            DimensionVerdict& v = out.dims[static_cast<std::size_t>(i)];
            v.ctrl_stat = stat;
            v.controllable = stat > config.threshold;
            v.dsep_ctrl_dependent = !d_separated(graph, graph.latent(t0, i), graph.action(t0 - 1), z_graph);
        }
    }

    // Reward relevance: fixpoint over the conditioning set s^rew_{t0-tau:t0-1}.
    std::vector<char> in_set(static_cast<std::size_t>(ds), 1);
    int iterations = 0;
    bool stable = false;
    std::vector<double> stats(static_cast<std::size_t>(ds), 0.0);
    while (iterations <= ds) {
        ++iterations;
        std::vector<int> z_cov;
        for (int u = t0 - static_cast<int>(spec.lags); u < t0; ++u) {
            for (std::int64_t m = 0; m < da; ++m) z_cov.push_back(wc.a_index(u, m));
            for (std::int64_t i = 0; i < ds; ++i) {
                if (in_set[static_cast<std::size_t>(i)]) z_cov.push_back(wc.s_index(u, i));
            }
        }
        if (config.include_current_action) {
            for (std::int64_t m = 0; m < da; ++m) z_cov.push_back(wc.a_index(t0, m));
        }
        std::vector<char> next(static_cast<std::size_t>(ds), 0);
        for (std::int64_t i = 0; i < ds; ++i) {
            stats[static_cast<std::size_t>(i)] = std::abs(wc.partial_corr(wc.s_index(t0, i), r_var, z_cov));
            next[static_cast<std::size_t>(i)] = stats[static_cast<std::size_t>(i)] > config.threshold ? 1 : 0;
        }
        if (next == in_set) {
            stable = true;
            break;
        }
        in_set = next;
    }
    if (!stable) {
        throw EvalError("classify_dimensions: reward-relevance fixpoint did not converge within " + std::to_string(ds) + " iterations");
    }
    out.fixpoint_iterations = iterations;

    {
        std::vector<int> z_graph;
        for (int u = t0 - static_cast<int>(spec.lags); u < t0; ++u) {
            z_graph.push_back(graph.action(u));
            for (std::int64_t i = 0; i < ds; ++i) {
                if (in_set[static_cast<std::size_t>(i)]) z_graph.push_back(graph.latent(u, i));
            }
        }
        if (config.include_current_action) {
            z_graph.push_back(graph.action(t0));
        }
        for (std::int64_t i = 0; i < ds; ++i) {
            DimensionVerdict& v = out.dims[static_cast<std::size_t>(i)];
            v.reward_stat = stats[static_cast<std::size_t>(i)];
            v.reward_relevant = in_set[static_cast<std::size_t>(i)] != 0;
            v.dsep_reward_dependent = !d_separated(graph, graph.latent(t0, i), r_node, z_graph);
        }
    }

    out.oracle_agreement = true;
    for (const DimensionVerdict& v : out.dims) {
        if (v.reward_relevant != v.dsep_reward_dependent || v.controllable != v.dsep_ctrl_dependent) {
            out.oracle_agreement = false;
        }
    }
    return out;
}

ClassificationRun classify_with_resampling(EnvSpec spec, const CiTestConfig& config,
                                           int max_attempts) {
    std::uint64_t base_seed = spec.seed;
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        spec.seed = attempt == 0 ? base_seed : mix64(base_seed + static_cast<std::uint64_t>(attempt));
        ClassificationRun run;
        run.model = make_linear_system(spec);
        run.result = classify_dimensions(run.model, config);
        run.resamples = attempt;
        if (run.result.oracle_agreement) {
            return run;
        }
        std::fprintf(stderr, "classify_with_resampling: faithfulness violation at seed %llu, resampling\n",
                     static_cast<unsigned long long>(spec.seed));
    }
    throw EvalError("classify_with_resampling: no faithful draw in " + std::to_string(max_attempts) + " attempts");
}

} // namespace fwm
