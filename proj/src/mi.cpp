#include "factorwm/mi.hpp"

#include <cmath>
#include <numeric>

namespace fwm {

DVCritic::DVCritic(std::string name, std::int64_t input_width, RngStream& rng,
                   std::int64_t hidden, int layers, double slope) {
    std::vector<std::int64_t> widths{std::max<std::int64_t>(input_width, 1)};
    for (int l = 1; l < layers; ++l) widths.push_back(hidden);
    widths.push_back(1);
    net = Mlp(std::move(name), widths, slope, Activation::none, rng);
}

Tensor dv_bound(const DVCritic& critic, const Tensor& joint, const Tensor& marginal,
                Tape* param_tape) {
    if (joint.rows() < 2 || marginal.rows() < 2) {
        throw EvalError("dv_bound needs at least two joint and two marginal samples");
    }
    if (joint.cols() != marginal.cols()) {
        throw ShapeError("dv_bound: joint width " + std::to_string(joint.cols()) + " != marginal width " + std::to_string(marginal.cols()));
    }
    Tensor t_joint = critic.net.forward(joint, param_tape);
    Tensor t_marg = critic.net.forward(marginal, param_tape);
    t_joint = reshape(t_joint, {t_joint.rows()});
    t_marg = reshape(t_marg, {t_marg.rows()});
    // log mean exp with max shift; the shift is gradient-free and exact
    // because the bound is invariant to adding constants to the critic.
    double shift = max_all(t_marg);
    Tensor log_mean = add_scalar(log(mean_all(exp(add_scalar(t_marg, -shift)))), shift);
    return sub(mean_all(t_joint), log_mean);
}

std::vector<std::int64_t> derangement(std::int64_t n, RngStream& rng) {
    if (n < 2) {
        throw EvalError("derangement needs n >= 2");
    }
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    // Sattolo's algorithm: a uniform cyclic permutation, hence fixed-point free.
    for (std::int64_t i = n - 1; i > 0; --i) {
        std::int64_t j = rng.uniform_int(static_cast<int>(i));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    return perm;
}

ReturnWindow compute_returns(const std::vector<double>& rewards, std::int64_t n,
                             std::int64_t steps, double gamma, std::int64_t horizon) {
    if (horizon < 1) {
        throw DomainError("compute_returns: horizon must be at least 1");
    }
    if (horizon > steps) {
        throw DomainError("compute_returns: horizon " + std::to_string(horizon) + " exceeds trajectory length " + std::to_string(steps));
    }
    if (static_cast<std::int64_t>(rewards.size()) != n * steps) {
        throw ShapeError("compute_returns: rewards size mismatch");
    }
    ReturnWindow out;
    out.gamma = gamma;
    out.horizon = horizon;
    out.n = n;
    out.valid_steps = steps - horizon + 1;
    out.values.assign(static_cast<std::size_t>(n * out.valid_steps), 0.0);
    for (std::int64_t traj = 0; traj < n; ++traj) {
        const double* r = rewards.data() + traj * steps;
        double* dst = out.values.data() + traj * out.valid_steps;
        for (std::int64_t t = 0; t < out.valid_steps; ++t) {
            double acc = 0.0;
            double w = 1.0;
            for (std::int64_t k = 0; k < horizon; ++k) {
                acc += w * r[t + k];
                w *= gamma;
            }
            dst[t] = acc;
        }
    }
    return out;
}

std::vector<Parameter*> Critics::parameters() {
    std::vector<Parameter*> ps;
    for (DVCritic* c : {&c1, &c2, &c3, &c4}) {
        auto v = c->net.parameters();
        ps.insert(ps.end(), v.begin(), v.end());
    }
    return ps;
}

Critics make_critics(const BlockDims& dims, std::int64_t action_dim,
                     bool include_current_action, RngStream& rng) {
    std::int64_t act_w = action_dim * (include_current_action ? 2 : 1);
    std::int64_t dr = dims.rew();
    std::int64_t ds = dims.total();
    Critics out;
    out.c1 = DVCritic("mi_c1", 1 + dr + act_w + dr, rng);
    out.c2 = DVCritic("mi_c2", 1 + (ds - dr) + act_w + dr, rng);
    out.c3 = DVCritic("mi_c3", action_dim + dims.ctrl() + ds, rng);
    out.c4 = DVCritic("mi_c4", action_dim + (ds - dims.ctrl()) + ds, rng);
    return out;
}

namespace {

struct BoundPair {
    Tensor i_rs_pos, i_rs_neg, i_as_pos, i_as_neg;
};

// Assembles all four joint/marginal pairs and evaluates the bounds.
// detach: cut gradients into the state tensors (critic-training phase).
BoundPair all_bounds(const Critics& critics, const MiBatch& batch,
                     const std::vector<std::int64_t>& perm, Tape* param_tape,
                     bool detach) {
    auto maybe_detach = [&](const Tensor& t) { return detach ? stop_gradient(t) : t; };
    Tensor ret = batch.returns;
    Tensor ret_perm = gather_rows(batch.returns, perm);
    Tensor act_perm = gather_rows(batch.action_prev, perm);

    Tensor j1 = concat_cols({ret, maybe_detach(batch.rew_state), batch.action_prev, batch.rew_hist});
    Tensor m1 = concat_cols({ret_perm, maybe_detach(batch.rew_state), batch.action_prev, batch.rew_hist});
    Tensor j2 = concat_cols({ret, maybe_detach(batch.free_state), batch.action_prev, batch.rew_hist});
    Tensor m2 = concat_cols({ret_perm, maybe_detach(batch.free_state), batch.action_prev, batch.rew_hist});
    Tensor j3 = concat_cols({batch.action_prev, maybe_detach(batch.ctrl_state), batch.state_hist});
    Tensor m3 = concat_cols({act_perm, maybe_detach(batch.ctrl_state), batch.state_hist});
    Tensor j4 = concat_cols({batch.action_prev, maybe_detach(batch.unctrl_state), batch.state_hist});
    Tensor m4 = concat_cols({act_perm, maybe_detach(batch.unctrl_state), batch.state_hist});

    BoundPair out;
    out.i_rs_pos = dv_bound(critics.c1, j1, m1, param_tape);
    out.i_rs_neg = dv_bound(critics.c2, j2, m2, param_tape);
    out.i_as_pos = dv_bound(critics.c3, j3, m3, param_tape);
    out.i_as_neg = dv_bound(critics.c4, j4, m4, param_tape);
    return out;
}

} // namespace

JrsResult j_rs(const Critics& critics, const MiBatch& batch,
               const std::vector<std::int64_t>& perm, double lambda1) {
    if (lambda1 < 0.0) {
        throw ConfigError("lambda1 must be non-negative");
    }
    JrsResult out;
    if (lambda1 == 0.0) {
        return out; // contributes exactly nothing
    }
    Tensor ret_perm = gather_rows(batch.returns, perm);
    Tensor j1 = concat_cols({batch.returns, batch.rew_state, batch.action_prev, batch.rew_hist});
    Tensor m1 = concat_cols({ret_perm, batch.rew_state, batch.action_prev, batch.rew_hist});
    Tensor j2 = concat_cols({batch.returns, batch.free_state, batch.action_prev, batch.rew_hist});
    Tensor m2 = concat_cols({ret_perm, batch.free_state, batch.action_prev, batch.rew_hist});
    Tensor i1 = dv_bound(critics.c1, j1, m1, nullptr);
    Tensor i2 = dv_bound(critics.c2, j2, m2, nullptr);
    out.i1 = i1.value();
    out.i2 = i2.value();
    out.value = mul_scalar(sub(i1, i2), lambda1);
    return out;
}

JasResult j_as(const Critics& critics, const MiBatch& batch,
               const std::vector<std::int64_t>& perm, double lambda2) {
    if (lambda2 < 0.0) {
        throw ConfigError("lambda2 must be non-negative");
    }
    JasResult out;
    if (lambda2 == 0.0) {
        return out;
    }
    Tensor act_perm = gather_rows(batch.action_prev, perm);
    Tensor j3 = concat_cols({batch.action_prev, batch.ctrl_state, batch.state_hist});
    Tensor m3 = concat_cols({act_perm, batch.ctrl_state, batch.state_hist});
    Tensor j4 = concat_cols({batch.action_prev, batch.unctrl_state, batch.state_hist});
    Tensor m4 = concat_cols({act_perm, batch.unctrl_state, batch.state_hist});
    Tensor i3 = dv_bound(critics.c3, j3, m3, nullptr);
    Tensor i4 = dv_bound(critics.c4, j4, m4, nullptr);
    out.i3 = i3.value();
    out.i4 = i4.value();
    out.value = mul_scalar(sub(i3, i4), lambda2);
    return out;
}

MiValues critic_step(Critics& critics, AdamW& optimizer, const MiBatch& batch,
                     const std::vector<std::int64_t>& perm) {
    Tape tape;
    BoundPair bounds = all_bounds(critics, batch, perm, &tape, /*detach=*/true);
    MiValues values{bounds.i_rs_pos.value(), bounds.i_rs_neg.value(),
                    bounds.i_as_pos.value(), bounds.i_as_neg.value()};
    // Each critic maximizes its own bound; the sum decouples because the
    // parameter sets are disjoint.
    Tensor loss = neg(add(add(bounds.i_rs_pos, bounds.i_rs_neg),
                          add(bounds.i_as_pos, bounds.i_as_neg)));
    tape.backward(loss);
    optimizer.step(tape);
    return values;
}

MiValues evaluate_bounds(const Critics& critics, const MiBatch& batch,
                         const std::vector<std::int64_t>& perm) {
    BoundPair bounds = all_bounds(critics, batch, perm, nullptr, /*detach=*/true);
    return MiValues{bounds.i_rs_pos.value(), bounds.i_rs_neg.value(),
                    bounds.i_as_pos.value(), bounds.i_as_neg.value()};
}

} // namespace fwm
