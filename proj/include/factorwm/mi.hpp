#pragma once

#include "factorwm/adamw.hpp"
#include "factorwm/nn.hpp"
#include "factorwm/rng.hpp"
#include "factorwm/synth_env.hpp"

#include <cstdint>
#include <vector>

namespace fwm {

/// Donsker-Varadhan critic: scalar-output MLP over joint samples. The usual
/// sizing is 4 layers, hidden width 128.
struct DVCritic {
    Mlp net;

    DVCritic() = default;
    DVCritic(std::string name, std::int64_t input_width, RngStream& rng,
             std::int64_t hidden = 128, int layers = 4, double slope = 0.01);
};

/// mean_joint[T] - log mean_marginal[exp T], stabilized by subtracting the
/// max critic output before exponentiation (exact: the bound is invariant to
/// critic shifts). param_tape trains the critic; pass nullptr to hold it
/// fixed while gradients flow into the samples.
Tensor dv_bound(const DVCritic& critic, const Tensor& joint, const Tensor& marginal,
                Tape* param_tape);

/// Fixed-point-free in-batch permutation (Sattolo's cycle), used to turn
/// joint samples into marginal pairs.
std::vector<std::int64_t> derangement(std::int64_t n, RngStream& rng);

/// Truncated discounted return R_t = sum_{k<horizon} gamma^k r_{t+k},
/// defined for t <= steps - horizon.
struct ReturnWindow {
    double gamma = 0.95;
    std::int64_t horizon = 20;
    std::int64_t n = 0;
    std::int64_t valid_steps = 0; // steps - horizon + 1
    std::vector<double> values;   // [n, valid_steps]

    double at(std::int64_t traj, std::int64_t t) const {
        return values[static_cast<std::size_t>(traj * valid_steps + t)];
    }
};

ReturnWindow compute_returns(const std::vector<double>& rewards, std::int64_t n,
                             std::int64_t steps, double gamma, std::int64_t horizon);

/// Aligned per-sample tensors for the two constraint objectives. Conditioning
/// history entries arrive already stop-gradient'ed by the builder.
struct MiBatch {
    Tensor returns;     // [m, 1] constant
    Tensor rew_state;   // [m, d_rew] tracked
    Tensor free_state;  // [m, d_free] tracked
    Tensor ctrl_state;  // [m, d_ctrl] tracked
    Tensor unctrl_state;// [m, d_unctrl] tracked
    Tensor action_prev; // [m, d_a] constant (optionally with a_t appended)
    Tensor rew_hist;    // [m, d_rew] sg(s^rew_{t-1})
    Tensor state_hist;  // [m, d_s]   sg(s_{t-1})
    std::int64_t size() const { return returns.rows(); }
};

struct MiValues {
    double i1 = 0.0, i2 = 0.0, i3 = 0.0, i4 = 0.0;
    double gap_rs() const { return i1 - i2; }
    double gap_as() const { return i3 - i4; }
};

struct Critics {
    DVCritic c1, c2, c3, c4;
    std::vector<Parameter*> parameters();
};

/// Builds the four critics for the given dimensions. Input layouts:
///   c1: [R | s^rew | a_{t-1}(,a_t) | sg s^rew_{t-1}]
///   c2: [R | s^free | a_{t-1}(,a_t) | sg s^rew_{t-1}]
///   c3: [a_{t-1} | s^ctrl | sg s_{t-1}]
///   c4: [a_{t-1} | s^unctrl | sg s_{t-1}]
Critics make_critics(const BlockDims& dims, std::int64_t action_dim,
                     bool include_current_action, RngStream& rng);

struct JrsResult {
    Tensor value; // lambda1 * (I1 - I2); undefined tensor when lambda1 == 0
    double i1 = 0.0;
    double i2 = 0.0;
};

struct JasResult {
    Tensor value;
    double i3 = 0.0;
    double i4 = 0.0;
};

/// J_RS with frozen critics: gradients flow into the block samples only.
/// `perm` pairs the permuted return column against intact conditioning rows.
JrsResult j_rs(const Critics& critics, const MiBatch& batch,
               const std::vector<std::int64_t>& perm, double lambda1);

JasResult j_as(const Critics& critics, const MiBatch& batch,
               const std::vector<std::int64_t>& perm, double lambda2);

/// One critic ascent step on all four bounds (inputs detached); returns the
/// bound values seen before the update.
MiValues critic_step(Critics& critics, AdamW& optimizer, const MiBatch& batch,
                     const std::vector<std::int64_t>& perm);

/// Bound values with everything frozen (diagnostics).
MiValues evaluate_bounds(const Critics& critics, const MiBatch& batch,
                         const std::vector<std::int64_t>& perm);

} // namespace fwm
