#pragma once

#include "factorwm/mi.hpp"
#include "factorwm/world_model.hpp"

#include <string>
#include <vector>

namespace fwm {

/// Latent feature subsets a policy may consume. Blocks are stored in the
/// order (ctrl_rew, unctrl_rew, ctrl_free, noise), so every selector is a
/// contiguous slice of the latent vector.
enum class FeatureSet {
    ctrl_rew,           // s^ar
    rew,                // s^r = (s^ar, s^abar_r)
    free,               // s^rbar = (s^a_rbar, s^abar_rbar)
    rew_plus_ctrl_free, // s^r + s^a_rbar
    all,
};

const char* feature_set_name(FeatureSet f);
FeatureSet feature_set_from_name(const std::string& name);

/// [offset, width) slice of the latent vector for a selector; throws
/// ConfigError when the selector has zero width for these dims.
std::pair<std::int64_t, std::int64_t> feature_slice(FeatureSet f, const BlockDims& dims);

/// Shaped control task: same generative wiring, reward replaced by
/// -|s^rew|^2 (optimal play regulates the reward blocks toward zero) and the
/// action inputs of the ctrl_rew transition scaled up so actions move the
/// state by a clearly measurable margin.
struct ControlTask {
    GroundTruthModel model;
    double action_gain = 2.0;
};

ControlTask make_control_task(const EnvSpec& spec, double action_gain = 2.0);

struct ActorCritic {
    Mlp actor;  // features -> action logits
    Mlp critic; // features -> value
    FeatureSet features = FeatureSet::rew;
};

struct PolicyConfig {
    std::int64_t horizon = 8; // imagination length
    double gamma = 0.95;
    std::int64_t iterations = 400;
    std::int64_t batch = 128;        // imagined starts per iteration
    double actor_lr = 3e-3;
    double critic_lr = 1e-2;
    std::int64_t hidden = 64;
    std::int64_t layers = 2;
    double entropy_bonus = 0.01;
    std::int64_t episode_len = 100;
};

/// tau-step state needed to roll the learned prior forward.
struct ImaginationStart {
    std::vector<Tensor> latent_hist; // lags entries [B, d_s], oldest..newest
    std::vector<Tensor> action_hist; // lags-1 real actions; the newest action comes from the actor
};

struct ImaginedTrajectory {
    std::vector<Tensor> features;     // per decision step [B, f]
    std::vector<std::vector<int>> actions;
    std::vector<Tensor> rewards;      // reward of the state reached after each action, [B]
    Tensor bootstrap_features;        // features of the final state
    std::vector<Tensor> full_latents; // latent after each action (diagnostics)
};

/// Rolls the learned prior under the actor for `horizon` steps starting from
/// posterior states. Pure evaluation (no gradients); deterministic given rng.
ImaginedTrajectory imagine(const WorldModel& wm, const ImaginationStart& start,
                           const ActorCritic& ac, std::int64_t horizon, RngStream& rng);

struct PolicyCurvePoint {
    std::int64_t iteration;
    double mean_imagined_return;
};

struct TrainedPolicy {
    ActorCritic ac;
    std::vector<PolicyCurvePoint> curve;
};

/// REINFORCE with a learned baseline over imagined trajectories. Start
/// states are drawn from posterior-filtered steps of `data`.
TrainedPolicy train_policy(const WorldModel& wm, const ControlTask& task,
                           const TrajectoryBatch& data, FeatureSet selector,
                           const PolicyConfig& config, std::uint64_t seed);

/// Same algorithm on real-environment episodes with ground-truth latent
/// features; the reference the imagination policy is scored against.
TrainedPolicy train_policy_on_env(const ControlTask& task, FeatureSet selector,
                                  const PolicyConfig& config, std::uint64_t seed);

struct PolicyEvaluation {
    double mean_return = 0.0;
    double stderr_return = 0.0; // absent (NaN) when n_episodes < 2
    std::vector<double> returns;
};

/// Real-environment rollouts; the actor sees posterior-mean features filtered
/// from observations. Pass wm = nullptr to feed ground-truth latent features
/// (oracle evaluation). n_episodes >= 1; deterministic given seed.
PolicyEvaluation evaluate_policy(const WorldModel* wm, const ActorCritic& ac,
                                 const ControlTask& task, std::int64_t n_episodes,
                                 std::int64_t episode_len, std::uint64_t seed);

/// Uniform-random baseline on the same episode stream.
PolicyEvaluation evaluate_random_policy(const ControlTask& task, std::int64_t n_episodes,
                                        std::int64_t episode_len, std::uint64_t seed);

} // namespace fwm
