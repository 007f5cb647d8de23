#include "factorwm/policy.hpp"

#include "factorwm/ident_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fwm {

const char* feature_set_name(FeatureSet f) {
    switch (f) {
        case FeatureSet::ctrl_rew: return "ctrl_rew";
        case FeatureSet::rew: return "rew";
        case FeatureSet::free: return "free";
        case FeatureSet::rew_plus_ctrl_free: return "rew_plus_ctrl_free";
        case FeatureSet::all: return "all";
    }
    return "?";
}

FeatureSet feature_set_from_name(const std::string& name) {
    for (FeatureSet f : {FeatureSet::ctrl_rew, FeatureSet::rew, FeatureSet::free,
                         FeatureSet::rew_plus_ctrl_free, FeatureSet::all}) {
        if (name == feature_set_name(f)) return f;
    }
    throw ConfigError("unknown feature selector '" + name + "'");
}

std::pair<std::int64_t, std::int64_t> feature_slice(FeatureSet f, const BlockDims& dims) {
    std::int64_t off = 0, width = 0;
    switch (f) {
        case FeatureSet::ctrl_rew:
            off = 0;
            width = dims.ctrl_rew;
            break;
        case FeatureSet::rew:
            off = 0;
            width = dims.rew();
            break;
        case FeatureSet::free:
            off = dims.rew();
            width = dims.total() - dims.rew();
            break;
        case FeatureSet::rew_plus_ctrl_free:
            off = 0;
            width = dims.rew() + dims.ctrl_free;
            break;
        case FeatureSet::all:
            off = 0;
            width = dims.total();
            break;
    }
    if (width <= 0) {
        throw ConfigError(std::string("feature selector ") + feature_set_name(f) + " has zero width for these block dims");
    }
    return {off, width};
}

ControlTask make_control_task(const EnvSpec& spec, double action_gain) {
    ControlTask task;
    task.model = sample_ground_truth(spec);
    task.model.reward_kind = RewardKind::negative_sq_rew;
    task.action_gain = action_gain;
    Mlp& g1 = task.model.transitions[kCtrlRew];
    if (g1.num_layers() > 0 && spec.dims.ctrl_rew > 0) {
        std::int64_t d_lat = spec.lags * spec.dims.rew();
        Tensor& w = g1.weight(0);
        std::vector<double>& v = w.raw();
        std::int64_t in = w.shape()[0], out = w.shape()[1];
        for (std::int64_t i = d_lat; i < in; ++i) {
            for (std::int64_t j = 0; j < out; ++j) {
                v[static_cast<std::size_t>(i * out + j)] *= action_gain;
            }
        }
    }
    return task;
}

namespace {

int sample_categorical(const double* logits, std::int64_t k, RngStream& rng) {
    double m = *std::max_element(logits, logits + k);
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(logits[j] - m);
    double u = rng.uniform() * z;
    double acc = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
        acc += std::exp(logits[j] - m);
        if (u < acc) return static_cast<int>(j);
    }
    return static_cast<int>(k - 1);
}

ActorCritic make_actor_critic(FeatureSet selector, const BlockDims& dims,
                              std::int64_t action_dim, const PolicyConfig& config,
                              RngStream& rng) {
    auto [off, width] = feature_slice(selector, dims);
    (void)off;
    std::vector<std::int64_t> actor_w{width};
    std::vector<std::int64_t> critic_w{width};
    for (std::int64_t l = 0; l < config.layers; ++l) {
        actor_w.push_back(config.hidden);
        critic_w.push_back(config.hidden);
    }
    actor_w.push_back(action_dim);
    critic_w.push_back(1);
    ActorCritic ac;
    ac.features = selector;
    ac.actor = Mlp("actor", actor_w, 0.01, Activation::none, rng);
    ac.critic = Mlp("value", critic_w, 0.01, Activation::none, rng);
    return ac;
}

Tensor one_hot_rows(const std::vector<int>& idx, std::int64_t k) {
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(idx.size()), k});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.raw()[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(idx[i])] = 1.0;
    }
    return out;
}

} // namespace

ImaginedTrajectory imagine(const WorldModel& wm, const ImaginationStart& start,
                           const ActorCritic& ac, std::int64_t horizon, RngStream& rng) {
    if (horizon < 1) {
        throw DomainError("imagine: horizon must be at least 1");
    }
    const WorldModelConfig& cfg = wm.config();
    std::int64_t lags = cfg.lags;
    if (static_cast<std::int64_t>(start.latent_hist.size()) != lags ||
        static_cast<std::int64_t>(start.action_hist.size()) != lags - 1) {
        throw Error("imagine: start state needs lags latents and lags-1 actions");
    }
    auto [off, width] = feature_slice(ac.features, cfg.dims);
    std::int64_t B = start.latent_hist[0].rows();

    std::vector<Tensor> lat_hist = start.latent_hist;
    std::vector<Tensor> act_hist = start.action_hist;
    ImaginedTrajectory out;
    for (std::int64_t k = 0; k < horizon; ++k) {
        Tensor features = slice_cols(lat_hist.back(), off, off + width);
        Tensor logits = ac.actor.forward(features, nullptr);
        std::vector<int> actions(static_cast<std::size_t>(B));
        for (std::int64_t b = 0; b < B; ++b) {
            actions[static_cast<std::size_t>(b)] =
                sample_categorical(logits.data().data() + b * cfg.action_dim, cfg.action_dim, rng);
        }
        act_hist.push_back(one_hot_rows(actions, cfg.action_dim));

        std::vector<Tensor> lat_in(lat_hist.end() - lags, lat_hist.end());
        std::vector<Tensor> act_in(act_hist.end() - lags, act_hist.end());
        LatentBlocks next = wm.prior(nullptr, lat_in, act_in, wm.draw_eps(B, rng));
        Tensor next_full = next.full_sample();
        Tensor reward = wm.decode_reward(nullptr, next.rew_sample());

        out.features.push_back(std::move(features));
        out.actions.push_back(std::move(actions));
        out.rewards.push_back(std::move(reward));
        out.full_latents.push_back(next_full);
        lat_hist.push_back(next_full);
    }
    out.bootstrap_features = slice_cols(lat_hist.back(), off, off + width);
    return out;
}

namespace {

struct ReinforceBatch {
    Tensor features;   // [m, f]
    std::vector<int> actions;
    std::vector<double> returns; // [m]
};

// Shared policy-gradient update: REINFORCE with learned baseline.
void reinforce_update(ActorCritic& ac, AdamW& optimizer, const ReinforceBatch& batch,
                      double entropy_bonus) {
    std::int64_t m = batch.features.rows();
    Tensor v = ac.critic.forward(batch.features.detached(), nullptr);
    Tensor returns = Tensor::from({m}, batch.returns);
    std::vector<double> adv(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        adv[static_cast<std::size_t>(i)] = batch.returns[static_cast<std::size_t>(i)] - v(i, 0);
    }
    Tensor adv_t = Tensor::from({m}, adv);

    Tape tape;
    Tensor logits = ac.actor.forward(batch.features, &tape);
    Tensor logp = categorical_log_prob(logits, batch.actions);
    Tensor actor_loss = neg(mean_all(mul(logp, adv_t)));
    if (entropy_bonus > 0.0) {
        Tensor lsm = log_softmax(logits);
        Tensor entropy = neg(row_sum(mul(exp(lsm), lsm)));
        actor_loss = sub(actor_loss, mul_scalar(mean_all(entropy), entropy_bonus));
    }
    Tensor values = reshape(ac.critic.forward(batch.features, &tape), {m});
    Tensor critic_loss = mean_all(square(sub(values, returns)));
    Tensor loss = add(actor_loss, critic_loss);
    tape.backward(loss);
    optimizer.step(tape);
}

} // namespace

TrainedPolicy train_policy(const WorldModel& wm, const ControlTask& task,
                           const TrajectoryBatch& data, FeatureSet selector,
                           const PolicyConfig& config, std::uint64_t seed) {
    RngStream rng(seed, 0x9011C7);
    TrainedPolicy out;
    out.ac = make_actor_critic(selector, wm.config().dims, wm.config().action_dim, config, rng);
    AdamWConfig opt_cfg{config.actor_lr, 0.9, 0.999, 1e-8, 0.0};
    std::vector<Parameter*> params = out.ac.actor.parameters();
    {
        auto cv = out.ac.critic.parameters();
        params.insert(params.end(), cv.begin(), cv.end());
    }
    AdamW optimizer(params, opt_cfg);

    std::vector<double> means = posterior_mean_latents(wm, data);
    std::int64_t ds = wm.config().dims.total();
    std::int64_t lags = wm.config().lags;

    for (std::int64_t iter = 0; iter < config.iterations; ++iter) {
        std::int64_t B = config.batch;
        ImaginationStart start;
        start.latent_hist.assign(static_cast<std::size_t>(lags), Tensor());
        start.action_hist.assign(static_cast<std::size_t>(lags - 1), Tensor());
        std::vector<std::pair<std::int64_t, std::int64_t>> picks;
        for (std::int64_t b = 0; b < B; ++b) {
            std::int64_t traj = rng.uniform_int(static_cast<int>(data.n));
            std::int64_t t = lags + rng.uniform_int(static_cast<int>(data.steps - lags));
            picks.emplace_back(traj, t);
        }
        for (std::int64_t k = 0; k < lags; ++k) {
            Tensor lat = Tensor::zeros({B, ds});
            for (std::int64_t b = 0; b < B; ++b) {
                auto [traj, t] = picks[static_cast<std::size_t>(b)];
                std::int64_t src = t - lags + 1 + k;
                std::copy_n(means.begin() + (traj * data.steps + src) * ds, ds, lat.raw().begin() + b * ds);
            }
            start.latent_hist[static_cast<std::size_t>(k)] = std::move(lat);
            if (k < lags - 1) {
                Tensor act = Tensor::zeros({B, data.action_dim});
                for (std::int64_t b = 0; b < B; ++b) {
                    auto [traj, t] = picks[static_cast<std::size_t>(b)];
                    std::int64_t src = t - lags + 1 + k;
                    std::copy_n(data.action_at(traj, src), data.action_dim, act.raw().begin() + b * data.action_dim);
                }
                start.action_hist[static_cast<std::size_t>(k)] = std::move(act);
            }
        }

        ImaginedTrajectory traj = imagine(wm, start, out.ac, config.horizon, rng);

        // Discounted returns with a bootstrapped tail value.
        Tensor v_last = out.ac.critic.forward(traj.bootstrap_features, nullptr);
        std::int64_t H = config.horizon;
        std::vector<std::vector<double>> g(static_cast<std::size_t>(H), std::vector<double>(static_cast<std::size_t>(B)));
        for (std::int64_t b = 0; b < B; ++b) {
            double acc = v_last(b, 0);
            for (std::int64_t k = H - 1; k >= 0; --k) {
                acc = traj.rewards[static_cast<std::size_t>(k)](b) + config.gamma * acc;
                g[static_cast<std::size_t>(k)][static_cast<std::size_t>(b)] = acc;
            }
        }

        ReinforceBatch rb;
        rb.features = concat_rows(traj.features);
        for (std::int64_t k = 0; k < H; ++k) {
            rb.actions.insert(rb.actions.end(), traj.actions[static_cast<std::size_t>(k)].begin(),
                              traj.actions[static_cast<std::size_t>(k)].end());
            rb.returns.insert(rb.returns.end(), g[static_cast<std::size_t>(k)].begin(), g[static_cast<std::size_t>(k)].end());
        }
        reinforce_update(out.ac, optimizer, rb, config.entropy_bonus);

        double mean_ret = std::accumulate(g[0].begin(), g[0].end(), 0.0) / static_cast<double>(B);
        out.curve.push_back(PolicyCurvePoint{iter, mean_ret});
    }
    return out;
}

namespace {

struct EpisodeTrace {
    std::vector<std::vector<double>> features; // per step, per batch row? (single episode: per step)
    std::vector<int> actions;
    std::vector<double> rewards; // reward of the state after each action
    double episode_return = 0.0;
};

// Rolls one real episode. The policy consumes either ground-truth latent
// features (wm == nullptr) or posterior-mean features filtered online.
// trace may be null when only the return matters.
double run_episode(const ControlTask& task, const WorldModel* wm, const ActorCritic* ac,
                   std::int64_t episode_len, RngStream env_rng, RngStream policy_rng,
                   EpisodeTrace* trace) {
    const GroundTruthModel& model = task.model;
    const EnvSpec& spec = model.spec;
    std::int64_t ds = spec.dims.total();
    std::int64_t da = spec.action_dim;
    std::int64_t lags = spec.lags;

    std::pair<std::int64_t, std::int64_t> slice{0, ds};
    if (ac) slice = feature_slice(ac->features, spec.dims);

    std::vector<std::vector<double>> latents, actions, filtered;
    std::vector<double> scratch, obs(static_cast<std::size_t>(ds));
    std::vector<Tensor> lat_hist, act_hist;
    double ret = 0.0;

    for (std::int64_t t = 0; t < episode_len; ++t) {
        std::vector<double> s(static_cast<std::size_t>(ds));
        if (t < lags) {
            for (double& v : s) v = env_rng.gaussian();
        } else {
            std::vector<const double*> lat_ptr(static_cast<std::size_t>(lags));
            std::vector<const double*> act_ptr(static_cast<std::size_t>(lags));
            for (std::int64_t k = 0; k < lags; ++k) {
                lat_ptr[static_cast<std::size_t>(k)] = latents[static_cast<std::size_t>(t - lags + k)].data();
                act_ptr[static_cast<std::size_t>(k)] = actions[static_cast<std::size_t>(t - lags + k)].data();
            }
            env_step(model, lat_ptr.data(), act_ptr.data(), env_rng, s.data());
        }
        double r = model.reward(s.data());
        if (t >= lags) ret += r;

        // Agent side: features for the action choice.
        std::vector<double> features;
        if (ac) {
            const double* feat_src = s.data();
            std::vector<double> mu_row;
            if (wm) {
                model.obs_mixer.eval(s.data(), obs.data(), scratch);
                Tensor obs_t = Tensor::from({1, ds}, obs);
                std::vector<Tensor> lh(static_cast<std::size_t>(lags)), ah(static_cast<std::size_t>(lags));
                for (std::int64_t k = 0; k < lags; ++k) {
                    std::int64_t src = t - lags + k;
                    lh[static_cast<std::size_t>(k)] = src < 0 ? Tensor::zeros({1, ds}) : Tensor::from({1, ds}, filtered[static_cast<std::size_t>(src)]);
                    ah[static_cast<std::size_t>(k)] = src < 0 ? Tensor::zeros({1, da}) : Tensor::from({1, da}, actions[static_cast<std::size_t>(src)]);
                }
                LatentBlocks blocks = wm->posterior(nullptr, obs_t, lh, ah, wm->zero_eps(1));
                mu_row = blocks.full_mu().data();
                filtered.push_back(mu_row);
                feat_src = mu_row.data();
            }
            features.assign(feat_src + slice.first, feat_src + slice.first + slice.second);
        }

        std::vector<double> a(static_cast<std::size_t>(da), 0.0);
        int choice;
        if (ac) {
            std::vector<double> logits = ac->actor.eval(features);
            choice = sample_categorical(logits.data(), da, policy_rng);
        } else {
            choice = policy_rng.uniform_int(static_cast<int>(da));
        }
        a[static_cast<std::size_t>(choice)] = 1.0;

        if (trace && ac && t >= lags && t + 1 < episode_len) {
            trace->features.push_back(features);
            trace->actions.push_back(choice);
            trace->rewards.push_back(0.0); // filled by the caller from the next step
        }
        latents.push_back(std::move(s));
        actions.push_back(std::move(a));
    }
    if (trace) trace->episode_return = ret;
    // Back-fill rewards: the reward credited to the action at step t is the
    // state reward at t+1.
    if (trace && ac) {
        std::size_t idx = 0;
        for (std::int64_t t = lags; t < episode_len && idx < trace->rewards.size(); ++t, ++idx) {
            if (t + 1 < episode_len) {
                trace->rewards[idx] = model.reward(latents[static_cast<std::size_t>(t + 1)].data());
            }
        }
    }
    return ret;
}

} // namespace

TrainedPolicy train_policy_on_env(const ControlTask& task, FeatureSet selector,
                                  const PolicyConfig& config, std::uint64_t seed) {
    const EnvSpec& spec = task.model.spec;
    RngStream rng(seed, 0x09AC1E);
    TrainedPolicy out;
    out.ac = make_actor_critic(selector, spec.dims, spec.action_dim, config, rng);
    std::vector<Parameter*> params = out.ac.actor.parameters();
    {
        auto cv = out.ac.critic.parameters();
        params.insert(params.end(), cv.begin(), cv.end());
    }
    AdamW optimizer(params, AdamWConfig{config.actor_lr, 0.9, 0.999, 1e-8, 0.0});

    const std::int64_t episodes_per_iter = 8;
    for (std::int64_t iter = 0; iter < config.iterations; ++iter) {
        ReinforceBatch rb;
        std::vector<std::vector<double>> feature_rows;
        double mean_ret = 0.0;
        for (std::int64_t e = 0; e < episodes_per_iter; ++e) {
            EpisodeTrace trace;
            run_episode(task, nullptr, &out.ac, config.episode_len,
                        rng.derive(iter * 1000 + 2 * e), rng.derive(iter * 1000 + 2 * e + 1), &trace);
            mean_ret += trace.episode_return;
            // Discounted returns-to-go.
            double acc = 0.0;
            std::vector<double> g(trace.rewards.size());
            for (std::int64_t k = static_cast<std::int64_t>(trace.rewards.size()) - 1; k >= 0; --k) {
                acc = trace.rewards[static_cast<std::size_t>(k)] + config.gamma * acc;
                g[static_cast<std::size_t>(k)] = acc;
            }
            for (std::size_t k = 0; k < trace.actions.size(); ++k) {
                feature_rows.push_back(trace.features[k]);
                rb.actions.push_back(trace.actions[k]);
                rb.returns.push_back(g[k]);
            }
        }
        std::int64_t m = static_cast<std::int64_t>(feature_rows.size());
        std::int64_t f = static_cast<std::int64_t>(feature_rows[0].size());
        Tensor features = Tensor::zeros({m, f});
        for (std::int64_t i = 0; i < m; ++i) {
            std::copy(feature_rows[static_cast<std::size_t>(i)].begin(), feature_rows[static_cast<std::size_t>(i)].end(),
                      features.raw().begin() + i * f);
        }
        rb.features = features;
        reinforce_update(out.ac, optimizer, rb, config.entropy_bonus);
        out.curve.push_back(PolicyCurvePoint{iter, mean_ret / static_cast<double>(episodes_per_iter)});
    }
    return out;
}

PolicyEvaluation evaluate_policy(const WorldModel* wm, const ActorCritic& ac,
                                 const ControlTask& task, std::int64_t n_episodes,
                                 std::int64_t episode_len, std::uint64_t seed) {
    if (n_episodes < 1) {
        throw DomainError("evaluate_policy: n_episodes must be at least 1");
    }
    RngStream base(seed, 0xE7A1ULL);
    PolicyEvaluation out;
    for (std::int64_t e = 0; e < n_episodes; ++e) {
        out.returns.push_back(run_episode(task, wm, &ac, episode_len,
                                          base.derive(2 * static_cast<std::uint64_t>(e)),
                                          base.derive(2 * static_cast<std::uint64_t>(e) + 1), nullptr));
    }
    double mean = std::accumulate(out.returns.begin(), out.returns.end(), 0.0) / static_cast<double>(n_episodes);
    out.mean_return = mean;
    if (n_episodes >= 2) {
        double ss = 0.0;
        for (double r : out.returns) ss += (r - mean) * (r - mean);
        out.stderr_return = std::sqrt(ss / static_cast<double>(n_episodes - 1)) / std::sqrt(static_cast<double>(n_episodes));
    } else {
        out.stderr_return = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

PolicyEvaluation evaluate_random_policy(const ControlTask& task, std::int64_t n_episodes,
                                        std::int64_t episode_len, std::uint64_t seed) {
    if (n_episodes < 1) {
        throw DomainError("evaluate_random_policy: n_episodes must be at least 1");
    }
    RngStream base(seed, 0xE7A1ULL);
    PolicyEvaluation out;
    for (std::int64_t e = 0; e < n_episodes; ++e) {
        out.returns.push_back(run_episode(task, nullptr, nullptr, episode_len,
                                          base.derive(2 * static_cast<std::uint64_t>(e)),
                                          base.derive(2 * static_cast<std::uint64_t>(e) + 1), nullptr));
    }
    double mean = std::accumulate(out.returns.begin(), out.returns.end(), 0.0) / static_cast<double>(n_episodes);
    out.mean_return = mean;
    if (n_episodes >= 2) {
        double ss = 0.0;
        for (double r : out.returns) ss += (r - mean) * (r - mean);
        out.stderr_return = std::sqrt(ss / static_cast<double>(n_episodes - 1)) / std::sqrt(static_cast<double>(n_episodes));
    } else {
        out.stderr_return = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

} // namespace fwm
