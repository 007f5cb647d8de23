#include "factorwm/trainer.hpp"

#include <algorithm>
#include <cmath>

namespace fwm {

namespace {

constexpr std::uint64_t kEpochStream = 0xE70C;
constexpr std::uint64_t kCriticStream = 0xC117;

} // namespace

Trainer::Trainer(WorldModel& wm, const ExperimentConfig& config)
    : wm_(wm), config_(config) {
    RngStream critic_rng(config.seed, kCriticStream);
    critics_ = make_critics(wm.config().dims, wm.config().action_dim,
                            config.objective.include_current_action, critic_rng);
    AdamWConfig wm_opt{config.optim.lr, 0.9, 0.999, 1e-8, config.optim.weight_decay};
    AdamWConfig critic_opt{config.optim.critic_lr, 0.9, 0.999, 1e-8, 0.0};
    opt_wm_ = std::make_unique<AdamW>(wm_.parameters(), wm_opt);
    opt_critic_ = std::make_unique<AdamW>(critics_.parameters(), critic_opt);
}

WindowBatch Trainer::assemble_window(const TrajectoryBatch& data,
                                     const std::vector<WindowRef>& refs) const {
    std::int64_t L = config_.optim.sequence_length;
    std::int64_t B = static_cast<std::int64_t>(refs.size());
    WindowBatch window;
    window.obs.reserve(static_cast<std::size_t>(L));
    for (std::int64_t t = 0; t < L; ++t) {
        Tensor obs = Tensor::zeros({B, data.obs_dim});
        Tensor act = Tensor::zeros({B, data.action_dim});
        Tensor rew = Tensor::zeros({B});
        for (std::int64_t b = 0; b < B; ++b) {
            const WindowRef& ref = refs[static_cast<std::size_t>(b)];
            std::int64_t tg = ref.start + t;
            std::copy_n(data.obs_at(ref.traj, tg), data.obs_dim, obs.raw().begin() + b * data.obs_dim);
            std::copy_n(data.action_at(ref.traj, tg), data.action_dim, act.raw().begin() + b * data.action_dim);
            rew.raw()[static_cast<std::size_t>(b)] = data.reward_at(ref.traj, tg);
        }
        window.obs.push_back(std::move(obs));
        window.actions.push_back(std::move(act));
        window.rewards.push_back(std::move(rew));
    }
    return window;
}

EpochMetrics Trainer::train_epoch(const TrajectoryBatch& data, const ReturnWindow& returns,
                                  std::int64_t epoch) {
    const std::int64_t L = config_.optim.sequence_length;
    const std::int64_t B = config_.optim.batch;
    const std::int64_t lags = wm_.config().lags;
    if (data.steps < L) {
        throw DataError("trajectories shorter than the training window");
    }

    RngStream rng = RngStream(config_.seed, kEpochStream).derive(static_cast<std::uint64_t>(epoch));

    // Window sampling: floor(T/L) windows per trajectory, starts uniform.
    std::vector<WindowRef> windows;
    std::int64_t per_traj = data.steps / L;
    for (std::int64_t traj = 0; traj < data.n; ++traj) {
        for (std::int64_t w = 0; w < per_traj; ++w) {
            windows.push_back(WindowRef{traj, static_cast<std::int64_t>(rng.uniform_int(static_cast<int>(data.steps - L + 1)))});
        }
    }
    for (std::int64_t i = static_cast<std::int64_t>(windows.size()) - 1; i > 0; --i) {
        std::swap(windows[static_cast<std::size_t>(i)], windows[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
    }

    EpochMetrics metrics;
    std::int64_t n_batches = static_cast<std::int64_t>(windows.size()) / B;
    for (std::int64_t bi = 0; bi < n_batches; ++bi) {
        std::vector<WindowRef> refs(windows.begin() + bi * B, windows.begin() + (bi + 1) * B);
        WindowBatch window = assemble_window(data, refs);

        Tape tape;
        ElboResult elbo = elbo_terms(wm_, tape, window, &rng);

        // Candidate (slot, step) pairs for the MI batch: the step needs a
        // posterior at t-1 past burn-in and a defined truncated return.
        std::vector<std::pair<std::int64_t, std::int64_t>> candidates; // (t, slot)
        for (std::int64_t t = lags + 1; t < L; ++t) {
            for (std::int64_t b = 0; b < B; ++b) {
                if (refs[static_cast<std::size_t>(b)].start + t < returns.valid_steps) {
                    candidates.emplace_back(t, b);
                }
            }
        }
        bool mi_active = candidates.size() >= 2;
        MiBatch mi_batch;
        std::vector<std::int64_t> perm;
        if (mi_active) {
            std::int64_t m = std::min<std::int64_t>(config_.optim.mi_batch, static_cast<std::int64_t>(candidates.size()));
            for (std::int64_t i = static_cast<std::int64_t>(candidates.size()) - 1; i > 0; --i) {
                std::swap(candidates[static_cast<std::size_t>(i)], candidates[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
            }
            candidates.resize(static_cast<std::size_t>(m));
            std::sort(candidates.begin(), candidates.end());

            const BlockDims& dims = wm_.config().dims;
            std::int64_t da = wm_.config().action_dim;
            Tensor ret = Tensor::zeros({m, 1});
            std::int64_t act_w = config_.objective.include_current_action ? 2 * da : da;
            Tensor act_prev = Tensor::zeros({m, act_w});
            for (std::int64_t i = 0; i < m; ++i) {
                auto [t, b] = candidates[static_cast<std::size_t>(i)];
                const WindowRef& ref = refs[static_cast<std::size_t>(b)];
                std::int64_t tg = ref.start + t;
                ret.raw()[static_cast<std::size_t>(i)] = returns.at(ref.traj, tg);
                std::copy_n(data.action_at(ref.traj, tg - 1), da, act_prev.raw().begin() + i * act_w);
                if (config_.objective.include_current_action) {
                    std::copy_n(data.action_at(ref.traj, tg), da, act_prev.raw().begin() + i * act_w + da);
                }
            }

            // Gather tracked sample rows step by step, then stack.
            std::vector<Tensor> rew_s, free_s, ctrl_s, unctrl_s, rew_h, state_h;
            std::size_t i = 0;
            while (i < candidates.size()) {
                std::int64_t t = candidates[i].first;
                std::vector<std::int64_t> rows;
                while (i < candidates.size() && candidates[i].first == t) {
                    rows.push_back(candidates[i].second);
                    ++i;
                }
                const LatentBlocks& cur = elbo.posteriors[static_cast<std::size_t>(t)];
                const LatentBlocks& prev = elbo.posteriors[static_cast<std::size_t>(t - 1)];
                if (dims.rew() > 0) rew_s.push_back(gather_rows(cur.rew_sample(), rows));
                if (dims.total() - dims.rew() > 0) free_s.push_back(gather_rows(cur.free_sample(), rows));
                if (dims.ctrl() > 0) ctrl_s.push_back(gather_rows(cur.ctrl_sample(), rows));
                if (dims.total() - dims.ctrl() > 0) unctrl_s.push_back(gather_rows(cur.unctrl_sample(), rows));
                if (dims.rew() > 0) rew_h.push_back(gather_rows(stop_gradient(prev.rew_sample()), rows));
                state_h.push_back(gather_rows(stop_gradient(prev.full_sample()), rows));
            }
            auto stack_or_empty = [&](std::vector<Tensor>& parts, std::int64_t width) {
                return parts.empty() ? Tensor::zeros({m, width}) : concat_rows(parts);
            };
            mi_batch.returns = ret;
            mi_batch.action_prev = act_prev;
            mi_batch.rew_state = stack_or_empty(rew_s, 0);
            mi_batch.free_state = stack_or_empty(free_s, 0);
            mi_batch.ctrl_state = stack_or_empty(ctrl_s, 0);
            mi_batch.unctrl_state = stack_or_empty(unctrl_s, 0);
            mi_batch.rew_hist = stack_or_empty(rew_h, 0);
            mi_batch.state_hist = stack_or_empty(state_h, 0);
            perm = derangement(m, rng);

            for (std::int64_t k = 0; k < config_.optim.k_mi; ++k) {
                critic_step(critics_, *opt_critic_, mi_batch, perm);
            }
            MiValues vals = evaluate_bounds(critics_, mi_batch, perm);
            metrics.mi.i1 += vals.i1;
            metrics.mi.i2 += vals.i2;
            metrics.mi.i3 += vals.i3;
            metrics.mi.i4 += vals.i4;
        }

        Tensor total = add(elbo.j_o, add(elbo.j_r, elbo.j_d));
        double jrs_val = 0.0, jas_val = 0.0;
        if (mi_active && config_.objective.lambda1 > 0.0) {
            JrsResult rs = j_rs(critics_, mi_batch, perm, config_.objective.lambda1);
            total = add(total, rs.value);
            jrs_val = config_.objective.lambda1 * (rs.i1 - rs.i2);
        }
        if (mi_active && config_.objective.lambda2 > 0.0) {
            JasResult as = j_as(critics_, mi_batch, perm, config_.objective.lambda2);
            total = add(total, as.value);
            jas_val = config_.objective.lambda2 * (as.i3 - as.i4);
        }
        if (!std::isfinite(total.value())) {
            throw TrainingError("non-finite total loss in mini-batch " + std::to_string(bi));
        }
        Tensor loss = neg(total);
        tape.backward(loss);
        opt_wm_->step(tape);

        metrics.j_o += elbo.j_o.value();
        metrics.j_r += elbo.j_r.value();
        metrics.j_d += elbo.j_d.value();
        for (int b = 0; b < 4; ++b) metrics.kl[static_cast<std::size_t>(b)] += elbo.kl[static_cast<std::size_t>(b)].value();
        metrics.j_rs += jrs_val;
        metrics.j_as += jas_val;
        metrics.total += total.value();
        metrics.batches += 1;
    }

    if (metrics.batches > 0) {
        double inv = 1.0 / static_cast<double>(metrics.batches);
        metrics.j_o *= inv;
        metrics.j_r *= inv;
        metrics.j_d *= inv;
        metrics.j_rs *= inv;
        metrics.j_as *= inv;
        metrics.total *= inv;
        for (double& k : metrics.kl) k *= inv;
        metrics.mi.i1 *= inv;
        metrics.mi.i2 *= inv;
        metrics.mi.i3 *= inv;
        metrics.mi.i4 *= inv;
    }
    return metrics;
}

void Trainer::save_state(ArrayPack& pack) const {
    for (const DVCritic* c : {&critics_.c1, &critics_.c2, &critics_.c3, &critics_.c4}) {
        for (const Parameter* p : c->net.parameters()) {
            pack.add("critic." + p->name, p->value.shape(), p->value.data());
        }
    }
    auto dump_opt = [&](const AdamW& opt, const std::string& prefix) {
        std::vector<double> steps;
        for (std::size_t i = 0; i < opt.slots().size(); ++i) {
            const AdamW::Slot& slot = opt.slots()[i];
            const Parameter* p = opt.params()[i];
            pack.add(prefix + "." + p->name + ".m", p->value.shape(), slot.m);
            pack.add(prefix + "." + p->name + ".v", p->value.shape(), slot.v);
            steps.push_back(static_cast<double>(slot.step_count));
        }
        pack.add(prefix + ".steps", {static_cast<std::int64_t>(steps.size())}, steps);
    };
    dump_opt(*opt_wm_, "opt_wm");
    dump_opt(*opt_critic_, "opt_critic");
}

void Trainer::load_state(const ArrayPack& pack) {
    for (DVCritic* c : {&critics_.c1, &critics_.c2, &critics_.c3, &critics_.c4}) {
        for (Parameter* p : c->net.parameters()) {
            const NamedArray& a = pack.get("critic." + p->name);
            if (a.shape != p->value.shape()) {
                throw ShapeError("checkpoint critic parameter " + p->name + " has wrong shape");
            }
            p->value.raw() = a.data;
        }
    }
    auto load_opt = [&](AdamW& opt, const std::string& prefix) {
        const NamedArray& steps = pack.get(prefix + ".steps");
        if (steps.data.size() != opt.slots().size()) {
            throw DataError("checkpoint optimizer state does not match parameter count");
        }
        for (std::size_t i = 0; i < opt.slots().size(); ++i) {
            AdamW::Slot& slot = opt.slots()[i];
            const Parameter* p = opt.params()[i];
            slot.m = pack.get(prefix + "." + p->name + ".m").data;
            slot.v = pack.get(prefix + "." + p->name + ".v").data;
            slot.step_count = static_cast<std::int64_t>(steps.data[i]);
        }
    };
    load_opt(*opt_wm_, "opt_wm");
    load_opt(*opt_critic_, "opt_critic");
}

} // namespace fwm
