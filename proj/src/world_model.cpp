#include "factorwm/world_model.hpp"

namespace fwm {

namespace {

Tensor concat_blocks(const std::array<Tensor, 4>& t, std::initializer_list<int> blocks) {
    std::vector<Tensor> parts;
    for (int b : blocks) {
        if (t[static_cast<std::size_t>(b)].size() > 0) parts.push_back(t[static_cast<std::size_t>(b)]);
    }
    if (parts.empty()) {
        throw ShapeError("concat_blocks: all requested blocks are empty");
    }
    return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

} // namespace

Tensor LatentBlocks::full_sample() const { return concat_blocks(sample, {0, 1, 2, 3}); }
Tensor LatentBlocks::full_mu() const { return concat_blocks(mu, {0, 1, 2, 3}); }
Tensor LatentBlocks::rew_sample() const { return concat_blocks(sample, {kCtrlRew, kUnctrlRew}); }
Tensor LatentBlocks::free_sample() const { return concat_blocks(sample, {kCtrlFree, kNoise}); }
Tensor LatentBlocks::ctrl_sample() const { return concat_blocks(sample, {kCtrlRew, kCtrlFree}); }
Tensor LatentBlocks::unctrl_sample() const { return concat_blocks(sample, {kUnctrlRew, kNoise}); }

WorldModel::WorldModel(WorldModelConfig config, RngStream& rng) : config_(config) {
    std::int64_t ds = config_.dims.total();
    std::int64_t da = config_.action_dim;
    std::int64_t dr = config_.dims.rew();
    double slope = config_.slope;
    double scale = config_.init_scale;

    std::vector<std::int64_t> enc{config_.obs_dim};
    for (std::int64_t l = 0; l < config_.enc_layers; ++l) enc.push_back(config_.enc_hidden);
    enc.push_back(ds); // temporal embedding width follows the latent size
    encoder_ = Mlp("enc", enc, slope, Activation::none, rng, scale);

    std::vector<std::int64_t> dec{ds};
    for (std::int64_t l = 0; l < config_.dec_layers; ++l) dec.push_back(config_.dec_hidden);
    dec.push_back(config_.obs_dim);
    obs_decoder_ = Mlp("dec", dec, slope, Activation::none, rng, scale);

    std::vector<std::int64_t> rewd{std::max<std::int64_t>(dr, 1)};
    for (std::int64_t l = 1; l < config_.reward_layers; ++l) rewd.push_back(config_.reward_hidden);
    rewd.push_back(1);
    // A single-layer reward head keeps the LeakyReLU output of the generating
    // class; deeper heads end linear.
    Activation rew_act = config_.reward_layers == 1 ? Activation::leaky_relu : Activation::none;
    reward_decoder_ = Mlp("rew_dec", rewd, slope, rew_act, rng, scale);

    for (int b = 0; b < 4; ++b) {
        bool full = (b == kCtrlFree || b == kNoise);
        bool acts = (b == kCtrlRew || b == kCtrlFree);
        std::int64_t hist = config_.lags * ((full ? ds : dr) + (acts ? da : 0));
        std::int64_t d_b = config_.dims.dim(b);
        std::int64_t head_out = std::max<std::int64_t>(2 * d_b, 1);
        prior_net_[static_cast<std::size_t>(b)] =
            Mlp("prior" + std::to_string(b), {std::max<std::int64_t>(hist, 1), head_out}, slope, Activation::none, rng, scale);
        post_head_[static_cast<std::size_t>(b)] =
            Mlp("post" + std::to_string(b), {ds + hist, head_out}, slope, Activation::none, rng, scale);
    }
}

void WorldModel::check_history(const std::vector<Tensor>& latent_hist,
                               const std::vector<Tensor>& action_hist) const {
    if (static_cast<std::int64_t>(latent_hist.size()) != config_.lags ||
        static_cast<std::int64_t>(action_hist.size()) != config_.lags) {
        throw Error("history must hold exactly " + std::to_string(config_.lags) + " entries (sequencing error)");
    }
}

Tensor WorldModel::block_condition(int block, const Tensor* embed,
                                   const std::vector<Tensor>& latent_hist,
                                   const std::vector<Tensor>& action_hist) const {
    bool full = (block == kCtrlFree || block == kNoise);
    bool acts = (block == kCtrlRew || block == kCtrlFree);
    std::vector<Tensor> parts;
    if (embed) parts.push_back(*embed);
    std::int64_t d_lat = full ? config_.dims.total() : config_.dims.rew();
    for (const Tensor& lat : latent_hist) {
        if (d_lat > 0) parts.push_back(d_lat == lat.cols() ? lat : slice_cols(lat, 0, d_lat));
    }
    if (acts) {
        for (const Tensor& act : action_hist) parts.push_back(act);
    }
    return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

LatentBlocks WorldModel::blocks_from_heads(Tape* tape, const std::array<Mlp, 4>& heads,
                                           const Tensor* embed,
                                           const std::vector<Tensor>& latent_hist,
                                           const std::vector<Tensor>& action_hist,
                                           const std::array<Tensor, 4>& eps) const {
    check_history(latent_hist, action_hist);
    LatentBlocks out;
    out.dims = config_.dims;
    for (int b = 0; b < 4; ++b) {
        std::int64_t d_b = config_.dims.dim(b);
        if (d_b == 0) continue;
        Tensor cond = block_condition(b, embed, latent_hist, action_hist);
        Tensor raw = heads[static_cast<std::size_t>(b)].forward(cond, tape);
        GaussianPair stats = split_gaussian(raw, config_.sigma_floor);
        out.mu[static_cast<std::size_t>(b)] = stats.mu;
        out.sigma[static_cast<std::size_t>(b)] = stats.sigma;
        out.eps[static_cast<std::size_t>(b)] = eps[static_cast<std::size_t>(b)];
        out.sample[static_cast<std::size_t>(b)] = add(stats.mu, mul(stats.sigma, eps[static_cast<std::size_t>(b)]));
    }
    return out;
}

Tensor WorldModel::encode(Tape* tape, const Tensor& obs) const {
    return encoder_.forward(obs, tape);
}

LatentBlocks WorldModel::posterior(Tape* tape, const Tensor& obs,
                                   const std::vector<Tensor>& latent_hist,
                                   const std::vector<Tensor>& action_hist,
                                   const std::array<Tensor, 4>& eps) const {
    Tensor embed = encode(tape, obs);
    return posterior_from_embed(tape, embed, latent_hist, action_hist, eps);
}

LatentBlocks WorldModel::posterior_from_embed(Tape* tape, const Tensor& embed,
                                              const std::vector<Tensor>& latent_hist,
                                              const std::vector<Tensor>& action_hist,
                                              const std::array<Tensor, 4>& eps) const {
    return blocks_from_heads(tape, post_head_, &embed, latent_hist, action_hist, eps);
}

LatentBlocks WorldModel::prior(Tape* tape,
                               const std::vector<Tensor>& latent_hist,
                               const std::vector<Tensor>& action_hist,
                               const std::array<Tensor, 4>& eps) const {
    return blocks_from_heads(tape, prior_net_, nullptr, latent_hist, action_hist, eps);
}

Tensor WorldModel::decode_obs(Tape* tape, const Tensor& latent) const {
    return obs_decoder_.forward(latent, tape);
}

Tensor WorldModel::decode_reward(Tape* tape, const Tensor& rew_latent) const {
    Tensor out = reward_decoder_.forward(rew_latent, tape);
    return reshape(out, {out.rows()});
}

std::array<Tensor, 4> WorldModel::draw_eps(std::int64_t n, RngStream& rng) const {
    std::array<Tensor, 4> eps;
    for (int b = 0; b < 4; ++b) {
        Tensor e = Tensor::zeros({n, config_.dims.dim(b)});
        rng.fill_gaussian(e.raw());
        eps[static_cast<std::size_t>(b)] = std::move(e);
    }
    return eps;
}

std::array<Tensor, 4> WorldModel::zero_eps(std::int64_t n) const {
    std::array<Tensor, 4> eps;
    for (int b = 0; b < 4; ++b) {
        eps[static_cast<std::size_t>(b)] = Tensor::zeros({n, config_.dims.dim(b)});
    }
    return eps;
}

std::vector<Parameter*> WorldModel::parameters() {
    std::vector<Parameter*> ps;
    auto absorb = [&](std::vector<Parameter*> v) { ps.insert(ps.end(), v.begin(), v.end()); };
    absorb(encoder_.parameters());
    for (auto& h : post_head_) absorb(h.parameters());
    for (auto& p : prior_net_) absorb(p.parameters());
    absorb(obs_decoder_.parameters());
    absorb(reward_decoder_.parameters());
    return ps;
}

std::vector<const Parameter*> WorldModel::parameters() const {
    std::vector<const Parameter*> ps;
    auto absorb = [&](std::vector<const Parameter*> v) { ps.insert(ps.end(), v.begin(), v.end()); };
    absorb(encoder_.parameters());
    for (const auto& h : post_head_) absorb(h.parameters());
    for (const auto& p : prior_net_) absorb(p.parameters());
    absorb(obs_decoder_.parameters());
    absorb(reward_decoder_.parameters());
    return ps;
}

void WorldModel::save(ArrayPack& pack) const {
    for (const Parameter* p : parameters()) {
        pack.add("wm." + p->name, p->value.shape(), p->value.data());
    }
}

void WorldModel::load(const ArrayPack& pack) {
    for (Parameter* p : parameters()) {
        const NamedArray& a = pack.get("wm." + p->name);
        if (a.shape != p->value.shape()) {
            throw ShapeError("checkpoint parameter " + p->name + " has shape " + shape_str(a.shape) + ", expected " + shape_str(p->value.shape()));
        }
        p->value.raw() = a.data;
    }
}

ElboResult elbo_terms(const WorldModel& wm, Tape& tape, const WindowBatch& window,
                      RngStream* eps_rng,
                      const std::vector<std::array<Tensor, 4>>* fixed_eps) {
    const WorldModelConfig& cfg = wm.config();
    std::int64_t L = window.length();
    std::int64_t B = window.batch();
    std::int64_t lags = cfg.lags;
    if (L < lags + 1) {
        throw Error("window length " + std::to_string(L) + " is shorter than lags + 1");
    }

    // One encoder pass over every step of the window.
    Tensor obs_all = concat_rows(window.obs);
    Tensor embed_all = wm.encode(&tape, obs_all);

    Tensor zero_lat = Tensor::zeros({B, cfg.dims.total()});
    Tensor zero_act = Tensor::zeros({B, cfg.action_dim});

    ElboResult out;
    out.posteriors.resize(static_cast<std::size_t>(L));
    out.priors.resize(static_cast<std::size_t>(L));

    std::vector<Tensor> lat_hist(static_cast<std::size_t>(lags));
    std::vector<Tensor> act_hist(static_cast<std::size_t>(lags));
    for (std::int64_t t = 0; t < L; ++t) {
        for (std::int64_t k = 0; k < lags; ++k) {
            std::int64_t src = t - lags + k;
            lat_hist[static_cast<std::size_t>(k)] = src < 0 ? zero_lat : out.posteriors[static_cast<std::size_t>(src)].full_sample();
            act_hist[static_cast<std::size_t>(k)] = src < 0 ? zero_act : window.actions[static_cast<std::size_t>(src)];
        }
        std::array<Tensor, 4> eps = fixed_eps ? (*fixed_eps)[static_cast<std::size_t>(t)]
                                              : (eps_rng ? wm.draw_eps(B, *eps_rng) : wm.zero_eps(B));
        Tensor embed = slice_rows(embed_all, t * B, (t + 1) * B);
        out.posteriors[static_cast<std::size_t>(t)] =
            wm.posterior_from_embed(&tape, embed, lat_hist, act_hist, eps);
        if (t >= lags) {
            out.priors[static_cast<std::size_t>(t)] =
                wm.prior(&tape, lat_hist, act_hist, out.posteriors[static_cast<std::size_t>(t)].eps);
        }
    }

    // Reconstruction and KL terms, batched across the scored steps.
    std::vector<Tensor> samples, rew_samples, obs_targets, reward_targets;
    for (std::int64_t t = lags; t < L; ++t) {
        samples.push_back(out.posteriors[static_cast<std::size_t>(t)].full_sample());
        if (cfg.dims.rew() > 0) {
            rew_samples.push_back(out.posteriors[static_cast<std::size_t>(t)].rew_sample());
        }
        obs_targets.push_back(window.obs[static_cast<std::size_t>(t)]);
        reward_targets.push_back(reshape(window.rewards[static_cast<std::size_t>(t)], {B, 1}));
    }
    Tensor obs_mu = wm.decode_obs(&tape, concat_rows(samples));
    Tensor obs_target = concat_rows(obs_targets);
    out.j_o = mean_all(gaussian_log_prob(obs_target, obs_mu, 1.0));

    if (cfg.dims.rew() > 0) {
        Tensor rew_mu = wm.decode_reward(&tape, concat_rows(rew_samples));
        Tensor rew_target = concat_rows(reward_targets); // [N, 1]: one scalar per sample
        out.j_r = mean_all(gaussian_log_prob(rew_target, reshape(rew_mu, {rew_mu.dim(0), 1}), 1.0));
    } else {
        out.j_r = Tensor::scalar(0.0);
    }

    Tensor j_d;
    bool have_jd = false;
    for (int b = 0; b < 4; ++b) {
        if (cfg.dims.dim(b) == 0) {
            out.kl[static_cast<std::size_t>(b)] = Tensor::scalar(0.0);
            continue;
        }
        std::vector<Tensor> mu_q, sg_q, mu_p, sg_p;
        for (std::int64_t t = lags; t < L; ++t) {
            mu_q.push_back(out.posteriors[static_cast<std::size_t>(t)].mu[static_cast<std::size_t>(b)]);
            sg_q.push_back(out.posteriors[static_cast<std::size_t>(t)].sigma[static_cast<std::size_t>(b)]);
            mu_p.push_back(out.priors[static_cast<std::size_t>(t)].mu[static_cast<std::size_t>(b)]);
            sg_p.push_back(out.priors[static_cast<std::size_t>(t)].sigma[static_cast<std::size_t>(b)]);
        }
        Tensor kl_b = mean_all(gaussian_diag_kl(concat_rows(mu_q), concat_rows(sg_q),
                                                concat_rows(mu_p), concat_rows(sg_p)));
        out.kl[static_cast<std::size_t>(b)] = kl_b;
        if (cfg.beta[static_cast<std::size_t>(b)] != 0.0) {
            Tensor term = mul_scalar(kl_b, cfg.beta[static_cast<std::size_t>(b)]);
            j_d = have_jd ? add(j_d, term) : term;
            have_jd = true;
        }
    }
    out.j_d = have_jd ? neg(j_d) : Tensor::scalar(0.0);
    return out;
}

} // namespace fwm
