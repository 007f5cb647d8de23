#pragma once

#include "factorwm/nn.hpp"
#include "factorwm/serialize.hpp"
#include "factorwm/synth_env.hpp"

#include <array>
#include <vector>

namespace fwm {

struct WorldModelConfig {
    BlockDims dims;
    std::int64_t obs_dim = 8;
    std::int64_t action_dim = 5;
    std::int64_t lags = 2;
    std::int64_t enc_hidden = 128;
    std::int64_t enc_layers = 3;
    std::int64_t dec_hidden = 128;
    std::int64_t dec_layers = 2;
    std::int64_t reward_layers = 1;
    std::int64_t reward_hidden = 64;
    double slope = 0.01;
    double sigma_floor = 1e-4;
    double init_scale = 1.0;
    std::array<double, 4> beta = {0.003, 0.003, 0.003, 0.003};
};

/// Per-block diagonal-Gaussian statistics plus the reparameterized draw
/// (sample = mu + sigma * eps, with eps kept for reproducibility).
struct LatentBlocks {
    BlockDims dims;
    std::array<Tensor, 4> mu;
    std::array<Tensor, 4> sigma;
    std::array<Tensor, 4> eps;
    std::array<Tensor, 4> sample;

    Tensor full_sample() const;   // [n, total]
    Tensor full_mu() const;
    Tensor rew_sample() const;    // ctrl_rew | unctrl_rew
    Tensor free_sample() const;   // ctrl_free | noise
    Tensor ctrl_sample() const;   // ctrl_rew | ctrl_free
    Tensor unctrl_sample() const; // unctrl_rew | noise
};

/// The four-block factorized sequential VAE. Conditioning wiring:
///   posterior q1(ctrl_rew   | o_t, rew hist, action hist)
///   posterior q2(unctrl_rew | o_t, rew hist)
///   posterior q3(ctrl_free  | o_t, full hist, action hist)
///   posterior q4(noise      | o_t, full hist)
/// and the priors are identical minus o_t. Histories are `lags` sampled
/// latents/actions, oldest to newest. The reward decoder sees only the
/// reward-relevant blocks.
class WorldModel {
public:
    WorldModel() = default;
    WorldModel(WorldModelConfig config, RngStream& rng);

    const WorldModelConfig& config() const { return config_; }

    Tensor encode(Tape* tape, const Tensor& obs) const;

    LatentBlocks posterior(Tape* tape, const Tensor& obs,
                           const std::vector<Tensor>& latent_hist,
                           const std::vector<Tensor>& action_hist,
                           const std::array<Tensor, 4>& eps) const;
    LatentBlocks posterior_from_embed(Tape* tape, const Tensor& embed,
                                      const std::vector<Tensor>& latent_hist,
                                      const std::vector<Tensor>& action_hist,
                                      const std::array<Tensor, 4>& eps) const;
    LatentBlocks prior(Tape* tape,
                       const std::vector<Tensor>& latent_hist,
                       const std::vector<Tensor>& action_hist,
                       const std::array<Tensor, 4>& eps) const;

    Tensor decode_obs(Tape* tape, const Tensor& latent) const;
    /// rew_latent [n, dims.rew()] -> predicted reward [n].
    Tensor decode_reward(Tape* tape, const Tensor& rew_latent) const;

    /// One set of standard-normal eps tensors ([n, d_b] per block).
    std::array<Tensor, 4> draw_eps(std::int64_t n, RngStream& rng) const;
    std::array<Tensor, 4> zero_eps(std::int64_t n) const;

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    void save(ArrayPack& pack) const;
    void load(const ArrayPack& pack);

private:
    void check_history(const std::vector<Tensor>& latent_hist,
                       const std::vector<Tensor>& action_hist) const;
    Tensor block_condition(int block, const Tensor* embed,
                           const std::vector<Tensor>& latent_hist,
                           const std::vector<Tensor>& action_hist) const;
    LatentBlocks blocks_from_heads(Tape* tape, const std::array<Mlp, 4>& heads,
                                   const Tensor* embed,
                                   const std::vector<Tensor>& latent_hist,
                                   const std::vector<Tensor>& action_hist,
                                   const std::array<Tensor, 4>& eps) const;

    WorldModelConfig config_;
    Mlp encoder_;
    std::array<Mlp, 4> post_head_;
    std::array<Mlp, 4> prior_net_;
    Mlp obs_decoder_;
    Mlp reward_decoder_;
};

/// Mini-batch of aligned sequence windows, already split into per-step
/// constant tensors: obs[t] is [B, obs_dim], actions[t] is [B, action_dim],
/// rewards[t] is [B].
struct WindowBatch {
    std::vector<Tensor> obs;
    std::vector<Tensor> actions;
    std::vector<Tensor> rewards;
    std::int64_t length() const { return static_cast<std::int64_t>(obs.size()); }
    std::int64_t batch() const { return obs.empty() ? 0 : obs[0].rows(); }
};

struct ElboResult {
    Tensor j_o; // mean log p(o_t | s_t), unit-variance decoder
    Tensor j_r; // mean log p(r_t | s^rew_t)
    Tensor j_d; // -sum_b beta_b KL_b (mean over batch and steps)
    std::array<Tensor, 4> kl; // per-block mean KL
    std::vector<LatentBlocks> posteriors; // one per step; history zero-padded for t < lags
    std::vector<LatentBlocks> priors;     // aligned with posteriors; undefined for t < lags
};

/// Unrolls the posterior chain over a window and assembles the ELBO terms.
/// Loss terms cover steps t >= lags. eps_rng supplies reparameterization
/// noise; pass fixed_eps to pin it (gradient checks, imagination replay).
ElboResult elbo_terms(const WorldModel& wm, Tape& tape, const WindowBatch& window,
                      RngStream* eps_rng,
                      const std::vector<std::array<Tensor, 4>>* fixed_eps = nullptr);

} // namespace fwm
