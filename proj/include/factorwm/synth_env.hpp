#pragma once

#include "factorwm/nn.hpp"
#include "factorwm/rng.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fwm {

/// The four latent categories, in their fixed storage order:
///   0 ctrl_rew    controllable and reward-relevant
///   1 unctrl_rew  uncontrollable but reward-relevant
///   2 ctrl_free   controllable but reward-irrelevant
///   3 noise       neither
enum Block : int { kCtrlRew = 0, kUnctrlRew = 1, kCtrlFree = 2, kNoise = 3 };

inline constexpr std::array<const char*, 4> kBlockNames = {"ctrl_rew", "unctrl_rew", "ctrl_free", "noise"};

struct BlockDims {
    std::int64_t ctrl_rew = 2;
    std::int64_t unctrl_rew = 2;
    std::int64_t ctrl_free = 2;
    std::int64_t noise = 2;

    std::int64_t total() const { return ctrl_rew + unctrl_rew + ctrl_free + noise; }
    std::int64_t rew() const { return ctrl_rew + unctrl_rew; }
    std::int64_t ctrl() const { return ctrl_rew + ctrl_free; }

    std::int64_t dim(int block) const;
    std::int64_t offset(int block) const; // blocks are laid out contiguously in order
    /// Block index owning latent dimension i.
    int block_of(std::int64_t i) const;
    bool operator==(const BlockDims&) const = default;
};

struct EnvSpec {
    BlockDims dims;
    std::int64_t action_dim = 5;
    std::int64_t lags = 2;    // tau
    double noise_std = 0.1;   // sigma
    std::int64_t n_traj = 1000;
    std::int64_t steps = 100; // T per trajectory
    std::uint64_t seed = 0;
    double slope = 0.01;

    void validate() const;
};

enum class RewardKind {
    random_mlp,      // reward = f2(s^rew), a random one-layer map
    negative_sq_rew, // reward = -|s^rew|^2 (shaped control task)
};

enum class NoiseMode {
    history_scaled, // eps * mean(lagged latent entries)
    constant,       // plain i.i.d. N(0, sigma^2)
};

/// Frozen generative parameters of the synthetic environment. Transition
/// wiring per block:
///   ctrl_rew   <- rew history, action history
///   unctrl_rew <- rew history
///   ctrl_free  <- full history, action history
///   noise      <- full history
/// The observation mixer reads the full latent; the reward reads s^rew only.
struct GroundTruthModel {
    EnvSpec spec;
    Mlp obs_mixer;                 // 3-layer square, per-layer min singular value >= 0.1
    Mlp reward_map;                // 1 layer, rew -> 1
    std::array<Mlp, 4> transitions;
    bool linear = false;
    RewardKind reward_kind = RewardKind::random_mlp;
    NoiseMode noise_mode = NoiseMode::history_scaled;

    std::int64_t transition_input_width(int block) const;
    bool block_reads_actions(int block) const { return block == kCtrlRew || block == kCtrlFree; }
    bool block_reads_full_history(int block) const { return block == kCtrlFree || block == kNoise; }

    /// Assembles the wired input for one block: lagged latent slices
    /// (oldest to newest) then lagged actions where wired.
    void gather_transition_input(int block,
                                 const double* const* latent_hist,
                                 const double* const* action_hist,
                                 std::vector<double>& out) const;

    double reward(const double* rew_latent) const;
};

/// Draws the generative parameters: weights i.i.d. uniform(-1,1) with unit
/// column norms; the observation mixer is resampled per layer until its
/// minimum singular value reaches 0.1. Deterministic in spec.seed.
GroundTruthModel sample_ground_truth(const EnvSpec& spec);

/// Same wiring with every map replaced by a single linear layer and plain
/// i.i.d. noise; transition weights are rescaled and resampled until the
/// block-companion spectral radius is < 0.95 so exact covariances exist.
GroundTruthModel make_linear_system(const EnvSpec& spec);

/// One transition. Histories hold `lags` pointers, oldest to newest.
void env_step(const GroundTruthModel& model,
              const double* const* latent_hist,
              const double* const* action_hist,
              RngStream& rng, double* out);

struct TrajectoryBatch {
    std::int64_t n = 0;
    std::int64_t steps = 0;
    BlockDims dims;
    std::int64_t action_dim = 0;
    std::int64_t obs_dim = 0;

    std::vector<double> obs;     // [n, steps, obs_dim]
    std::vector<double> actions; // [n, steps, action_dim] one-hot
    std::vector<double> rewards; // [n, steps]
    std::vector<double> latents; // [n, steps, dims.total()]; empty for real data

    bool has_latents() const { return !latents.empty(); }
    std::int64_t transitions() const { return n * steps; }

    const double* obs_at(std::int64_t traj, std::int64_t t) const {
        return obs.data() + (traj * steps + t) * obs_dim;
    }
    const double* action_at(std::int64_t traj, std::int64_t t) const {
        return actions.data() + (traj * steps + t) * action_dim;
    }
    double reward_at(std::int64_t traj, std::int64_t t) const {
        return rewards[static_cast<std::size_t>(traj * steps + t)];
    }
    const double* latent_at(std::int64_t traj, std::int64_t t) const {
        return latents.data() + (traj * steps + t) * dims.total();
    }
};

/// Rolls out spec.n_traj trajectories of spec.steps steps under the
/// uniform-random one-hot policy. The first `lags` latents per trajectory are
/// N(0,1); each trajectory uses an RngStream derived from (seed, index).
TrajectoryBatch rollout(const GroundTruthModel& model);

// Dataset directory format: manifest.json + obs.bin/actions.bin/rewards.bin/
// latents.bin, raw little-endian float64.
void write_dataset(const std::filesystem::path& dir, const TrajectoryBatch& batch,
                   const EnvSpec& spec, const std::string& config_hash,
                   const std::string& version);
TrajectoryBatch read_dataset(const std::filesystem::path& dir, std::string* spec_hash_out = nullptr);

/// Canonical text form of the generator settings; hashed into manifests so
/// training can refuse mismatched datasets.
std::string env_spec_canonical(const EnvSpec& spec);

} // namespace fwm
