#pragma once

#include "factorwm/adamw.hpp"
#include "factorwm/config.hpp"
#include "factorwm/mi.hpp"
#include "factorwm/world_model.hpp"

#include <memory>

namespace fwm {

struct EpochMetrics {
    double j_o = 0.0;
    double j_r = 0.0;
    double j_d = 0.0;
    double j_rs = 0.0;
    double j_as = 0.0;
    double total = 0.0;
    std::array<double, 4> kl{};
    MiValues mi{};
    std::int64_t batches = 0;
};

/// Alternating optimization of the world model and the four DV critics.
/// Per mini-batch: k_mi critic ascent steps on detached samples, then one
/// world-model step on J_O + J_R + J_D + J_RS + J_AS with critics frozen.
/// All randomness for epoch e comes from a stream derived from (seed, e), so
/// resuming from a checkpoint replays the run bit-exactly.
class Trainer {
public:
    Trainer(WorldModel& wm, const ExperimentConfig& config);

    EpochMetrics train_epoch(const TrajectoryBatch& data, const ReturnWindow& returns,
                             std::int64_t epoch);

    Critics& critics() { return critics_; }
    const Critics& critics() const { return critics_; }
    AdamW& wm_optimizer() { return *opt_wm_; }
    AdamW& critic_optimizer() { return *opt_critic_; }

    void save_state(ArrayPack& pack) const;
    void load_state(const ArrayPack& pack);

private:
    struct WindowRef {
        std::int64_t traj;
        std::int64_t start;
    };

    WindowBatch assemble_window(const TrajectoryBatch& data,
                                const std::vector<WindowRef>& refs) const;

    WorldModel& wm_;
    ExperimentConfig config_;
    Critics critics_;
    std::unique_ptr<AdamW> opt_wm_;
    std::unique_ptr<AdamW> opt_critic_;
};

/// Builds the MI sample tensors for one batch of windows: one row per
/// selected (window, step) pair, histories stop-gradient'ed.
struct MiBatchBuilder {
    MiBatch batch;
    bool valid = false;
};

} // namespace fwm
