#pragma once

#include "factorwm/nn.hpp"
#include "factorwm/tensor.hpp"

#include <cstdint>
#include <vector>

namespace fwm {

struct AdamWConfig {
    double lr = 1e-3;
    double beta_m = 0.9;
    double beta_v = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam. Parameters missing from the tape (no
/// gradient this step) are skipped, matching the usual framework semantics.
class AdamW {
public:
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
        std::int64_t step_count = 0;
    };

    AdamW(std::vector<Parameter*> params, AdamWConfig config);

    /// Applies one update using gradients recorded by tape.backward().
    /// Throws TrainingError (with the parameter name) on non-finite grads.
    void step(const Tape& tape);

    const AdamWConfig& config() const { return config_; }
    AdamWConfig& config() { return config_; }
    const std::vector<Parameter*>& params() const { return params_; }
    const std::vector<Slot>& slots() const { return slots_; }
    std::vector<Slot>& slots() { return slots_; }

private:
    std::vector<Parameter*> params_;
    std::vector<Slot> slots_;
    AdamWConfig config_;
};

} // namespace fwm
