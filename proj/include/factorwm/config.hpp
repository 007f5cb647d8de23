#pragma once

#include "factorwm/synth_env.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fwm {

/// Every knob of a run, with defaults matching the synthetic-track setup:
/// dims 2/2/2/2, 5 actions, tau 2, sigma 0.1, beta 0.003 each, AdamW lr 0.001,
/// batch 64, 100 epochs. Files use a flat [section] key = value format;
/// unknown keys are rejected so typos cannot silently fall back to defaults.
struct ExperimentConfig {
    struct Env {
        std::int64_t d_ar = 2;
        std::int64_t d_abar_r = 2;
        std::int64_t d_a_rbar = 2;
        std::int64_t d_abar_rbar = 2;
        std::int64_t d_a = 5;
        std::int64_t tau = 2;
        double sigma = 0.1;
        std::int64_t n_traj = 1000;
        std::int64_t steps = 100;
        double slope = 0.01;
    } env;

    struct Model {
        std::int64_t enc_hidden = 128;
        std::int64_t enc_layers = 3;
        std::int64_t dec_hidden = 128;
        std::int64_t dec_layers = 2;
        std::int64_t reward_layers = 1;
        std::int64_t reward_hidden = 64;
        double sigma_floor = 1e-4;
        double init_scale = 1.0;
        double slope = 0.01;
    } model;

    struct Objective {
        double beta1 = 0.003;
        double beta2 = 0.003;
        double beta3 = 0.003;
        double beta4 = 0.003;
        double lambda1 = 0.1;
        double lambda2 = 0.1;
        double gamma = 0.95;
        std::int64_t horizon = 20;
        bool include_current_action = false;
    } objective;

    struct Optim {
        double lr = 0.001;
        double critic_lr = 1e-4;
        double weight_decay = 1e-4;
        std::int64_t batch = 64;
        std::int64_t sequence_length = 30;
        std::int64_t epochs = 100;
        std::int64_t k_mi = 1;
        std::int64_t mi_batch = 256;
    } optim;

    struct Eval {
        std::int64_t n_fit = 5000;
        std::int64_t n_test = 2000;
        std::int64_t eval_every = 10;
    } eval;

    std::uint64_t seed = 0;
    std::string output_dir = "run";

    /// Parses `section.key = value` text. Throws ConfigError on unknown keys
    /// or unparseable values.
    static ExperimentConfig from_text(const std::string& text);
    static ExperimentConfig from_file(const std::filesystem::path& path);

    /// Applies one `section.key=value` override (top-level keys have no dot).
    void set(const std::string& dotted_key, const std::string& value);

    /// Deterministic dump; also valid input for from_text.
    std::string canonical() const;
    std::string hash() const;

    void validate() const;

    EnvSpec env_spec() const;
};

} // namespace fwm
