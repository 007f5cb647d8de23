#pragma once

#include "factorwm/ci_oracle.hpp"
#include "factorwm/config.hpp"
#include "factorwm/ident_eval.hpp"
#include "factorwm/policy.hpp"
#include "factorwm/world_model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fwm {

// CLI entry points, also driven directly by the integration tests.
// Exit-code contract (enforced by the CLI main): 0 success, 2 config error,
// 3 data/provenance error, 4 numerical failure.

WorldModelConfig make_wm_config(const ExperimentConfig& config);

/// Writes a dataset directory. control_task switches the generator to the
/// shaped-reward task (reward = -|s^rew|^2, boosted action drift).
void cmd_generate(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                  bool force, bool control_task = false, double action_gain = 2.0);

struct TrainOutcome {
    std::filesystem::path final_checkpoint;
    std::int64_t epochs_run = 0;
};

/// Trains for config.optim.epochs epochs, checkpointing every eval_every and
/// at the end; writes loss.csv and mi_curve.csv under out_dir. Refuses
/// datasets whose manifest spec hash does not match the config's env section.
/// `resume` may name a checkpoint directory to continue from.
TrainOutcome cmd_train(const ExperimentConfig& config, const std::filesystem::path& dataset_dir,
                       const std::filesystem::path& out_dir,
                       const std::filesystem::path& resume = {});

/// Measures block-wise identifiability of a checkpoint against a dataset
/// carrying true latents; writes ident_report.json and appends a row to
/// ident_curve.csv under out_dir. Returns the report.
IdentReport cmd_eval_ident(const ExperimentConfig& config,
                           const std::filesystem::path& checkpoint_dir,
                           const std::filesystem::path& dataset_dir,
                           const std::filesystem::path& out_dir);

/// Builds the linear-Gaussian instance, classifies every latent dimension,
/// cross-checks against d-separation, writes classification_report.json.
ClassificationRun cmd_eval_ci(const ExperimentConfig& config,
                              const std::filesystem::path& out_dir);

struct SelectorOutcome {
    std::string selector;
    double mean_return = 0.0;
    double stderr_return = 0.0;
};

struct PolicyOutcome {
    std::vector<SelectorOutcome> selectors;
    double random_mean = 0.0;
    double random_stderr = 0.0;
};

/// Trains and evaluates one imagination policy per selector on the control
/// task; writes policy_curve_<selector>.csv files and comparison_report.json.
PolicyOutcome cmd_policy(const ExperimentConfig& config,
                         const std::filesystem::path& checkpoint_dir,
                         const std::filesystem::path& dataset_dir,
                         const std::filesystem::path& out_dir,
                         const std::vector<std::string>& selectors,
                         double action_gain = 2.0,
                         std::int64_t n_episodes = 100);

/// Summarizes whatever reports exist in a run directory; writes report.json
/// and prints a short text digest. Throws DataError if nothing is found.
void cmd_report(const std::filesystem::path& run_dir);

// Checkpoint plumbing shared with tests.
struct LoadedCheckpoint {
    ExperimentConfig config;
    WorldModel wm;
    std::int64_t epoch = 0;
    ArrayPack pack; // full content, including trainer state when present
};

void write_checkpoint(const std::filesystem::path& dir, const ExperimentConfig& config,
                      const WorldModel& wm, const class Trainer* trainer, std::int64_t epoch);
LoadedCheckpoint read_checkpoint(const std::filesystem::path& dir);

std::string format_g17(double v);

} // namespace fwm
