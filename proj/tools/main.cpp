#include "factorwm/commands.hpp"
#include "factorwm/version.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

namespace {

struct GlobalOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out;
    bool have_seed = false;
    std::uint64_t seed = 0;
};

fwm::ExperimentConfig resolve_config(const GlobalOpts& opts) {
    fwm::ExperimentConfig config;
    if (!opts.config_path.empty()) {
        config = fwm::ExperimentConfig::from_file(opts.config_path);
    }
    if (opts.have_seed) {
        config.seed = opts.seed;
    }
    for (const std::string& kv : opts.overrides) {
        std::size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            throw fwm::ConfigError("--set expects section.key=value, got '" + kv + "'");
        }
        config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!opts.out.empty()) {
        config.output_dir = opts.out;
    }
    config.validate();
    return config;
}

void add_common(CLI::App* cmd, GlobalOpts& opts) {
    cmd->add_option("--config", opts.config_path, "Config file (section.key = value format)");
    cmd->add_option("--seed", opts.seed, "Random seed")->each([&](const std::string&) { opts.have_seed = true; });
    cmd->add_option("--set", opts.overrides, "Override one key: section.key=value")->take_all();
    cmd->add_option("--out", opts.out, "Output directory");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string(fwm::kVersion) + " - factorized world models on synthetic POMDPs"};
    app.require_subcommand(1);

    GlobalOpts opts;
    bool force = false;
    bool control_task = false;
    double action_gain = 2.0;
    std::int64_t n_transitions = -1;
    std::string dataset, checkpoint, resume, run_dir;
    std::vector<std::string> selectors{"rew", "ctrl_rew", "free"};
    std::int64_t n_episodes = 100;

    CLI::App* generate = app.add_subcommand("generate", "Sample a synthetic dataset");
    add_common(generate, opts);
    generate->add_flag("--force", force, "Overwrite a non-empty output directory");
    generate->add_flag("--control-task", control_task, "Shaped-reward control variant");
    generate->add_option("--action-gain", action_gain, "Action drift multiplier (control task)");
    generate->add_option("-n,--transitions", n_transitions, "Total transitions (adjusts env.n_traj)");

    CLI::App* train = app.add_subcommand("train", "Train the world model on a dataset");
    add_common(train, opts);
    train->add_option("--data", dataset, "Dataset directory")->required();
    train->add_option("--resume", resume, "Checkpoint directory to resume from");

    CLI::App* eval_ident = app.add_subcommand("eval-ident", "Block-wise identifiability R^2");
    add_common(eval_ident, opts);
    eval_ident->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    eval_ident->add_option("--data", dataset, "Dataset directory with true latents")->required();

    CLI::App* eval_ci = app.add_subcommand("eval-ci", "Conditional-independence classification oracle");
    add_common(eval_ci, opts);

    CLI::App* policy = app.add_subcommand("policy", "Train/evaluate policies per feature selector");
    add_common(policy, opts);
    policy->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    policy->add_option("--data", dataset, "Control-task dataset directory")->required();
    policy->add_option("--selectors", selectors, "Feature selectors")->take_all();
    policy->add_option("--action-gain", action_gain, "Action drift multiplier of the task");
    policy->add_option("--episodes", n_episodes, "Evaluation episodes per policy");

    CLI::App* report = app.add_subcommand("report", "Summarize a run directory");
    report->add_option("dir", run_dir, "Run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) {
            fwm::ExperimentConfig config = resolve_config(opts);
            if (n_transitions > 0) {
                config.env.n_traj = std::max<std::int64_t>(1, n_transitions / config.env.steps);
                config.validate();
            }
            fwm::cmd_generate(config, config.output_dir, force, control_task, action_gain);
        } else if (train->parsed()) {
            fwm::ExperimentConfig config = resolve_config(opts);
            fwm::cmd_train(config, dataset, config.output_dir, resume);
        } else if (eval_ident->parsed()) {
            fwm::ExperimentConfig config = resolve_config(opts);
            fwm::cmd_eval_ident(config, checkpoint, dataset, config.output_dir);
        } else if (eval_ci->parsed()) {
            fwm::ExperimentConfig config = resolve_config(opts);
            fwm::cmd_eval_ci(config, config.output_dir);
        } else if (policy->parsed()) {
            fwm::ExperimentConfig config = resolve_config(opts);
            fwm::cmd_policy(config, checkpoint, dataset, config.output_dir, selectors, action_gain, n_episodes);
        } else if (report->parsed()) {
            fwm::cmd_report(run_dir);
        }
    } catch (const fwm::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const fwm::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
    return 0;
}
