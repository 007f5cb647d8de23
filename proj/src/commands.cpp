#include "factorwm/commands.hpp"

#include "factorwm/serialize.hpp"
#include "factorwm/trainer.hpp"
#include "factorwm/version.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>

namespace fwm {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

WorldModelConfig make_wm_config(const ExperimentConfig& config) {
    WorldModelConfig wm;
    EnvSpec spec = config.env_spec();
    wm.dims = spec.dims;
    wm.obs_dim = spec.dims.total(); // observations mix the full latent 1:1 in width
    wm.action_dim = spec.action_dim;
    wm.lags = spec.lags;
    wm.enc_hidden = config.model.enc_hidden;
    wm.enc_layers = config.model.enc_layers;
    wm.dec_hidden = config.model.dec_hidden;
    wm.dec_layers = config.model.dec_layers;
    wm.reward_layers = config.model.reward_layers;
    wm.reward_hidden = config.model.reward_hidden;
    wm.slope = config.model.slope;
    wm.sigma_floor = config.model.sigma_floor;
    wm.init_scale = config.model.init_scale;
    wm.beta = {config.objective.beta1, config.objective.beta2,
               config.objective.beta3, config.objective.beta4};
    return wm;
}

namespace {

constexpr std::uint64_t kModelStream = 0x30D31;

std::string stamp_comment(const ExperimentConfig& config) {
    return "# version=\"" + std::string(kVersion) + "\" config_hash=" + config.hash() +
           " seed=" + std::to_string(config.seed) + "\n";
}

void stamp_json(json& j, const ExperimentConfig& config) {
    j["version"] = kVersion;
    j["config_hash"] = config.hash();
    j["seed"] = config.seed;
}

void write_csv(const fs::path& path, const std::string& comment, const std::string& header,
               const std::vector<std::string>& rows) {
    std::string text = comment + header + "\n";
    for (const std::string& r : rows) {
        text += r;
        text += "\n";
    }
    write_text_atomic(path, text);
}

// Loads existing CSV data rows (skipping comment + header) for resumed runs.
std::vector<std::string> read_csv_rows(const fs::path& path) {
    std::vector<std::string> rows;
    if (!fs::exists(path)) return rows;
    std::istringstream in(read_text_file(path));
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        rows.push_back(line);
    }
    return rows;
}

std::string control_spec_canonical(const EnvSpec& spec, double action_gain) {
    return env_spec_canonical(spec) + ";task=control;action_gain=" + format_g17(action_gain);
}

} // namespace

void cmd_generate(const ExperimentConfig& config, const fs::path& out_dir, bool force,
                  bool control_task, double action_gain) {
    config.validate();
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force) {
        throw DataError("output directory " + out_dir.string() + " is not empty (use --force to overwrite)");
    }
    EnvSpec spec = config.env_spec();
    TrajectoryBatch batch;
    std::string spec_text;
    if (control_task) {
        ControlTask task = make_control_task(spec, action_gain);
        batch = rollout(task.model);
        spec_text = control_spec_canonical(spec, action_gain);
    } else {
        GroundTruthModel model = sample_ground_truth(spec);
        batch = rollout(model);
        spec_text = env_spec_canonical(spec);
    }
    fs::create_directories(out_dir);
    write_dataset(out_dir, batch, spec, config.hash(), kVersion);
    // write_dataset stamps the plain spec hash; control-task datasets carry
    // their own so training configs cannot silently mix the two.
    if (control_task) {
        json manifest = json::parse(read_text_file(out_dir / "manifest.json"));
        manifest["spec_hash"] = hex64(fnv1a64(spec_text));
        manifest["task"] = "control";
        manifest["action_gain"] = action_gain;
        write_text_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");
    }
    std::printf("generated %lld transitions in %s\n",
                static_cast<long long>(batch.transitions()), out_dir.string().c_str());
}

void write_checkpoint(const fs::path& dir, const ExperimentConfig& config,
                      const WorldModel& wm, const Trainer* trainer, std::int64_t epoch) {
    fs::create_directories(dir);
    ArrayPack pack;
    wm.save(pack);
    if (trainer) {
        trainer->save_state(pack);
    }
    std::string index = pack.write(dir / "params.bin");
    json manifest;
    manifest["schema_version"] = 1;
    manifest["kind"] = "checkpoint";
    manifest["epoch"] = epoch;
    manifest["config"] = config.canonical();
    manifest["arrays"] = json::parse(index);
    manifest["block_dims"] = {wm.config().dims.ctrl_rew, wm.config().dims.unctrl_rew,
                              wm.config().dims.ctrl_free, wm.config().dims.noise};
    stamp_json(manifest, config);
    write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedCheckpoint read_checkpoint(const fs::path& dir) {
    json manifest = json::parse(read_text_file(dir / "manifest.json"));
    if (manifest.value("kind", "") != "checkpoint") {
        throw DataError(dir.string() + " is not a checkpoint directory");
    }
    LoadedCheckpoint out;
    out.config = ExperimentConfig::from_text(manifest.at("config").get<std::string>());
    out.epoch = manifest.at("epoch").get<std::int64_t>();
    out.pack = ArrayPack::read(dir / "params.bin", manifest.at("arrays").dump());
    RngStream rng(out.config.seed, kModelStream);
    out.wm = WorldModel(make_wm_config(out.config), rng);
    out.wm.load(out.pack);
    return out;
}

TrainOutcome cmd_train(const ExperimentConfig& config, const fs::path& dataset_dir,
                       const fs::path& out_dir, const fs::path& resume) {
    config.validate();
    std::string dataset_hash;
    TrajectoryBatch data = read_dataset(dataset_dir, &dataset_hash);
    json manifest = json::parse(read_text_file(dataset_dir / "manifest.json"));
    EnvSpec spec = config.env_spec();
    std::string expect = manifest.value("task", "") == "control"
                             ? hex64(fnv1a64(control_spec_canonical(spec, manifest.value("action_gain", 2.0))))
                             : hex64(fnv1a64(env_spec_canonical(spec)));
    if (dataset_hash != expect) {
        throw DataError("dataset " + dataset_dir.string() + " was generated from a different env spec (hash " +
                        dataset_hash + ", config expects " + expect + ")");
    }

    fs::create_directories(out_dir);
    RngStream model_rng(config.seed, kModelStream);
    WorldModel wm(make_wm_config(config), model_rng);
    Trainer trainer(wm, config);
    ReturnWindow returns = compute_returns(data.rewards, data.n, data.steps,
                                           config.objective.gamma, config.objective.horizon);

    std::int64_t start_epoch = 0;
    if (!resume.empty()) {
        LoadedCheckpoint ckpt = read_checkpoint(resume);
        if (ckpt.config.hash() != config.hash()) {
            throw DataError("resume checkpoint was written with a different config");
        }
        wm.load(ckpt.pack);
        trainer.load_state(ckpt.pack);
        start_epoch = ckpt.epoch;
    }

    std::string comment = stamp_comment(config);
    const std::string loss_header = "epoch,j_o,j_r,j_d,j_rs,j_as,total,kl1,kl2,kl3,kl4";
    const std::string mi_header = "epoch,i_a1,i_a2,i_a3,i_a4,gap_rs,gap_as";
    std::vector<std::string> loss_rows = read_csv_rows(out_dir / "loss.csv");
    std::vector<std::string> mi_rows = read_csv_rows(out_dir / "mi_curve.csv");
    loss_rows.resize(static_cast<std::size_t>(std::min<std::int64_t>(start_epoch, static_cast<std::int64_t>(loss_rows.size()))));
    mi_rows.resize(static_cast<std::size_t>(std::min<std::int64_t>(start_epoch, static_cast<std::int64_t>(mi_rows.size()))));

    TrainOutcome outcome;
    for (std::int64_t epoch = start_epoch; epoch < config.optim.epochs; ++epoch) {
        EpochMetrics m = trainer.train_epoch(data, returns, epoch);
        {
            std::ostringstream row;
            row << epoch << ',' << format_g17(m.j_o) << ',' << format_g17(m.j_r) << ','
                << format_g17(m.j_d) << ',' << format_g17(m.j_rs) << ',' << format_g17(m.j_as) << ','
                << format_g17(m.total);
            for (double kl : m.kl) row << ',' << format_g17(kl);
            loss_rows.push_back(row.str());
        }
        {
            std::ostringstream row;
            row << epoch << ',' << format_g17(m.mi.i1) << ',' << format_g17(m.mi.i2) << ','
                << format_g17(m.mi.i3) << ',' << format_g17(m.mi.i4) << ','
                << format_g17(m.mi.gap_rs()) << ',' << format_g17(m.mi.gap_as());
            mi_rows.push_back(row.str());
        }
        write_csv(out_dir / "loss.csv", comment, loss_header, loss_rows);
        write_csv(out_dir / "mi_curve.csv", comment, mi_header, mi_rows);
        bool checkpoint_now = ((epoch + 1) % config.eval.eval_every == 0) || epoch + 1 == config.optim.epochs;
        if (checkpoint_now) {
            fs::path dir = out_dir / ("checkpoint_ep" + std::to_string(epoch + 1));
            write_checkpoint(dir, config, wm, &trainer, epoch + 1);
            outcome.final_checkpoint = dir;
        }
        std::printf("epoch %lld: total %.4f (j_o %.4f j_r %.4f j_d %.5f)\n",
                    static_cast<long long>(epoch), m.total, m.j_o, m.j_r, m.j_d);
        std::fflush(stdout);
        outcome.epochs_run = epoch + 1 - start_epoch;
    }
    if (config.optim.epochs == 0) {
        fs::path dir = out_dir / "checkpoint_ep0";
        write_checkpoint(dir, config, wm, &trainer, 0);
        outcome.final_checkpoint = dir;
    }
    return outcome;
}

IdentReport cmd_eval_ident(const ExperimentConfig& config, const fs::path& checkpoint_dir,
                           const fs::path& dataset_dir, const fs::path& out_dir) {
    LoadedCheckpoint ckpt = read_checkpoint(checkpoint_dir);
    TrajectoryBatch data = read_dataset(dataset_dir);
    if (!(data.dims == ckpt.wm.config().dims) || data.obs_dim != ckpt.wm.config().obs_dim ||
        data.action_dim != ckpt.wm.config().action_dim) {
        throw ShapeError("checkpoint and dataset dimensions do not match");
    }
    IdentConfig icfg;
    icfg.n_fit = config.eval.n_fit;
    icfg.n_test = config.eval.n_test;
    RngStream rng(config.seed, 0x1DE47);
    IdentReport report = evaluate_identifiability(ckpt.wm, data, icfg, ckpt.epoch, rng);

    fs::create_directories(out_dir);
    json j;
    stamp_json(j, config);
    j["epoch"] = report.epoch;
    j["n_fit"] = report.n_fit;
    j["n_test"] = report.n_test;
    j["blocks"] = kBlockNames;
    j["r2_true_to_est"] = report.r2_true_to_est;
    j["r2_est_to_true"] = report.r2_est_to_true;
    j["avg_true_to_est"] = report.avg_true_to_est();
    j["avg_est_to_true"] = report.avg_est_to_true();
    j["leakage"] = report.leakage;
    write_text_atomic(out_dir / "ident_report.json", j.dump(2) + "\n");

    std::vector<std::string> rows = read_csv_rows(out_dir / "ident_curve.csv");
    std::ostringstream row;
    row << report.epoch << ',' << format_g17(report.avg_true_to_est()) << ','
        << format_g17(report.avg_est_to_true());
    for (double v : report.r2_true_to_est) row << ',' << format_g17(v);
    for (double v : report.r2_est_to_true) row << ',' << format_g17(v);
    rows.push_back(row.str());
    write_csv(out_dir / "ident_curve.csv", stamp_comment(config),
              "epoch,avg_true_to_est,avg_est_to_true,"
              "t2e_ctrl_rew,t2e_unctrl_rew,t2e_ctrl_free,t2e_noise,"
              "e2t_ctrl_rew,e2t_unctrl_rew,e2t_ctrl_free,e2t_noise",
              rows);
    return report;
}

ClassificationRun cmd_eval_ci(const ExperimentConfig& config, const fs::path& out_dir) {
    config.validate();
    CiTestConfig ci;
    ci.gamma = config.objective.gamma;
    ci.horizon = config.objective.horizon;
    ci.include_current_action = config.objective.include_current_action;
    ClassificationRun run = classify_with_resampling(config.env_spec(), ci);

    fs::create_directories(out_dir);
    json j;
    stamp_json(j, config);
    j["threshold"] = run.result.threshold;
    j["fixpoint_iterations"] = run.result.fixpoint_iterations;
    j["resamples"] = run.resamples;
    j["oracle_agreement"] = run.result.oracle_agreement;
    json dims = json::array();
    const BlockDims& bd = run.model.spec.dims;
    for (std::size_t i = 0; i < run.result.dims.size(); ++i) {
        const DimensionVerdict& v = run.result.dims[i];
        dims.push_back({{"index", i},
                        {"true_block", kBlockNames[static_cast<std::size_t>(bd.block_of(static_cast<std::int64_t>(i)))]},
                        {"label", kBlockNames[static_cast<std::size_t>(v.block())]},
                        {"reward_relevant", v.reward_relevant},
                        {"controllable", v.controllable},
                        {"reward_stat", v.reward_stat},
                        {"ctrl_stat", v.ctrl_stat},
                        {"dsep_reward_dependent", v.dsep_reward_dependent},
                        {"dsep_ctrl_dependent", v.dsep_ctrl_dependent}});
    }
    j["dimensions"] = dims;
    write_text_atomic(out_dir / "classification_report.json", j.dump(2) + "\n");
    return run;
}

PolicyOutcome cmd_policy(const ExperimentConfig& config, const fs::path& checkpoint_dir,
                         const fs::path& dataset_dir, const fs::path& out_dir,
                         const std::vector<std::string>& selectors, double action_gain,
                         std::int64_t n_episodes) {
    LoadedCheckpoint ckpt = read_checkpoint(checkpoint_dir);
    TrajectoryBatch data = read_dataset(dataset_dir);
    ControlTask task = make_control_task(config.env_spec(), action_gain);

    PolicyConfig pcfg;
    pcfg.gamma = config.objective.gamma;

    fs::create_directories(out_dir);
    PolicyOutcome outcome;
    PolicyEvaluation random_eval = evaluate_random_policy(task, n_episodes, pcfg.episode_len,
                                                          config.seed + 0xBA5E);
    outcome.random_mean = random_eval.mean_return;
    outcome.random_stderr = random_eval.stderr_return;

    json report;
    stamp_json(report, config);
    report["random"] = {{"mean", random_eval.mean_return}, {"stderr", random_eval.stderr_return}};
    json per_selector = json::array();
    for (const std::string& name : selectors) {
        FeatureSet selector = feature_set_from_name(name);
        TrainedPolicy policy = train_policy(ckpt.wm, task, data, selector, pcfg, config.seed);
        PolicyEvaluation eval = evaluate_policy(&ckpt.wm, policy.ac, task, n_episodes,
                                                pcfg.episode_len, config.seed + 0xE0A1);
        std::vector<std::string> rows;
        for (const PolicyCurvePoint& p : policy.curve) {
            rows.push_back(std::to_string(p.iteration) + "," + format_g17(p.mean_imagined_return));
        }
        write_csv(out_dir / ("policy_curve_" + name + ".csv"), stamp_comment(config),
                  "iteration,mean_imagined_return", rows);
        per_selector.push_back({{"selector", name},
                                {"mean", eval.mean_return},
                                {"stderr", eval.stderr_return},
                                {"gap_vs_random", eval.mean_return - random_eval.mean_return}});
        outcome.selectors.push_back(SelectorOutcome{name, eval.mean_return, eval.stderr_return});
        std::printf("selector %s: mean return %.3f (random %.3f)\n", name.c_str(),
                    eval.mean_return, random_eval.mean_return);
        std::fflush(stdout);
    }
    report["selectors"] = per_selector;
    write_text_atomic(out_dir / "comparison_report.json", report.dump(2) + "\n");
    return outcome;
}

void cmd_report(const fs::path& run_dir) {
    json summary;
    bool any = false;
    for (const char* name : {"ident_report.json", "classification_report.json", "comparison_report.json"}) {
        fs::path p = run_dir / name;
        if (fs::exists(p)) {
            summary[name] = json::parse(read_text_file(p));
            any = true;
        }
    }
    for (const char* name : {"loss.csv", "mi_curve.csv", "ident_curve.csv"}) {
        fs::path p = run_dir / name;
        if (fs::exists(p)) {
            std::vector<std::string> rows = read_csv_rows(p);
            summary[std::string(name) + ".rows"] = rows.size();
            if (!rows.empty()) summary[std::string(name) + ".last"] = rows.back();
            any = true;
        }
    }
    if (!any) {
        throw DataError("no reports found in " + run_dir.string());
    }
    write_text_atomic(run_dir / "report.json", summary.dump(2) + "\n");
    std::printf("%s\n", summary.dump(2).c_str());
}

} // namespace fwm
