#include "factorwm/synth_env.hpp"

#include "factorwm/serialize.hpp"
#include "factorwm/version.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <json.hpp>

#include <cmath>
#include <sstream>

namespace fwm {

namespace fs = std::filesystem;
using nlohmann::json;

std::int64_t BlockDims::dim(int block) const {
    switch (block) {
        case kCtrlRew: return ctrl_rew;
        case kUnctrlRew: return unctrl_rew;
        case kCtrlFree: return ctrl_free;
        case kNoise: return noise;
        default: throw ShapeError("bad block index " + std::to_string(block));
    }
}

std::int64_t BlockDims::offset(int block) const {
    std::int64_t off = 0;
    for (int b = 0; b < block; ++b) off += dim(b);
    return off;
}

int BlockDims::block_of(std::int64_t i) const {
    for (int b = 0; b < 4; ++b) {
        if (i < offset(b) + dim(b)) return b;
    }
    throw ShapeError("latent index " + std::to_string(i) + " out of range");
}

void EnvSpec::validate() const {
    if (dims.ctrl_rew < 0 || dims.unctrl_rew < 0 || dims.ctrl_free < 0 || dims.noise < 0) {
        throw ConfigError("block dimensions must be non-negative");
    }
    if (dims.total() < 1) {
        throw ConfigError("total latent dimension must be at least 1");
    }
    if (action_dim < 1) {
        throw ConfigError("action_dim must be at least 1");
    }
    if (lags < 1) {
        throw ConfigError("lags must be at least 1");
    }
    if (noise_std < 0.0) {
        throw ConfigError("noise_std must be non-negative");
    }
    if (n_traj < 1 || steps < lags + 1) {
        throw ConfigError("need n_traj >= 1 and steps >= lags + 1");
    }
    if (!(slope > 0.0 && slope < 1.0)) {
        throw ConfigError("slope must lie in (0,1)");
    }
}

std::int64_t GroundTruthModel::transition_input_width(int block) const {
    std::int64_t d_lat = block_reads_full_history(block) ? spec.dims.total() : spec.dims.rew();
    std::int64_t d_act = block_reads_actions(block) ? spec.action_dim : 0;
    return spec.lags * (d_lat + d_act);
}

void GroundTruthModel::gather_transition_input(int block,
                                               const double* const* latent_hist,
                                               const double* const* action_hist,
                                               std::vector<double>& out) const {
    out.clear();
    std::int64_t d_lat = block_reads_full_history(block) ? spec.dims.total() : spec.dims.rew();
    for (std::int64_t k = 0; k < spec.lags; ++k) {
        const double* lat = latent_hist[k];
        out.insert(out.end(), lat, lat + d_lat); // rew block sits first, so a prefix suffices
    }
    if (block_reads_actions(block)) {
        for (std::int64_t k = 0; k < spec.lags; ++k) {
            const double* act = action_hist[k];
            out.insert(out.end(), act, act + spec.action_dim);
        }
    }
}

double GroundTruthModel::reward(const double* rew_latent) const {
    std::int64_t d = spec.dims.rew();
    if (reward_kind == RewardKind::negative_sq_rew) {
        double s = 0.0;
        for (std::int64_t i = 0; i < d; ++i) s += rew_latent[i] * rew_latent[i];
        return -s;
    }
    double out = 0.0;
    std::vector<double> scratch;
    reward_map.eval(rew_latent, &out, scratch);
    return out;
}

namespace {

void fill_column_normalized(Tensor& w, RngStream& rng) {
    std::int64_t in = w.shape()[0], out = w.shape()[1];
    std::vector<double>& v = w.raw();
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    for (std::int64_t j = 0; j < out; ++j) {
        double norm = 0.0;
        for (std::int64_t i = 0; i < in; ++i) norm += v[static_cast<std::size_t>(i * out + j)] * v[static_cast<std::size_t>(i * out + j)];
        norm = std::sqrt(norm);
        if (norm == 0.0) norm = 1.0;
        for (std::int64_t i = 0; i < in; ++i) v[static_cast<std::size_t>(i * out + j)] /= norm;
    }
}

double min_singular_value(const Tensor& w) {
    std::int64_t in = w.shape()[0], out = w.shape()[1];
    Eigen::MatrixXd m(in, out);
    for (std::int64_t i = 0; i < in; ++i) {
        for (std::int64_t j = 0; j < out; ++j) m(i, j) = w(i, j);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues().minCoeff();
}

constexpr double kMinMixerSingularValue = 0.1;
constexpr int kMaxResample = 100;

void resample_until_invertible(Tensor& w, RngStream& rng, const char* what) {
    for (int attempt = 0; attempt < kMaxResample; ++attempt) {
        fill_column_normalized(w, rng);
        if (min_singular_value(w) >= kMinMixerSingularValue) return;
    }
    throw NumericError(std::string(what) + ": could not reach the singular-value floor after " + std::to_string(kMaxResample) + " attempts");
}

std::array<Mlp, 4> build_transitions(const EnvSpec& spec, int layers, Activation act, RngStream& rng) {
    std::array<Mlp, 4> out;
    GroundTruthModel probe; // only for width computation
    probe.spec = spec;
    for (int b = 0; b < 4; ++b) {
        std::int64_t in = probe.transition_input_width(b);
        std::vector<std::int64_t> widths{std::max<std::int64_t>(in, 1)};
        for (int l = 1; l < layers; ++l) widths.push_back(std::max<std::int64_t>(in, 1));
        widths.push_back(spec.dims.dim(b));
        out[static_cast<std::size_t>(b)] = Mlp("g" + std::to_string(b + 1), widths, spec.slope, act, rng);
        if (in == 0) continue; // degenerate block with no inputs keeps its zero-width weights
        for (int l = 0; l < out[static_cast<std::size_t>(b)].num_layers(); ++l) {
            if (out[static_cast<std::size_t>(b)].weight(l).size() > 0) {
                fill_column_normalized(out[static_cast<std::size_t>(b)].weight(l), rng);
            }
        }
    }
    return out;
}

// Spectral radius of the lag-companion form of the latent-to-latent part.
double companion_spectral_radius(const GroundTruthModel& model) {
    std::int64_t ds = model.spec.dims.total();
    std::int64_t lags = model.spec.lags;
    Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(ds * lags, ds * lags);
    // Row block 0 holds the transition coefficients; input layout per block is
    // lagged latents oldest..newest, so lag k (0 = oldest) sits at column
    // block (lags - 1 - k) of the companion state [s_{t-1}; s_{t-2}; ...].
    for (int b = 0; b < 4; ++b) {
        const Tensor& w = model.transitions[static_cast<std::size_t>(b)].weight(0);
        std::int64_t d_lat = model.block_reads_full_history(b) ? ds : model.spec.dims.rew();
        std::int64_t row0 = model.spec.dims.offset(b);
        for (std::int64_t k = 0; k < lags; ++k) {
            for (std::int64_t i = 0; i < d_lat; ++i) {
                for (std::int64_t j = 0; j < model.spec.dims.dim(b); ++j) {
                    // column block for s_{t-lags+k}: age = lags-1-k
                    comp(row0 + j, (lags - 1 - k) * ds + i) = w(k * d_lat + i, j);
                }
            }
        }
    }
    for (std::int64_t k = 1; k < lags; ++k) {
        comp.block(k * ds, (k - 1) * ds, ds, ds).setIdentity();
    }
    return comp.eigenvalues().cwiseAbs().maxCoeff();
}

} // namespace

GroundTruthModel sample_ground_truth(const EnvSpec& spec) {
    spec.validate();
    GroundTruthModel model;
    model.spec = spec;
    RngStream rng(spec.seed, 1);

    std::int64_t ds = spec.dims.total();
    model.obs_mixer = Mlp("f1", {ds, ds, ds, ds}, spec.slope, Activation::leaky_relu, rng);
    for (int l = 0; l < model.obs_mixer.num_layers(); ++l) {
        resample_until_invertible(model.obs_mixer.weight(l), rng, "obs mixer");
    }

    model.reward_map = Mlp("f2", {std::max<std::int64_t>(spec.dims.rew(), 1), 1}, spec.slope, Activation::leaky_relu, rng);
    fill_column_normalized(model.reward_map.weight(0), rng);

    model.transitions = build_transitions(spec, 1, Activation::leaky_relu, rng);
    return model;
}

GroundTruthModel make_linear_system(const EnvSpec& spec) {
    spec.validate();
    GroundTruthModel model;
    model.spec = spec;
    model.linear = true;
    model.noise_mode = NoiseMode::constant;
    RngStream rng(spec.seed, 2);

    std::int64_t ds = spec.dims.total();
    model.obs_mixer = Mlp("f1", {ds, ds}, spec.slope, Activation::none, rng);
    resample_until_invertible(model.obs_mixer.weight(0), rng, "obs mixer");

    model.reward_map = Mlp("f2", {std::max<std::int64_t>(spec.dims.rew(), 1), 1}, spec.slope, Activation::none, rng);
    fill_column_normalized(model.reward_map.weight(0), rng);

    const double gain = 0.5 / std::sqrt(static_cast<double>(spec.lags));
    for (int attempt = 0; attempt < kMaxResample; ++attempt) {
        model.transitions = build_transitions(spec, 1, Activation::none, rng);
        for (auto& g : model.transitions) {
            if (g.weight(0).size() > 0) {
                for (double& v : g.weight(0).raw()) v *= gain;
            }
        }
        if (companion_spectral_radius(model) < 0.95) {
            return model;
        }
    }
    throw NumericError("make_linear_system: no stable draw in " + std::to_string(kMaxResample) + " attempts");
}

void env_step(const GroundTruthModel& model,
              const double* const* latent_hist,
              const double* const* action_hist,
              RngStream& rng, double* out) {
    const EnvSpec& spec = model.spec;
    std::int64_t ds = spec.dims.total();
    thread_local std::vector<double> input, scratch;
    for (int b = 0; b < 4; ++b) {
        std::int64_t d = spec.dims.dim(b);
        if (d == 0) continue;
        model.gather_transition_input(b, latent_hist, action_hist, input);
        model.transitions[static_cast<std::size_t>(b)].eval(input.data(), out + spec.dims.offset(b), scratch);
    }
    double modulation = 1.0;
    if (model.noise_mode == NoiseMode::history_scaled) {
        double m = 0.0;
        for (std::int64_t k = 0; k < spec.lags; ++k) {
            for (std::int64_t i = 0; i < ds; ++i) m += latent_hist[k][i];
        }
        modulation = m / static_cast<double>(spec.lags * ds);
    }
    for (std::int64_t i = 0; i < ds; ++i) {
        out[i] += spec.noise_std * rng.gaussian() * modulation;
    }
}

TrajectoryBatch rollout(const GroundTruthModel& model) {
    const EnvSpec& spec = model.spec;
    std::int64_t ds = spec.dims.total();
    TrajectoryBatch batch;
    batch.n = spec.n_traj;
    batch.steps = spec.steps;
    batch.dims = spec.dims;
    batch.action_dim = spec.action_dim;
    batch.obs_dim = ds;
    batch.obs.assign(static_cast<std::size_t>(spec.n_traj * spec.steps * ds), 0.0);
    batch.actions.assign(static_cast<std::size_t>(spec.n_traj * spec.steps * spec.action_dim), 0.0);
    batch.rewards.assign(static_cast<std::size_t>(spec.n_traj * spec.steps), 0.0);
    batch.latents.assign(static_cast<std::size_t>(spec.n_traj * spec.steps * ds), 0.0);

    RngStream base(spec.seed, 3);
    std::vector<const double*> lat_ptr(static_cast<std::size_t>(spec.lags));
    std::vector<const double*> act_ptr(static_cast<std::size_t>(spec.lags));
    std::vector<double> scratch;

    for (std::int64_t traj = 0; traj < spec.n_traj; ++traj) {
        RngStream rng = base.derive(static_cast<std::uint64_t>(traj));
        double* lat = batch.latents.data() + traj * spec.steps * ds;
        double* act = batch.actions.data() + traj * spec.steps * spec.action_dim;
        double* rew = batch.rewards.data() + traj * spec.steps;
        double* obs = batch.obs.data() + traj * spec.steps * ds;
        for (std::int64_t t = 0; t < spec.steps; ++t) {
            double* s_t = lat + t * ds;
            if (t < spec.lags) {
                for (std::int64_t i = 0; i < ds; ++i) s_t[i] = rng.gaussian();
            } else {
                for (std::int64_t k = 0; k < spec.lags; ++k) {
                    lat_ptr[static_cast<std::size_t>(k)] = lat + (t - spec.lags + k) * ds;
                    act_ptr[static_cast<std::size_t>(k)] = act + (t - spec.lags + k) * spec.action_dim;
                }
                env_step(model, lat_ptr.data(), act_ptr.data(), rng, s_t);
            }
            act[t * spec.action_dim + rng.uniform_int(static_cast<int>(spec.action_dim))] = 1.0;
            model.obs_mixer.eval(s_t, obs + t * ds, scratch);
            rew[t] = model.reward(s_t); // rew block is the latent prefix
        }
    }
    return batch;
}

std::string env_spec_canonical(const EnvSpec& spec) {
    std::ostringstream os;
    os << "d_ar=" << spec.dims.ctrl_rew
       << ";d_abar_r=" << spec.dims.unctrl_rew
       << ";d_a_rbar=" << spec.dims.ctrl_free
       << ";d_abar_rbar=" << spec.dims.noise
       << ";d_a=" << spec.action_dim
       << ";tau=" << spec.lags
       << ";sigma=" << spec.noise_std
       << ";n_traj=" << spec.n_traj
       << ";T=" << spec.steps
       << ";seed=" << spec.seed
       << ";slope=" << spec.slope;
    return os.str();
}

void write_dataset(const fs::path& dir, const TrajectoryBatch& batch,
                   const EnvSpec& spec, const std::string& config_hash,
                   const std::string& version) {
    fs::create_directories(dir);
    json manifest;
    manifest["schema_version"] = 1;
    manifest["kind"] = "dataset";
    manifest["dtype"] = "f64le";
    manifest["order"] = "row-major";
    manifest["version"] = version;
    manifest["config_hash"] = config_hash;
    manifest["seed"] = spec.seed;
    manifest["spec_hash"] = hex64(fnv1a64(env_spec_canonical(spec)));
    manifest["n_traj"] = batch.n;
    manifest["steps"] = batch.steps;
    manifest["obs_dim"] = batch.obs_dim;
    manifest["action_dim"] = batch.action_dim;
    manifest["block_dims"] = {batch.dims.ctrl_rew, batch.dims.unctrl_rew, batch.dims.ctrl_free, batch.dims.noise};
    manifest["arrays"] = {
        {{"name", "obs"}, {"file", "obs.bin"}, {"shape", {batch.n, batch.steps, batch.obs_dim}}},
        {{"name", "actions"}, {"file", "actions.bin"}, {"shape", {batch.n, batch.steps, batch.action_dim}}},
        {{"name", "rewards"}, {"file", "rewards.bin"}, {"shape", {batch.n, batch.steps}}},
        {{"name", "latents"}, {"file", "latents.bin"}, {"shape", {batch.n, batch.steps, batch.dims.total()}}},
    };
    write_f64_file(dir / "obs.bin", batch.obs);
    write_f64_file(dir / "actions.bin", batch.actions);
    write_f64_file(dir / "rewards.bin", batch.rewards);
    write_f64_file(dir / "latents.bin", batch.latents);
    write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

TrajectoryBatch read_dataset(const fs::path& dir, std::string* spec_hash_out) {
    json manifest = json::parse(read_text_file(dir / "manifest.json"));
    if (manifest.at("kind").get<std::string>() != "dataset") {
        throw DataError(dir.string() + " is not a dataset directory");
    }
    TrajectoryBatch batch;
    batch.n = manifest.at("n_traj").get<std::int64_t>();
    batch.steps = manifest.at("steps").get<std::int64_t>();
    batch.obs_dim = manifest.at("obs_dim").get<std::int64_t>();
    batch.action_dim = manifest.at("action_dim").get<std::int64_t>();
    auto bd = manifest.at("block_dims").get<std::vector<std::int64_t>>();
    if (bd.size() != 4) {
        throw DataError("manifest block_dims must have 4 entries");
    }
    batch.dims = BlockDims{bd[0], bd[1], bd[2], bd[3]};
    batch.obs = read_f64_file(dir / "obs.bin", batch.n * batch.steps * batch.obs_dim);
    batch.actions = read_f64_file(dir / "actions.bin", batch.n * batch.steps * batch.action_dim);
    batch.rewards = read_f64_file(dir / "rewards.bin", batch.n * batch.steps);
    batch.latents = read_f64_file(dir / "latents.bin", batch.n * batch.steps * batch.dims.total());
    if (spec_hash_out) {
        *spec_hash_out = manifest.at("spec_hash").get<std::string>();
    }
    return batch;
}

} // namespace fwm
