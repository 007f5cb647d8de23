#include "factorwm/config.hpp"

#include "factorwm/serialize.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

namespace fwm {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
    std::int64_t out = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw ConfigError(key + ": expected integer, got '" + value + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        double out = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + value + "'");
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// One schema entry per key; getter renders the canonical text form.
struct Field {
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define INT_FIELD(path) \
    Field{[](ExperimentConfig& c, const std::string& v) { c.path = parse_int(#path, v); }, \
          [](const ExperimentConfig& c) { return std::to_string(c.path); }}
#define DOUBLE_FIELD(path) \
    Field{[](ExperimentConfig& c, const std::string& v) { c.path = parse_double(#path, v); }, \
          [](const ExperimentConfig& c) { return fmt_double(c.path); }}
#define UINT_FIELD(path) \
    Field{[](ExperimentConfig& c, const std::string& v) { c.path = static_cast<std::uint64_t>(parse_int(#path, v)); }, \
          [](const ExperimentConfig& c) { return std::to_string(c.path); }}
#define BOOL_FIELD(path) \
    Field{[](ExperimentConfig& c, const std::string& v) { c.path = parse_bool(#path, v); }, \
          [](const ExperimentConfig& c) { return c.path ? std::string("true") : std::string("false"); }}
#define STRING_FIELD(path) \
    Field{[](ExperimentConfig& c, const std::string& v) { c.path = v; }, \
          [](const ExperimentConfig& c) { return c.path; }}

const std::map<std::string, Field>& schema() {
    static const std::map<std::string, Field> fields = {
        {"seed", UINT_FIELD(seed)},
        {"output_dir", STRING_FIELD(output_dir)},
        {"env.d_ar", INT_FIELD(env.d_ar)},
        {"env.d_abar_r", INT_FIELD(env.d_abar_r)},
        {"env.d_a_rbar", INT_FIELD(env.d_a_rbar)},
        {"env.d_abar_rbar", INT_FIELD(env.d_abar_rbar)},
        {"env.d_a", INT_FIELD(env.d_a)},
        {"env.tau", INT_FIELD(env.tau)},
        {"env.sigma", DOUBLE_FIELD(env.sigma)},
        {"env.n_traj", INT_FIELD(env.n_traj)},
        {"env.steps", INT_FIELD(env.steps)},
        {"env.slope", DOUBLE_FIELD(env.slope)},
        {"model.enc_hidden", INT_FIELD(model.enc_hidden)},
        {"model.enc_layers", INT_FIELD(model.enc_layers)},
        {"model.dec_hidden", INT_FIELD(model.dec_hidden)},
        {"model.dec_layers", INT_FIELD(model.dec_layers)},
        {"model.reward_layers", INT_FIELD(model.reward_layers)},
        {"model.reward_hidden", INT_FIELD(model.reward_hidden)},
        {"model.sigma_floor", DOUBLE_FIELD(model.sigma_floor)},
        {"model.init_scale", DOUBLE_FIELD(model.init_scale)},
        {"model.slope", DOUBLE_FIELD(model.slope)},
        {"objective.beta1", DOUBLE_FIELD(objective.beta1)},
        {"objective.beta2", DOUBLE_FIELD(objective.beta2)},
        {"objective.beta3", DOUBLE_FIELD(objective.beta3)},
        {"objective.beta4", DOUBLE_FIELD(objective.beta4)},
        {"objective.lambda1", DOUBLE_FIELD(objective.lambda1)},
        {"objective.lambda2", DOUBLE_FIELD(objective.lambda2)},
        {"objective.gamma", DOUBLE_FIELD(objective.gamma)},
        {"objective.horizon", INT_FIELD(objective.horizon)},
        {"objective.include_current_action", BOOL_FIELD(objective.include_current_action)},
        {"optim.lr", DOUBLE_FIELD(optim.lr)},
        {"optim.critic_lr", DOUBLE_FIELD(optim.critic_lr)},
        {"optim.weight_decay", DOUBLE_FIELD(optim.weight_decay)},
        {"optim.batch", INT_FIELD(optim.batch)},
        {"optim.sequence_length", INT_FIELD(optim.sequence_length)},
        {"optim.epochs", INT_FIELD(optim.epochs)},
        {"optim.k_mi", INT_FIELD(optim.k_mi)},
        {"optim.mi_batch", INT_FIELD(optim.mi_batch)},
        {"eval.n_fit", INT_FIELD(eval.n_fit)},
        {"eval.n_test", INT_FIELD(eval.n_test)},
        {"eval.eval_every", INT_FIELD(eval.eval_every)},
    };
    return fields;
}

#undef INT_FIELD
#undef DOUBLE_FIELD
#undef UINT_FIELD
#undef BOOL_FIELD
#undef STRING_FIELD

} // namespace

void ExperimentConfig::set(const std::string& dotted_key, const std::string& value) {
    auto it = schema().find(dotted_key);
    if (it == schema().end()) {
        throw ConfigError("unknown config key '" + dotted_key + "'");
    }
    it->second.set(*this, trim(value));
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
    ExperimentConfig config;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        if (s.front() == '[' && s.back() == ']') {
            section = trim(s.substr(1, s.size() - 2));
            continue;
        }
        std::size_t eq = s.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        std::string dotted = section.empty() ? key : section + "." + key;
        config.set(dotted, value);
    }
    return config;
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
    return from_text(read_text_file(path));
}

std::string ExperimentConfig::canonical() const {
    // Group by section, sections and keys in schema (lexicographic) order.
    std::ostringstream os;
    std::string current_section;
    bool first = true;
    for (const auto& [key, field] : schema()) {
        std::size_t dot = key.find('.');
        std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
        std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
        if (section != current_section || first) {
            if (!section.empty() && section != current_section) {
                os << "\n[" << section << "]\n";
            }
            current_section = section;
            first = false;
        }
        os << leaf << " = " << field.get(*this) << "\n";
    }
    return os.str();
}

std::string ExperimentConfig::hash() const {
    return hex64(fnv1a64(canonical()));
}

void ExperimentConfig::validate() const {
    env_spec().validate();
    if (objective.beta1 < 0 || objective.beta2 < 0 || objective.beta3 < 0 || objective.beta4 < 0) {
        throw ConfigError("beta weights must be non-negative");
    }
    if (objective.lambda1 < 0 || objective.lambda2 < 0) {
        throw ConfigError("lambda weights must be non-negative");
    }
    if (!(objective.gamma >= 0.0 && objective.gamma < 1.0)) {
        throw ConfigError("gamma must lie in [0, 1)");
    }
    if (objective.horizon < 1) {
        throw ConfigError("horizon must be at least 1");
    }
    if (optim.batch < 2 || optim.sequence_length < env.tau + 1 || optim.epochs < 0 || optim.k_mi < 0 || optim.mi_batch < 2) {
        throw ConfigError("bad optim section (need batch >= 2, sequence_length >= tau + 1, mi_batch >= 2)");
    }
    if (optim.lr < 0 || optim.critic_lr < 0 || optim.weight_decay < 0) {
        throw ConfigError("learning rates and weight decay must be non-negative");
    }
    if (eval.n_fit < 2 || eval.n_test < 2 || eval.eval_every < 1) {
        throw ConfigError("bad eval section");
    }
    if (!(model.sigma_floor > 0.0)) {
        throw ConfigError("model.sigma_floor must be positive");
    }
    if (!(model.slope > 0.0 && model.slope < 1.0)) {
        throw ConfigError("model.slope must lie in (0,1)");
    }
    if (model.enc_layers < 1 || model.dec_layers < 1 || model.reward_layers < 1) {
        throw ConfigError("network depths must be at least 1");
    }
}

EnvSpec ExperimentConfig::env_spec() const {
    EnvSpec spec;
    spec.dims = BlockDims{env.d_ar, env.d_abar_r, env.d_a_rbar, env.d_abar_rbar};
    spec.action_dim = env.d_a;
    spec.lags = env.tau;
    spec.noise_std = env.sigma;
    spec.n_traj = env.n_traj;
    spec.steps = env.steps;
    spec.seed = seed;
    spec.slope = env.slope;
    return spec;
}

} // namespace fwm
