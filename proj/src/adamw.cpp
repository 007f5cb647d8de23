#include "factorwm/adamw.hpp"

#include <cmath>

namespace fwm {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        std::size_t n = static_cast<std::size_t>(params_[i]->value.size());
        slots_[i].m.assign(n, 0.0);
        slots_[i].v.assign(n, 0.0);
    }
}

void AdamW::step(const Tape& tape) {
    for (std::size_t p = 0; p < params_.size(); ++p) {
        Parameter& param = *params_[p];
        const std::vector<double>* grad = tape.grad(param.value);
        if (!grad) continue;
        for (double g : *grad) {
            if (!std::isfinite(g)) {
                throw TrainingError("non-finite gradient for parameter " + param.name);
            }
        }
        Slot& slot = slots_[p];
        slot.step_count += 1;
        double bc_m = 1.0 - std::pow(config_.beta_m, static_cast<double>(slot.step_count));
        double bc_v = 1.0 - std::pow(config_.beta_v, static_cast<double>(slot.step_count));
        std::vector<double>& w = param.value.raw();
        for (std::size_t i = 0; i < w.size(); ++i) {
            double g = (*grad)[i];
            slot.m[i] = config_.beta_m * slot.m[i] + (1.0 - config_.beta_m) * g;
            slot.v[i] = config_.beta_v * slot.v[i] + (1.0 - config_.beta_v) * g * g;
            double m_hat = slot.m[i] / bc_m;
            double v_hat = slot.v[i] / bc_v;
            w[i] -= config_.lr * config_.weight_decay * w[i];
            w[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
        }
    }
}

} // namespace fwm
