#pragma once

#include "factorwm/ops.hpp"
#include "factorwm/rng.hpp"
#include "factorwm/tensor.hpp"

#include <string>
#include <vector>

namespace fwm {

struct Parameter {
    std::string name;
    Tensor value;
};

enum class Activation { none, leaky_relu };

/// Fully connected network with LeakyReLU hidden units. Weights are stored
/// as [in, out] so a batch forward is x @ W + b.
class Mlp {
public:
    Mlp() = default;

    /// widths = {in, hidden..., out}. Weights start uniform(-a, a) with
    /// a = init_scale * sqrt(1 / fan_in); biases start at zero.
    Mlp(std::string name, std::vector<std::int64_t> widths, double slope,
        Activation output_activation, RngStream& rng, double init_scale = 1.0);

    /// Batch forward on x [n, in]. When param_tape is non-null the weights
    /// are watched there (trainable); otherwise they act as constants, which
    /// is how frozen networks participate in someone else's graph.
    Tensor forward(const Tensor& x, Tape* param_tape) const;

    /// Allocation-light single-sample forward for tight simulation loops.
    void eval(const double* in, double* out, std::vector<double>& scratch) const;
    std::vector<double> eval(const std::vector<double>& in) const;

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;

    std::int64_t in_dim() const { return widths_.front(); }
    std::int64_t out_dim() const { return widths_.back(); }
    int num_layers() const { return static_cast<int>(weights_.size()); }
    double slope() const { return slope_; }
    const std::string& name() const { return name_; }

    Tensor& weight(int layer) { return weights_[static_cast<std::size_t>(layer)].value; }
    Tensor& bias(int layer) { return biases_[static_cast<std::size_t>(layer)].value; }
    const Tensor& weight(int layer) const { return weights_[static_cast<std::size_t>(layer)].value; }
    const Tensor& bias(int layer) const { return biases_[static_cast<std::size_t>(layer)].value; }

private:
    std::string name_;
    std::vector<std::int64_t> widths_;
    std::vector<Parameter> weights_;
    std::vector<Parameter> biases_;
    double slope_ = 0.01;
    Activation output_activation_ = Activation::none;
};

struct GaussianPair {
    Tensor mu;
    Tensor sigma;
};

/// Splits a [n, 2d] head output into mu and sigma = softplus(raw) + floor.
GaussianPair split_gaussian(const Tensor& raw, double sigma_floor);

} // namespace fwm
