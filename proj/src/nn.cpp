#include "factorwm/nn.hpp"

#include <cmath>

namespace fwm {

Mlp::Mlp(std::string name, std::vector<std::int64_t> widths, double slope,
         Activation output_activation, RngStream& rng, double init_scale)
    : name_(std::move(name)), widths_(std::move(widths)), slope_(slope), output_activation_(output_activation) {
    if (widths_.size() < 2) {
        throw ShapeError("Mlp " + name_ + " needs at least in/out widths");
    }
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
        std::int64_t fan_in = widths_[l];
        std::int64_t fan_out = widths_[l + 1];
        double a = init_scale * std::sqrt(1.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
        Tensor w = Tensor::zeros({fan_in, fan_out});
        for (double& v : w.raw()) v = rng.uniform(-a, a);
        weights_.push_back(Parameter{name_ + ".w" + std::to_string(l), std::move(w)});
        biases_.push_back(Parameter{name_ + ".b" + std::to_string(l), Tensor::zeros({fan_out})});
    }
}

Tensor Mlp::forward(const Tensor& x, Tape* param_tape) const {
    if (x.ndim() != 2 || x.cols() != in_dim()) {
        throw ShapeError("Mlp " + name_ + ": input shape " + shape_str(x.shape()) + " does not match in_dim " + std::to_string(in_dim()));
    }
    Tensor h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        Tensor w = weights_[l].value;
        Tensor b = biases_[l].value;
        if (param_tape) {
            w = param_tape->watch(w);
            b = param_tape->watch(b);
        }
        h = add_bias(matmul(h, w), b);
        bool last = (l + 1 == weights_.size());
        if (!last || output_activation_ == Activation::leaky_relu) {
            h = leaky_relu(h, slope_);
        }
    }
    return h;
}

void Mlp::eval(const double* in, double* out, std::vector<double>& scratch) const {
    std::int64_t max_w = 0;
    for (std::int64_t w : widths_) max_w = std::max(max_w, w);
    scratch.resize(static_cast<std::size_t>(2 * max_w));
    double* cur = scratch.data();
    double* nxt = scratch.data() + max_w;
    std::copy(in, in + in_dim(), cur);
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        std::int64_t ni = widths_[l];
        std::int64_t no = widths_[l + 1];
        const double* w = weights_[l].value.data().data();
        const double* b = biases_[l].value.data().data();
        bool last = (l + 1 == weights_.size());
        double* dst = last ? out : nxt;
        for (std::int64_t j = 0; j < no; ++j) dst[j] = b[j];
        for (std::int64_t i = 0; i < ni; ++i) {
            double v = cur[i];
            if (v == 0.0) continue;
            const double* wrow = w + i * no;
            for (std::int64_t j = 0; j < no; ++j) dst[j] += v * wrow[j];
        }
        if (!last || output_activation_ == Activation::leaky_relu) {
            for (std::int64_t j = 0; j < no; ++j) {
                if (dst[j] < 0.0) dst[j] *= slope_;
            }
        }
        std::swap(cur, nxt);
        if (!last) std::copy(dst, dst + no, cur);
    }
}

std::vector<double> Mlp::eval(const std::vector<double>& in) const {
    std::vector<double> out(static_cast<std::size_t>(out_dim()));
    std::vector<double> scratch;
    eval(in.data(), out.data(), scratch);
    return out;
}

std::vector<Parameter*> Mlp::parameters() {
    std::vector<Parameter*> ps;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        ps.push_back(&weights_[l]);
        ps.push_back(&biases_[l]);
    }
    return ps;
}

std::vector<const Parameter*> Mlp::parameters() const {
    std::vector<const Parameter*> ps;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        ps.push_back(&weights_[l]);
        ps.push_back(&biases_[l]);
    }
    return ps;
}

GaussianPair split_gaussian(const Tensor& raw, double sigma_floor) {
    if (raw.ndim() != 2 || raw.cols() % 2 != 0) {
        throw ShapeError("split_gaussian on shape " + shape_str(raw.shape()));
    }
    std::int64_t d = raw.cols() / 2;
    GaussianPair out;
    out.mu = slice_cols(raw, 0, d);
    out.sigma = add_scalar(softplus(slice_cols(raw, d, 2 * d)), sigma_floor);
    return out;
}

} // namespace fwm
