#include "factorwm/gradcheck.hpp"

#include <cmath>

namespace fwm {

double grad_check(const ScalarFn& f, const Tensor& x0, double h) {
    std::vector<double> g_ad(static_cast<std::size_t>(x0.size()), 0.0);
    {
        Tape tape;
        Tensor x = tape.watch(x0);
        Tensor y = f(tape, x);
        if (y.size() != 1) {
            throw ShapeError("grad_check target must be scalar-valued");
        }
        tape.backward(y);
        if (const std::vector<double>* g = tape.grad(x)) {
            g_ad = *g;
        }
    }

    auto eval_at = [&](const std::vector<double>& data) {
        Tape tape;
        Tensor x = Tensor::from(x0.shape(), data);
        return f(tape, x).value();
    };

    std::vector<double> point = x0.data();
    double worst = 0.0;
    for (std::size_t i = 0; i < point.size(); ++i) {
        double saved = point[i];
        point[i] = saved + h;
        double up = eval_at(point);
        point[i] = saved - h;
        double down = eval_at(point);
        point[i] = saved;
        double g_fd = (up - down) / (2.0 * h);
        double rel = std::abs(g_ad[i] - g_fd) / (std::abs(g_ad[i]) + std::abs(g_fd) + 1e-8);
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace fwm
