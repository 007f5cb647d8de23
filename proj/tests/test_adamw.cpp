#include <catch2/catch_amalgamated.hpp>

#include "factorwm/adamw.hpp"
#include "factorwm/ops.hpp"

#include <cmath>

using namespace fwm;

namespace {

// One optimizer step against an explicit gradient for a single parameter.
void step_with_grad(AdamW& opt, Parameter& p, const std::vector<double>& grad) {
    Tape tape;
    Tensor w = tape.watch(p.value);
    Tensor g = Tensor::from(p.value.shape(), grad);
    Tensor loss = sum_all(mul(w, g)); // d loss / d w = g
    tape.backward(loss);
    opt.step(tape);
}

} // namespace

TEST_CASE("zero gradient and zero weight decay leave parameters unchanged") {
    Parameter p{"w", Tensor::from({3}, {1.0, -2.0, 3.0})};
    AdamW opt({&p}, AdamWConfig{0.01, 0.9, 0.999, 1e-8, 0.0});
    step_with_grad(opt, p, {0.0, 0.0, 0.0});
    REQUIRE(p.value(0) == 1.0);
    REQUIRE(p.value(1) == -2.0);
    REQUIRE(p.value(2) == 3.0);
    REQUIRE(opt.slots()[0].step_count == 1);
}

TEST_CASE("bias-corrected first step moves a scalar by about -lr") {
    Parameter p{"w", Tensor::from({1}, {0.5})};
    AdamW opt({&p}, AdamWConfig{0.01, 0.9, 0.999, 1e-8, 0.0});
    step_with_grad(opt, p, {1.0});
    // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps) ~ lr
    REQUIRE_THAT(p.value(0), Catch::Matchers::WithinAbs(0.5 - 0.01, 1e-6));
}

TEST_CASE("ten steps on f(w) = w^2 from w=1 decrease f monotonically") {
    Parameter p{"w", Tensor::from({1}, {1.0})};
    AdamW opt({&p}, AdamWConfig{0.05, 0.9, 0.999, 1e-8, 0.0});
    double prev = 1.0;
    for (int i = 0; i < 10; ++i) {
        Tape tape;
        Tensor w = tape.watch(p.value);
        Tensor f = sum_all(square(w));
        tape.backward(f);
        opt.step(tape);
        double now = p.value(0) * p.value(0);
        REQUIRE(now < prev);
        prev = now;
    }
}

TEST_CASE("beta limits reduce to sign-SGD on the first step") {
    for (double g : {2.5, -0.3}) {
        Parameter p{"w", Tensor::from({1}, {0.0})};
        AdamW opt({&p}, AdamWConfig{0.01, 0.0, 0.0, 1e-12, 0.0});
        step_with_grad(opt, p, {g});
        double sign = g > 0 ? 1.0 : -1.0;
        REQUIRE_THAT(p.value(0), Catch::Matchers::WithinAbs(-0.01 * sign, 1e-9));
    }
}

TEST_CASE("decoupled weight decay shrinks parameters independently of the gradient") {
    Parameter p{"w", Tensor::from({1}, {2.0})};
    AdamW opt({&p}, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.5});
    step_with_grad(opt, p, {0.0});
    // no gradient: only the decay term lr * wd * w = 0.1 * 0.5 * 2
    REQUIRE_THAT(p.value(0), Catch::Matchers::WithinAbs(2.0 - 0.1, 1e-12));
}

TEST_CASE("non-finite gradients raise a training error naming the parameter") {
    Parameter p{"encoder.w0", Tensor::from({1}, {1.0})};
    AdamW opt({&p}, AdamWConfig{});
    bool saved = finite_checks();
    finite_checks() = false;
    try {
        step_with_grad(opt, p, {std::numeric_limits<double>::quiet_NaN()});
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        REQUIRE(std::string(e.what()).find("encoder.w0") != std::string::npos);
    }
    finite_checks() = saved;
}

TEST_CASE("parameters absent from the tape are skipped") {
    Parameter a{"a", Tensor::from({1}, {1.0})};
    Parameter b{"b", Tensor::from({1}, {1.0})};
    AdamW opt({&a, &b}, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
    Tape tape;
    Tensor wa = tape.watch(a.value);
    Tensor loss = sum_all(square(wa));
    tape.backward(loss);
    opt.step(tape);
    REQUIRE(a.value(0) != 1.0);
    REQUIRE(b.value(0) == 1.0);
    REQUIRE(opt.slots()[0].step_count == 1);
    REQUIRE(opt.slots()[1].step_count == 0);
}
