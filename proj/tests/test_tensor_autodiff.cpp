#include <catch2/catch_amalgamated.hpp>

#include "factorwm/gradcheck.hpp"
#include "factorwm/ops.hpp"
#include "factorwm/tensor.hpp"
#include "test_helpers.hpp"

#include <cmath>

using namespace fwm;
using test::random_away_from_zero;
using test::random_tensor;

TEST_CASE("tensor construction and invariants") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.size() == 6);
    REQUIRE(t(1, 2) == 6.0);
    REQUIRE_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
    REQUIRE(Tensor::scalar(3.5).value() == 3.5);
}

TEST_CASE("matmul identity and hand product") {
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    RngStream rng(1);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor y = matmul(eye, x);
    REQUIRE(test::max_abs_diff(y.data(), x.data()) == 0.0);

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {0, 1});
    Tensor c = matmul(a, b);
    REQUIRE(c(0, 0) == 2.0);
    REQUIRE(c(1, 0) == 4.0);

    REQUIRE_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), ShapeError);
    try {
        matmul(a, Tensor::zeros({3, 1}));
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        REQUIRE(msg.find("[2, 2]") != std::string::npos);
        REQUIRE(msg.find("[3, 1]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient of sum(a@b) equals ones @ b^T") {
    RngStream rng(2);
    Tensor a = random_tensor({5, 7}, rng);
    Tensor b = random_tensor({7, 2}, rng);
    Tape tape;
    Tensor aw = tape.watch(a);
    Tensor y = sum_all(matmul(aw, b));
    tape.backward(y);
    const std::vector<double>* g = tape.grad(aw);
    REQUIRE(g != nullptr);
    // d sum(AB) / dA = 1 @ B^T: row-independent, entry (i,k) = sum_j B[k,j]
    for (std::int64_t i = 0; i < 5; ++i) {
        for (std::int64_t k = 0; k < 7; ++k) {
            double expect = 0.0;
            for (std::int64_t j = 0; j < 2; ++j) expect += b(k, j);
            REQUIRE_THAT((*g)[static_cast<std::size_t>(i * 7 + k)],
                         Catch::Matchers::WithinAbs(expect, 1e-12));
        }
    }
    // and against the finite-difference oracle
    double err = grad_check([&](Tape& t, const Tensor& x) { return sum_all(matmul(x, b)); }, a);
    REQUIRE(err < 1e-9);
}

TEST_CASE("gradients of every elementwise op match central finite differences") {
    RngStream rng(3);
    Tensor x = random_away_from_zero({4, 3}, rng);
    Tensor other = random_away_from_zero({4, 3}, rng);
    Tensor pos = test::random_positive({4, 3}, rng);

    auto check = [&](const char* name, const ScalarFn& f, const Tensor& at, double tol = 1e-6) {
        INFO(name);
        REQUIRE(grad_check(f, at) < tol);
    };

    check("add", [&](Tape&, const Tensor& t) { return sum_all(add(t, other)); }, x);
    check("sub", [&](Tape&, const Tensor& t) { return sum_all(sub(other, t)); }, x);
    check("mul", [&](Tape&, const Tensor& t) { return sum_all(mul(t, other)); }, x);
    check("div", [&](Tape&, const Tensor& t) { return sum_all(div(other, t)); }, pos);
    check("div numerator", [&](Tape&, const Tensor& t) { return sum_all(div(t, pos)); }, x);
    check("square", [&](Tape&, const Tensor& t) { return sum_all(square(t)); }, x);
    check("exp", [&](Tape&, const Tensor& t) { return sum_all(fwm::exp(t)); }, x);
    check("log", [&](Tape&, const Tensor& t) { return sum_all(fwm::log(t)); }, pos);
    check("softplus", [&](Tape&, const Tensor& t) { return sum_all(softplus(t)); }, x);
    check("leaky_relu", [&](Tape&, const Tensor& t) { return sum_all(leaky_relu(t, 0.01)); }, x, 1e-5);
    check("add_scalar", [&](Tape&, const Tensor& t) { return sum_all(add_scalar(t, 1.5)); }, x);
    check("mul_scalar", [&](Tape&, const Tensor& t) { return sum_all(mul_scalar(t, -2.5)); }, x);
    check("mean_all", [&](Tape&, const Tensor& t) { return mean_all(t); }, x);
    check("row_sum", [&](Tape&, const Tensor& t) { return mean_all(row_sum(t)); }, x);
    check("reshape", [&](Tape&, const Tensor& t) { return sum_all(square(reshape(t, {3, 4}))); }, x);
    check("slice_cols", [&](Tape&, const Tensor& t) { return sum_all(square(slice_cols(t, 1, 3))); }, x);
    check("slice_rows", [&](Tape&, const Tensor& t) { return sum_all(square(slice_rows(t, 1, 3))); }, x);

    Tensor bias = random_tensor({3}, rng);
    check("add_bias x", [&](Tape&, const Tensor& t) { return sum_all(square(add_bias(t, bias))); }, x);
    Tensor base = random_tensor({4, 3}, rng);
    check("add_bias b", [&](Tape&, const Tensor& t) { return sum_all(square(add_bias(base, t))); }, bias);

    check("concat_cols", [&](Tape&, const Tensor& t) {
        return sum_all(square(concat_cols({t, other})));
    }, x);
    check("concat_rows", [&](Tape&, const Tensor& t) {
        return sum_all(square(concat_rows({t, other})));
    }, x);
    check("gather_rows", [&](Tape&, const Tensor& t) {
        return sum_all(square(gather_rows(t, {2, 0, 2, 1})));
    }, x);
    check("log_softmax", [&](Tape&, const Tensor& t) {
        return sum_all(square(log_softmax(t)));
    }, x);
    check("take_per_row", [&](Tape&, const Tensor& t) {
        return sum_all(square(take_per_row(t, {0, 2, 1, 0})));
    }, x);
    check("categorical_log_prob", [&](Tape&, const Tensor& t) {
        return mean_all(categorical_log_prob(t, {1, 0, 2, 1}));
    }, x);
}

TEST_CASE("grad_check on constants and an MLP-shaped composite") {
    RngStream rng(5);
    Tensor x = random_tensor({6}, rng);
    double err = grad_check([](Tape&, const Tensor& t) { return sum_all(t); }, x);
    REQUIRE(err < 1e-10);

    // three-layer LeakyReLU map, inputs kept away from the kink
    Tensor w1 = random_tensor({6, 16}, rng, 0.5);
    Tensor w2 = random_tensor({16, 16}, rng, 0.5);
    Tensor w3 = random_tensor({16, 1}, rng, 0.5);
    Tensor x2 = random_away_from_zero({1, 6}, rng);
    double err2 = grad_check(
        [&](Tape&, const Tensor& t) {
            Tensor h = leaky_relu(matmul(t, w1), 0.01);
            h = leaky_relu(matmul(h, w2), 0.01);
            return sum_all(matmul(h, w3));
        },
        x2);
    REQUIRE(err2 < 1e-4);
}

TEST_CASE("stop_gradient blocks flow exactly") {
    RngStream rng(6);
    Tensor x = random_tensor({3, 3}, rng);
    Tape tape;
    Tensor xw = tape.watch(x);
    Tensor y = add(sum_all(square(xw)), sum_all(stop_gradient(mul_scalar(xw, 100.0))));
    tape.backward(y);
    const std::vector<double>* g = tape.grad(xw);
    REQUIRE(g != nullptr);
    for (std::int64_t i = 0; i < x.size(); ++i) {
        REQUIRE_THAT((*g)[static_cast<std::size_t>(i)],
                     Catch::Matchers::WithinAbs(2.0 * x.data()[static_cast<std::size_t>(i)], 1e-12));
    }
}

TEST_CASE("re-watching a buffer accumulates into one gradient") {
    Tensor p = Tensor::from({2}, {1.0, 2.0});
    Tape tape;
    Tensor a = tape.watch(p);
    Tensor b = tape.watch(p); // same node
    REQUIRE(a.node() == b.node());
    Tensor y = add(sum_all(a), sum_all(mul_scalar(b, 2.0)));
    tape.backward(y);
    const std::vector<double>* g = tape.grad(p);
    REQUIRE(g != nullptr);
    REQUIRE((*g)[0] == 3.0);
    REQUIRE((*g)[1] == 3.0);
}

TEST_CASE("debug finite checks catch NaN results") {
    bool saved = finite_checks();
    finite_checks() = true;
    Tensor zero = Tensor::zeros({2});
    REQUIRE_THROWS_AS(div(zero, zero), NumericError);
    finite_checks() = saved;
}

TEST_CASE("mixing tapes is an error") {
    Tape t1, t2;
    Tensor a = t1.watch(Tensor::from({2}, {1, 2}));
    Tensor b = t2.watch(Tensor::from({2}, {3, 4}));
    REQUIRE_THROWS_AS(add(a, b), Error);
}

TEST_CASE("backward requires a scalar") {
    Tape tape;
    Tensor a = tape.watch(Tensor::from({2}, {1, 2}));
    Tensor y = square(a);
    REQUIRE_THROWS_AS(tape.backward(y), ShapeError);
}
