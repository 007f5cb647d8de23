#include <catch2/catch_amalgamated.hpp>

#include "factorwm/gradcheck.hpp"
#include "factorwm/ops.hpp"
#include "test_helpers.hpp"

#include <cmath>

using namespace fwm;
using test::random_positive;
using test::random_tensor;

namespace {
constexpr double kHalfLogTwoPi = 0.91893853320467274178;
}

TEST_CASE("leaky_relu matches its definition") {
    Tensor x = Tensor::from({3}, {2.0, -1.0, 0.0});
    Tensor y = leaky_relu(x, 0.01);
    REQUIRE(y(0) == 2.0);
    REQUIRE(y(1) == -0.01);
    REQUIRE(y(2) == 0.0);
    REQUIRE_THROWS_AS(leaky_relu(x, 0.0), DomainError);
    REQUIRE_THROWS_AS(leaky_relu(x, 1.0), DomainError);
}

TEST_CASE("gaussian_log_prob closed-form cases") {
    Tensor x = Tensor::from({1}, {0.7});
    Tensor mu = Tensor::from({1}, {0.7});
    Tensor sigma = Tensor::from({1}, {1.0});
    REQUIRE_THAT(gaussian_log_prob(x, mu, sigma).value(),
                 Catch::Matchers::WithinAbs(-kHalfLogTwoPi, 1e-12));
    // one-sigma offset drops the density by exactly 1/2
    Tensor x2 = Tensor::from({1}, {1.7});
    REQUIRE_THAT(gaussian_log_prob(x2, mu, sigma).value(),
                 Catch::Matchers::WithinAbs(-kHalfLogTwoPi - 0.5, 1e-12));
    REQUIRE_THROWS_AS(gaussian_log_prob(x, mu, Tensor::from({1}, {0.0})), DomainError);
    REQUIRE_THROWS_AS(gaussian_log_prob(x, mu, -1.0), DomainError);
}

TEST_CASE("batched gaussian_log_prob matches a scalar-loop oracle") {
    RngStream rng(11);
    Tensor x = random_tensor({6, 4}, rng);
    Tensor mu = random_tensor({6, 4}, rng);
    Tensor sigma = random_positive({6, 4}, rng);
    Tensor lp = gaussian_log_prob(x, mu, sigma);
    REQUIRE(lp.shape() == Shape{6});
    for (std::int64_t i = 0; i < 6; ++i) {
        double expect = 0.0;
        for (std::int64_t j = 0; j < 4; ++j) {
            double z = (x(i, j) - mu(i, j)) / sigma(i, j);
            expect += -0.5 * z * z - std::log(sigma(i, j)) - kHalfLogTwoPi;
        }
        REQUIRE_THAT(lp(i), Catch::Matchers::WithinAbs(expect, 1e-12));
    }
}

TEST_CASE("gaussian_diag_kl closed-form cases") {
    RngStream rng(12);
    Tensor mu = random_tensor({5, 3}, rng);
    Tensor sigma = random_positive({5, 3}, rng);
    Tensor zero_kl = gaussian_diag_kl(mu, sigma, mu, sigma);
    for (std::int64_t i = 0; i < 5; ++i) {
        REQUIRE_THAT(zero_kl(i), Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
    Tensor kl = gaussian_diag_kl(Tensor::from({1}, {1.0}), Tensor::from({1}, {1.0}),
                                 Tensor::from({1}, {0.0}), Tensor::from({1}, {1.0}));
    REQUIRE_THAT(kl.value(), Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE_THROWS_AS(gaussian_diag_kl(mu, Tensor::zeros({5, 3}), mu, sigma), DomainError);
}

TEST_CASE("gaussian_diag_kl matches a Monte-Carlo estimate within 3 SE") {
    RngStream rng(13);
    Tensor mu_q = random_tensor({4}, rng, 0.7);
    Tensor sigma_q = random_positive({4}, rng, 0.5, 1.5);
    Tensor mu_p = random_tensor({4}, rng, 0.7);
    Tensor sigma_p = random_positive({4}, rng, 0.5, 1.5);
    double analytic = gaussian_diag_kl(mu_q, sigma_q, mu_p, sigma_p).value();

    const int n = 1000000;
    double sum = 0.0, sumsq = 0.0;
    for (int s = 0; s < n; ++s) {
        double term = 0.0;
        for (int j = 0; j < 4; ++j) {
            double draw = mu_q(j) + sigma_q(j) * rng.gaussian();
            double zq = (draw - mu_q(j)) / sigma_q(j);
            double zp = (draw - mu_p(j)) / sigma_p(j);
            term += (-0.5 * zq * zq - std::log(sigma_q(j))) - (-0.5 * zp * zp - std::log(sigma_p(j)));
        }
        sum += term;
        sumsq += term * term;
    }
    double mc = sum / n;
    double se = std::sqrt((sumsq / n - mc * mc) / n);
    REQUIRE(std::abs(mc - analytic) < 3.0 * se + 1e-12);
}

TEST_CASE("KL is non-negative and zero only at identical distributions") {
    RngStream rng(14);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor mu_q = random_tensor({3}, rng);
        Tensor sigma_q = random_positive({3}, rng);
        Tensor mu_p = random_tensor({3}, rng);
        Tensor sigma_p = random_positive({3}, rng);
        double kl = gaussian_diag_kl(mu_q, sigma_q, mu_p, sigma_p).value();
        REQUIRE(kl >= -1e-12);
        double gap = test::max_abs_diff(mu_q.data(), mu_p.data()) +
                     test::max_abs_diff(sigma_q.data(), sigma_p.data());
        if (kl < 1e-12) {
            REQUIRE(gap < 1e-5);
        }
        if (gap > 1e-3) {
            REQUIRE(kl > 1e-12);
        }
    }
}

TEST_CASE("kl and log_prob gradients pass the finite-difference oracle") {
    RngStream rng(15);
    Tensor mu_q = random_tensor({4}, rng);
    Tensor sigma_q = random_positive({4}, rng);
    Tensor mu_p = random_tensor({4}, rng);
    Tensor sigma_p = random_positive({4}, rng);
    double err = grad_check(
        [&](Tape&, const Tensor& t) { return gaussian_diag_kl(t, sigma_q, mu_p, sigma_p); }, mu_q);
    REQUIRE(err < 1e-5);
    err = grad_check(
        [&](Tape&, const Tensor& t) { return gaussian_diag_kl(mu_q, t, mu_p, sigma_p); }, sigma_q);
    REQUIRE(err < 1e-5);
    err = grad_check(
        [&](Tape&, const Tensor& t) { return gaussian_log_prob(mu_p, t, sigma_q); }, mu_q);
    REQUIRE(err < 1e-5);
    err = grad_check(
        [&](Tape&, const Tensor& t) { return gaussian_log_prob(mu_p, mu_q, t); }, sigma_q);
    REQUIRE(err < 1e-5);
}

TEST_CASE("structure ops round-trip") {
    RngStream rng(16);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor left = slice_cols(x, 0, 2);
    Tensor right = slice_cols(x, 2, 6);
    Tensor back = concat_cols({left, right});
    REQUIRE(test::max_abs_diff(back.data(), x.data()) == 0.0);

    Tensor top = slice_rows(x, 0, 1);
    Tensor bottom = slice_rows(x, 1, 4);
    Tensor back2 = concat_rows({top, bottom});
    REQUIRE(test::max_abs_diff(back2.data(), x.data()) == 0.0);

    Tensor picked = gather_rows(x, {3, 1});
    REQUIRE(picked(0, 0) == x(3, 0));
    REQUIRE(picked(1, 5) == x(1, 5));
    REQUIRE_THROWS_AS(gather_rows(x, {4}), ShapeError);
}

TEST_CASE("log_softmax rows are normalized distributions") {
    RngStream rng(17);
    Tensor x = random_tensor({5, 7}, rng, 3.0);
    Tensor lsm = log_softmax(x);
    for (std::int64_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (std::int64_t j = 0; j < 7; ++j) total += std::exp(lsm(i, j));
        REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}
