#include <catch2/catch_amalgamated.hpp>

#include "factorwm/mi.hpp"
#include "test_helpers.hpp"

#include <cmath>
#include <numeric>

using namespace fwm;
using test::random_tensor;

namespace {

// Trains one critic on (x, y) sample pairs and reports the held-out bound.
double train_dv(const std::vector<double>& x, const std::vector<double>& y,
                std::int64_t n, std::int64_t dx, std::int64_t dy,
                std::uint64_t seed, int steps = 1200, std::int64_t batch = 512) {
    RngStream rng(seed);
    DVCritic critic("probe", dx + dy, rng);
    AdamW opt(critic.net.parameters(), AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});

    std::int64_t n_train = n / 2;
    for (int s = 0; s < steps; ++s) {
        Tensor joint = Tensor::zeros({batch, dx + dy});
        Tensor marg = Tensor::zeros({batch, dx + dy});
        std::vector<std::int64_t> idx(static_cast<std::size_t>(batch));
        for (auto& i : idx) i = rng.uniform_int(static_cast<int>(n_train));
        std::vector<std::int64_t> perm = derangement(batch, rng);
        for (std::int64_t b = 0; b < batch; ++b) {
            std::int64_t i = idx[static_cast<std::size_t>(b)];
            std::int64_t j = idx[static_cast<std::size_t>(perm[static_cast<std::size_t>(b)])];
            for (std::int64_t c = 0; c < dx; ++c) {
                joint.raw()[static_cast<std::size_t>(b * (dx + dy) + c)] = x[static_cast<std::size_t>(i * dx + c)];
                marg.raw()[static_cast<std::size_t>(b * (dx + dy) + c)] = x[static_cast<std::size_t>(j * dx + c)];
            }
            for (std::int64_t c = 0; c < dy; ++c) {
                joint.raw()[static_cast<std::size_t>(b * (dx + dy) + dx + c)] = y[static_cast<std::size_t>(i * dy + c)];
                marg.raw()[static_cast<std::size_t>(b * (dx + dy) + dx + c)] = y[static_cast<std::size_t>(i * dy + c)];
            }
        }
        Tape tape;
        Tensor bound = dv_bound(critic, joint, marg, &tape);
        Tensor loss = neg(bound);
        tape.backward(loss);
        opt.step(tape);
    }

    // held-out evaluation on the second half
    std::int64_t m = n - n_train;
    Tensor joint = Tensor::zeros({m, dx + dy});
    Tensor marg = Tensor::zeros({m, dx + dy});
    std::vector<std::int64_t> perm = derangement(m, rng);
    for (std::int64_t b = 0; b < m; ++b) {
        std::int64_t i = n_train + b;
        std::int64_t j = n_train + perm[static_cast<std::size_t>(b)];
        for (std::int64_t c = 0; c < dx; ++c) {
            joint.raw()[static_cast<std::size_t>(b * (dx + dy) + c)] = x[static_cast<std::size_t>(i * dx + c)];
            marg.raw()[static_cast<std::size_t>(b * (dx + dy) + c)] = x[static_cast<std::size_t>(j * dx + c)];
        }
        for (std::int64_t c = 0; c < dy; ++c) {
            joint.raw()[static_cast<std::size_t>(b * (dx + dy) + dx + c)] = y[static_cast<std::size_t>(i * dy + c)];
            marg.raw()[static_cast<std::size_t>(b * (dx + dy) + dx + c)] = y[static_cast<std::size_t>(i * dy + c)];
        }
    }
    return dv_bound(critic, joint, marg, nullptr).value();
}

void sample_bivariate(double rho, std::int64_t n, std::uint64_t seed,
                      std::vector<double>& x, std::vector<double>& y) {
    RngStream rng(seed);
    x.resize(static_cast<std::size_t>(n));
    y.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double u = rng.gaussian();
        double v = rng.gaussian();
        x[static_cast<std::size_t>(i)] = u;
        y[static_cast<std::size_t>(i)] = rho * u + std::sqrt(1.0 - rho * rho) * v;
    }
}

} // namespace

TEST_CASE("an all-zero critic gives a bound of exactly zero") {
    RngStream rng(1);
    DVCritic critic("zero", 4, rng);
    for (Parameter* p : critic.net.parameters()) {
        for (double& v : p->value.raw()) v = 0.0;
    }
    Tensor joint = random_tensor({16, 4}, rng);
    Tensor marg = random_tensor({16, 4}, rng);
    REQUIRE(dv_bound(critic, joint, marg, nullptr).value() == 0.0);
}

TEST_CASE("the bound is invariant to adding a constant to the critic") {
    RngStream rng(2);
    DVCritic critic("shift", 3, rng);
    Tensor joint = random_tensor({32, 3}, rng);
    Tensor marg = random_tensor({32, 3}, rng);
    double before = dv_bound(critic, joint, marg, nullptr).value();
    // output layer bias shift = critic + c everywhere
    Parameter* out_bias = critic.net.parameters().back();
    REQUIRE(out_bias->value.size() == 1);
    out_bias->value.raw()[0] += 37.5;
    double after = dv_bound(critic, joint, marg, nullptr).value();
    REQUIRE_THAT(after, Catch::Matchers::WithinAbs(before, 1e-10));
}

TEST_CASE("dv_bound validates its inputs") {
    RngStream rng(3);
    DVCritic critic("v", 3, rng);
    Tensor joint = random_tensor({4, 3}, rng);
    REQUIRE_THROWS_AS(dv_bound(critic, joint, random_tensor({1, 3}, rng), nullptr), EvalError);
    REQUIRE_THROWS_AS(dv_bound(critic, joint, random_tensor({4, 2}, rng), nullptr), ShapeError);
}

TEST_CASE("derangement never fixes an index and covers n=2") {
    RngStream rng(4);
    REQUIRE(derangement(2, rng) == std::vector<std::int64_t>{1, 0});
    for (int trial = 0; trial < 50; ++trial) {
        std::int64_t n = 2 + rng.uniform_int(60);
        std::vector<std::int64_t> p = derangement(n, rng);
        std::vector<bool> seen(static_cast<std::size_t>(n), false);
        for (std::int64_t i = 0; i < n; ++i) {
            REQUIRE(p[static_cast<std::size_t>(i)] != i);
            seen[static_cast<std::size_t>(p[static_cast<std::size_t>(i)])] = true;
        }
        REQUIRE(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
    }
    REQUIRE_THROWS_AS(derangement(1, rng), EvalError);
}

TEST_CASE("shuffled pairs decorrelate: rank correlation of permuted targets is near zero") {
    RngStream rng(5);
    const std::int64_t n = 4000;
    std::vector<double> x, y;
    sample_bivariate(0.9, n, 55, x, y);
    std::vector<std::int64_t> perm = derangement(n, rng);
    // Spearman rank correlation between x_i and y_{perm(i)}
    auto ranks = [](const std::vector<double>& v, const std::vector<std::int64_t>* p) {
        std::vector<std::int64_t> order(v.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
            double va = p ? v[static_cast<std::size_t>((*p)[static_cast<std::size_t>(a)])] : v[static_cast<std::size_t>(a)];
            double vb = p ? v[static_cast<std::size_t>((*p)[static_cast<std::size_t>(b)])] : v[static_cast<std::size_t>(b)];
            return va < vb;
        });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < order.size(); ++i) r[static_cast<std::size_t>(order[i])] = static_cast<double>(i);
        return r;
    };
    std::vector<double> rx = ranks(x, nullptr);
    std::vector<double> ry = ranks(y, &perm);
    double mean = (n - 1) / 2.0;
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        num += (rx[static_cast<std::size_t>(i)] - mean) * (ry[static_cast<std::size_t>(i)] - mean);
        den += (rx[static_cast<std::size_t>(i)] - mean) * (rx[static_cast<std::size_t>(i)] - mean);
    }
    REQUIRE(std::abs(num / den) < 0.05);
}

TEST_CASE("compute_returns closed forms and loop oracle") {
    std::vector<double> rewards{1, 1, 1, 1, 1, 1};
    ReturnWindow r0 = compute_returns(rewards, 1, 6, 0.0, 1);
    for (std::int64_t t = 0; t < r0.valid_steps; ++t) REQUIRE(r0.at(0, t) == 1.0);

    ReturnWindow r1 = compute_returns(rewards, 1, 6, 0.9, 3);
    REQUIRE(r1.valid_steps == 4);
    for (std::int64_t t = 0; t < 4; ++t) {
        REQUIRE_THAT(r1.at(0, t), Catch::Matchers::WithinAbs(2.71, 1e-12));
    }

    RngStream rng(6);
    std::vector<double> rnd(40);
    for (double& v : rnd) v = rng.gaussian();
    ReturnWindow rw = compute_returns(rnd, 2, 20, 0.95, 7);
    for (std::int64_t traj = 0; traj < 2; ++traj) {
        for (std::int64_t t = 0; t < rw.valid_steps; ++t) {
            double expect = 0.0;
            for (std::int64_t k = 0; k < 7; ++k) {
                expect += std::pow(0.95, static_cast<double>(k)) * rnd[static_cast<std::size_t>(traj * 20 + t + k)];
            }
            REQUIRE_THAT(rw.at(traj, t), Catch::Matchers::WithinAbs(expect, 1e-12));
        }
    }
    REQUIRE_THROWS_AS(compute_returns(rewards, 1, 6, 0.9, 0), DomainError);
    REQUIRE_THROWS_AS(compute_returns(rewards, 1, 6, 0.9, 7), DomainError);
}

TEST_CASE("trained bound on independent gaussians stays near zero") {
    std::vector<double> x, y;
    sample_bivariate(0.0, 10000, 77, x, y);
    double bound = train_dv(x, y, 10000, 1, 1, 7, 800);
    REQUIRE(bound <= 0.05);
}

TEST_CASE("trained bound on correlated gaussians sits inside the analytic bracket") {
    double rho = 0.8;
    double mi = -0.5 * std::log(1.0 - rho * rho); // 0.5108
    std::vector<double> x, y;
    sample_bivariate(rho, 10000, 78, x, y);
    double bound = train_dv(x, y, 10000, 1, 1, 8, 1500);
    REQUIRE(bound >= 0.35);
    REQUIRE(bound <= mi + 0.05);
}

TEST_CASE("trained bounds never exceed the analytic MI by more than 0.05 nats") {
    for (double rho : {0.0, 0.3, 0.6, 0.9}) {
        double mi = -0.5 * std::log(1.0 - rho * rho);
        std::vector<double> x, y;
        sample_bivariate(rho, 8000, 100 + static_cast<std::uint64_t>(rho * 10), x, y);
        double bound = train_dv(x, y, 8000, 1, 1, 9, 700);
        REQUIRE(bound <= mi + 0.05);
    }
}

TEST_CASE("j_rs and j_as vanish identically at lambda zero and reject negatives") {
    RngStream rng(10);
    BlockDims dims{2, 2, 2, 2};
    Critics critics = make_critics(dims, 5, false, rng);
    MiBatch batch;
    std::int64_t m = 8;
    batch.returns = random_tensor({m, 1}, rng);
    batch.rew_state = random_tensor({m, 4}, rng);
    batch.free_state = random_tensor({m, 4}, rng);
    batch.ctrl_state = random_tensor({m, 4}, rng);
    batch.unctrl_state = random_tensor({m, 4}, rng);
    batch.action_prev = random_tensor({m, 5}, rng);
    batch.rew_hist = random_tensor({m, 4}, rng);
    batch.state_hist = random_tensor({m, 8}, rng);
    std::vector<std::int64_t> perm = derangement(m, rng);

    JrsResult rs = j_rs(critics, batch, perm, 0.0);
    REQUIRE_FALSE(rs.value.defined());
    JasResult as = j_as(critics, batch, perm, 0.0);
    REQUIRE_FALSE(as.value.defined());
    REQUIRE_THROWS_AS(j_rs(critics, batch, perm, -0.1), ConfigError);
    REQUIRE_THROWS_AS(j_as(critics, batch, perm, -0.1), ConfigError);

    JrsResult on = j_rs(critics, batch, perm, 0.5);
    REQUIRE_THAT(on.value.value(), Catch::Matchers::WithinAbs(0.5 * (on.i1 - on.i2), 1e-12));
}

TEST_CASE("stop-gradient conditioning blocks upstream parameters exactly") {
    RngStream rng(11);
    BlockDims dims{2, 2, 2, 2};
    Critics critics = make_critics(dims, 5, false, rng);
    std::int64_t m = 8;

    Tape tape;
    // the history terms descend from this parameter only through sg
    Parameter upstream{"upstream", random_tensor({m, 4}, rng)};
    Tensor u = tape.watch(upstream.value);
    MiBatch batch;
    batch.returns = random_tensor({m, 1}, rng);
    Tensor rew_leaf = random_tensor({m, 4}, rng);
    batch.rew_state = mul_scalar(tape.watch(rew_leaf), 1.0);
    batch.free_state = random_tensor({m, 4}, rng);
    batch.ctrl_state = random_tensor({m, 4}, rng);
    batch.unctrl_state = random_tensor({m, 4}, rng);
    batch.action_prev = random_tensor({m, 5}, rng);
    batch.rew_hist = stop_gradient(mul_scalar(u, 2.0));
    batch.state_hist = stop_gradient(concat_cols({u, mul_scalar(u, -1.0)}));
    std::vector<std::int64_t> perm = derangement(m, rng);

    Tensor loss = add(j_rs(critics, batch, perm, 1.0).value, j_as(critics, batch, perm, 1.0).value);
    tape.backward(loss);
    REQUIRE(tape.grad(u) == nullptr); // nothing flowed into the upstream parameter
    REQUIRE(tape.grad(batch.rew_state) != nullptr);
}

TEST_CASE("critic steps maximize their own bounds and leave other parameters alone") {
    RngStream rng(12);
    BlockDims dims{2, 2, 2, 2};
    Critics critics = make_critics(dims, 5, false, rng);
    AdamW opt(critics.parameters(), AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});

    std::int64_t m = 64;
    MiBatch batch;
    batch.returns = random_tensor({m, 1}, rng);
    // rew_state carries the return almost verbatim, so I_a1 has signal
    batch.rew_state = add(concat_cols({batch.returns, batch.returns, batch.returns, batch.returns}),
                          mul_scalar(random_tensor({m, 4}, rng), 0.1));
    batch.free_state = random_tensor({m, 4}, rng);
    batch.ctrl_state = random_tensor({m, 4}, rng);
    batch.unctrl_state = random_tensor({m, 4}, rng);
    batch.action_prev = random_tensor({m, 5}, rng);
    batch.rew_hist = random_tensor({m, 4}, rng);
    batch.state_hist = random_tensor({m, 8}, rng);
    std::vector<std::int64_t> perm = derangement(m, rng);

    MiValues first = critic_step(critics, opt, batch, perm);
    MiValues later{};
    for (int s = 0; s < 400; ++s) later = critic_step(critics, opt, batch, perm);
    REQUIRE(later.i1 > first.i1); // the informative pair's bound grows
}
