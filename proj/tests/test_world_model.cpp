#include <catch2/catch_amalgamated.hpp>

#include "factorwm/gradcheck.hpp"
#include "factorwm/world_model.hpp"
#include "test_helpers.hpp"

#include <cmath>

using namespace fwm;
using test::random_tensor;

namespace {

WorldModelConfig small_config() {
    WorldModelConfig cfg;
    cfg.dims = BlockDims{2, 2, 2, 2};
    cfg.obs_dim = 8;
    cfg.action_dim = 5;
    cfg.lags = 2;
    cfg.enc_hidden = 16;
    cfg.dec_hidden = 16;
    return cfg;
}

struct Setup {
    WorldModel wm;
    Tensor obs;
    std::vector<Tensor> lat_hist;
    std::vector<Tensor> act_hist;
    std::array<Tensor, 4> eps;
};

Setup make_setup(std::uint64_t seed, std::int64_t batch = 3) {
    RngStream rng(seed);
    Setup s{WorldModel(small_config(), rng), {}, {}, {}, {}};
    s.obs = random_tensor({batch, 8}, rng);
    for (int k = 0; k < 2; ++k) {
        s.lat_hist.push_back(random_tensor({batch, 8}, rng));
        Tensor a = Tensor::zeros({batch, 5});
        for (std::int64_t b = 0; b < batch; ++b) a.raw()[static_cast<std::size_t>(b * 5 + (b + k) % 5)] = 1.0;
        s.act_hist.push_back(a);
    }
    s.eps = s.wm.zero_eps(batch);
    return s;
}

bool blocks_equal(const LatentBlocks& a, const LatentBlocks& b, int block) {
    return a.mu[static_cast<std::size_t>(block)].data() == b.mu[static_cast<std::size_t>(block)].data() &&
           a.sigma[static_cast<std::size_t>(block)].data() == b.sigma[static_cast<std::size_t>(block)].data();
}

WindowBatch random_window(std::int64_t B, std::int64_t L, std::uint64_t seed) {
    RngStream rng(seed);
    WindowBatch w;
    for (std::int64_t t = 0; t < L; ++t) {
        w.obs.push_back(random_tensor({B, 8}, rng));
        Tensor a = Tensor::zeros({B, 5});
        for (std::int64_t b = 0; b < B; ++b) a.raw()[static_cast<std::size_t>(b * 5 + rng.uniform_int(5))] = 1.0;
        w.actions.push_back(a);
        w.rewards.push_back(random_tensor({B}, rng));
    }
    return w;
}

} // namespace

TEST_CASE("posterior wiring: observations feed every block") {
    Setup s = make_setup(1);
    LatentBlocks base = s.wm.posterior(nullptr, s.obs, s.lat_hist, s.act_hist, s.eps);
    Tensor zero_obs = Tensor::zeros({3, 8});
    LatentBlocks zeroed = s.wm.posterior(nullptr, zero_obs, s.lat_hist, s.act_hist, s.eps);
    for (int b = 0; b < 4; ++b) {
        REQUIRE_FALSE(blocks_equal(base, zeroed, b));
    }
}

TEST_CASE("posterior wiring: action history reaches only the controllable blocks") {
    Setup s = make_setup(2);
    LatentBlocks base = s.wm.posterior(nullptr, s.obs, s.lat_hist, s.act_hist, s.eps);
    std::vector<Tensor> moved = s.act_hist;
    Tensor shifted = Tensor::zeros({3, 5});
    for (std::int64_t b = 0; b < 3; ++b) shifted.raw()[static_cast<std::size_t>(b * 5 + 4)] = 1.0;
    moved[1] = shifted;
    LatentBlocks perturbed = s.wm.posterior(nullptr, s.obs, s.lat_hist, moved, s.eps);
    REQUIRE_FALSE(blocks_equal(base, perturbed, kCtrlRew));
    REQUIRE_FALSE(blocks_equal(base, perturbed, kCtrlFree));
    REQUIRE(blocks_equal(base, perturbed, kUnctrlRew));
    REQUIRE(blocks_equal(base, perturbed, kNoise));
}

TEST_CASE("posterior wiring: reward-irrelevant history reaches only the free blocks") {
    Setup s = make_setup(3);
    LatentBlocks base = s.wm.posterior(nullptr, s.obs, s.lat_hist, s.act_hist, s.eps);
    std::vector<Tensor> moved = s.lat_hist;
    Tensor bumped = moved[0];
    // bump free-block dims (4..7) of the oldest lag
    Tensor delta = Tensor::zeros({3, 8});
    for (std::int64_t b = 0; b < 3; ++b) {
        for (std::int64_t j = 4; j < 8; ++j) delta.raw()[static_cast<std::size_t>(b * 8 + j)] = 0.7;
    }
    moved[0] = add(bumped, delta);
    LatentBlocks perturbed = s.wm.posterior(nullptr, s.obs, moved, s.act_hist, s.eps);
    REQUIRE(blocks_equal(base, perturbed, kCtrlRew));
    REQUIRE(blocks_equal(base, perturbed, kUnctrlRew));
    REQUIRE_FALSE(blocks_equal(base, perturbed, kCtrlFree));
    REQUIRE_FALSE(blocks_equal(base, perturbed, kNoise));
}

TEST_CASE("history shorter than the lag count is a sequencing error") {
    Setup s = make_setup(4);
    std::vector<Tensor> short_hist{s.lat_hist[0]};
    REQUIRE_THROWS_AS(s.wm.posterior(nullptr, s.obs, short_hist, s.act_hist, s.eps), Error);
}

TEST_CASE("posterior heads rebuilt from the priors make every KL zero") {
    Setup s = make_setup(5);
    WorldModel& wm = s.wm;
    // posterior head input = [embed (8) | history...]; zero the embed rows and
    // copy the prior weights into the history rows.
    for (int b = 0; b < 4; ++b) {
        // reach the heads through parameters(): names are post<b>.w0 / prior<b>.w0
        Parameter *pw = nullptr, *pb = nullptr, *qw = nullptr, *qb = nullptr;
        for (Parameter* p : wm.parameters()) {
            if (p->name == "prior" + std::to_string(b) + ".w0") pw = p;
            if (p->name == "prior" + std::to_string(b) + ".b0") pb = p;
            if (p->name == "post" + std::to_string(b) + ".w0") qw = p;
            if (p->name == "post" + std::to_string(b) + ".b0") qb = p;
        }
        REQUIRE((pw && pb && qw && qb));
        std::int64_t hist = pw->value.shape()[0];
        std::int64_t out = pw->value.shape()[1];
        REQUIRE(qw->value.shape()[0] == 8 + hist);
        for (double& v : qw->value.raw()) v = 0.0;
        for (std::int64_t i = 0; i < hist; ++i) {
            for (std::int64_t j = 0; j < out; ++j) {
                qw->value.raw()[static_cast<std::size_t>((8 + i) * out + j)] = pw->value(i, j);
            }
        }
        qb->value.raw() = pb->value.data();
    }
    LatentBlocks post = wm.posterior(nullptr, s.obs, s.lat_hist, s.act_hist, s.eps);
    LatentBlocks prior = wm.prior(nullptr, s.lat_hist, s.act_hist, s.eps);
    for (int b = 0; b < 4; ++b) {
        Tensor kl = gaussian_diag_kl(post.mu[static_cast<std::size_t>(b)], post.sigma[static_cast<std::size_t>(b)],
                                     prior.mu[static_cast<std::size_t>(b)], prior.sigma[static_cast<std::size_t>(b)]);
        for (std::int64_t i = 0; i < kl.size(); ++i) {
            REQUIRE_THAT(kl(i), Catch::Matchers::WithinAbs(0.0, 1e-12));
        }
    }
}

TEST_CASE("zero-weight prior is a constant distribution over inputs") {
    Setup s = make_setup(6);
    for (Parameter* p : s.wm.parameters()) {
        if (p->name.rfind("prior", 0) == 0) {
            for (double& v : p->value.raw()) v = 0.0;
        }
    }
    LatentBlocks a = s.wm.prior(nullptr, s.lat_hist, s.act_hist, s.eps);
    std::vector<Tensor> other_hist;
    RngStream rng(77);
    other_hist.push_back(random_tensor({3, 8}, rng));
    other_hist.push_back(random_tensor({3, 8}, rng));
    LatentBlocks b = s.wm.prior(nullptr, other_hist, s.act_hist, s.eps);
    for (int blk = 0; blk < 4; ++blk) {
        REQUIRE(a.mu[static_cast<std::size_t>(blk)].data() == b.mu[static_cast<std::size_t>(blk)].data());
        REQUIRE(a.sigma[static_cast<std::size_t>(blk)].data() == b.sigma[static_cast<std::size_t>(blk)].data());
        // softplus(0) + floor
        double expect = std::log(2.0) + s.wm.config().sigma_floor;
        REQUIRE_THAT(a.sigma[static_cast<std::size_t>(blk)](0, 0), Catch::Matchers::WithinAbs(expect, 1e-12));
        REQUIRE(a.mu[static_cast<std::size_t>(blk)](0, 0) == 0.0);
    }
}

TEST_CASE("elbo on zero data with a zeroed decoder hits the density ceiling") {
    RngStream rng(7);
    WorldModelConfig cfg = small_config();
    WorldModel wm(cfg, rng);
    for (Parameter* p : wm.parameters()) {
        if (p->name.rfind("dec", 0) == 0 || p->name.rfind("rew_dec", 0) == 0) {
            for (double& v : p->value.raw()) v = 0.0;
        }
    }
    std::int64_t B = 4, L = 4;
    WindowBatch window;
    for (std::int64_t t = 0; t < L; ++t) {
        window.obs.push_back(Tensor::zeros({B, 8}));
        Tensor a = Tensor::zeros({B, 5});
        for (std::int64_t b = 0; b < B; ++b) a.raw()[static_cast<std::size_t>(b * 5)] = 1.0;
        window.actions.push_back(a);
        window.rewards.push_back(Tensor::zeros({B}));
    }
    Tape tape;
    RngStream eps_rng(8);
    ElboResult elbo = elbo_terms(wm, tape, window, &eps_rng);
    double expect_o = -4.0 * std::log(2.0 * 3.14159265358979323846); // (d_s/2) ln 2pi
    REQUIRE_THAT(elbo.j_o.value(), Catch::Matchers::WithinAbs(expect_o, 1e-9));
    double expect_r = -0.5 * std::log(2.0 * 3.14159265358979323846);
    REQUIRE_THAT(elbo.j_r.value(), Catch::Matchers::WithinAbs(expect_r, 1e-9));
}

TEST_CASE("all-zero beta weights make J_D vanish") {
    RngStream rng(9);
    WorldModelConfig cfg = small_config();
    cfg.beta = {0.0, 0.0, 0.0, 0.0};
    WorldModel wm(cfg, rng);
    WindowBatch window = random_window(3, 4, 10);
    Tape tape;
    RngStream eps_rng(11);
    ElboResult elbo = elbo_terms(wm, tape, window, &eps_rng);
    REQUIRE(elbo.j_d.value() == 0.0);
}

TEST_CASE("blockwise J_D equals the Monte-Carlo KL of the factored posteriors within 3 SE") {
    Setup s = make_setup(12, 1);
    LatentBlocks post = s.wm.posterior(nullptr, s.obs, s.lat_hist, s.act_hist, s.eps);
    LatentBlocks prior = s.wm.prior(nullptr, s.lat_hist, s.act_hist, s.eps);

    double analytic = 0.0;
    for (int b = 0; b < 4; ++b) {
        analytic += gaussian_diag_kl(post.mu[static_cast<std::size_t>(b)], post.sigma[static_cast<std::size_t>(b)],
                                     prior.mu[static_cast<std::size_t>(b)], prior.sigma[static_cast<std::size_t>(b)])
                        .value();
    }

    // Monte-Carlo joint KL of the product distributions: draws from the full
    // factored posterior, scoring log q - log p over all 8 dims at once.
    RngStream rng(13);
    const int n = 200000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        double term = 0.0;
        for (int b = 0; b < 4; ++b) {
            for (std::int64_t j = 0; j < 2; ++j) {
                double mq = post.mu[static_cast<std::size_t>(b)](0, j);
                double sq = post.sigma[static_cast<std::size_t>(b)](0, j);
                double mp = prior.mu[static_cast<std::size_t>(b)](0, j);
                double sp = prior.sigma[static_cast<std::size_t>(b)](0, j);
                double draw = mq + sq * rng.gaussian();
                double zq = (draw - mq) / sq;
                double zp = (draw - mp) / sp;
                term += (-0.5 * zq * zq - std::log(sq)) - (-0.5 * zp * zp - std::log(sp));
            }
        }
        sum += term;
        sumsq += term * term;
    }
    double mc = sum / n;
    double se = std::sqrt((sumsq / n - mc * mc) / n);
    REQUIRE(std::abs(mc - analytic) < 3.0 * se + 1e-12);
}

TEST_CASE("reward reconstruction is blind to the free blocks") {
    Setup s = make_setup(14);
    Tape tape;
    LatentBlocks post = s.wm.posterior(&tape, s.obs, s.lat_hist, s.act_hist, s.eps);
    Tensor rew_pred = s.wm.decode_reward(&tape, post.rew_sample());
    Tensor target = Tensor::zeros({3});
    Tensor j_r = mean_all(gaussian_log_prob(target, rew_pred, 1.0));
    tape.backward(j_r);
    // free-block samples never entered J_R: their nodes carry no gradient
    for (int b : {kCtrlFree, kNoise}) {
        const std::vector<double>* g = tape.grad(post.sample[static_cast<std::size_t>(b)]);
        if (g) {
            for (double v : *g) REQUIRE(v == 0.0);
        }
    }
    // while the reward-relevant samples do
    const std::vector<double>* g = tape.grad(post.sample[kCtrlRew]);
    REQUIRE(g != nullptr);
    bool nonzero = false;
    for (double v : *g) nonzero |= (v != 0.0);
    REQUIRE(nonzero);
}

TEST_CASE("fixed eps makes the full loss deterministic and differentiable end to end") {
    std::int64_t B = 2, L = 3;
    WindowBatch window = random_window(B, L, 15);
    std::vector<std::array<Tensor, 4>> eps;
    RngStream eps_rng(16);
    WorldModelConfig cfg = small_config();
    RngStream wm_rng(17);
    WorldModel wm(cfg, wm_rng);
    for (std::int64_t t = 0; t < L; ++t) eps.push_back(wm.draw_eps(B, eps_rng));

    auto loss_at = [&](Tape& tape) {
        ElboResult e = elbo_terms(wm, tape, window, nullptr, &eps);
        return neg(add(e.j_o, add(e.j_r, e.j_d)));
    };
    Tape t1, t2;
    REQUIRE(loss_at(t1).value() == loss_at(t2).value());

    // end-to-end gradient check through one encoder weight matrix
    Parameter* enc_w = nullptr;
    for (Parameter* p : wm.parameters()) {
        if (p->name == "enc.w1") enc_w = p;
    }
    REQUIRE(enc_w != nullptr);
    // the watched tensor shares the parameter buffer, so the tape dedups the
    // forward pass's own watch() onto the same node
    Tensor w0 = enc_w->value;
    std::vector<double> original = enc_w->value.data();
    double err = grad_check(
        [&](Tape& tape, const Tensor& w) {
            if (w.buffer() != enc_w->value.buffer()) {
                enc_w->value.raw() = w.data(); // finite-difference probe
            }
            return loss_at(tape);
        },
        w0, 1e-5);
    REQUIRE(err < 1e-3);
    enc_w->value.raw() = original;
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    RngStream rng(18);
    WorldModel a(small_config(), rng);
    ArrayPack pack;
    a.save(pack);
    RngStream rng2(19);
    WorldModel b(small_config(), rng2);
    b.load(pack);
    auto pa = a.parameters();
    auto pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->value.data() == pb[i]->value.data());
    }
}
