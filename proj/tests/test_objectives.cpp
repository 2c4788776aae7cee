#include <gtest/gtest.h>

#include <cmath>

#include "smpo/objectives.hpp"
#include "test_support.hpp"

using namespace smpo;
using namespace smpo::testing;

namespace {

/// Zero weights, output bias = b: predicts b for every input.
DenoiserModel constant_model(const Vector& b) {
    auto m = DenoiserModel::zeros(tiny_arch());
    const auto& last = m.layers().back();
    for (std::size_t k = 0; k < b.dim(); ++k) m.params()[last.bias_offset + k] = b[k];
    return m;
}

const double kLog2 = std::log(2.0);

}  // namespace

TEST(DiffusionLoss, OracleAndZeroDenoiser) {
    const auto sched = tiny_schedule();
    const Vector x0{0.4, -0.2}, c{1.0, 1.0}, eps{0.7, -1.1};
    EXPECT_EQ(diffusion_loss(constant_model(eps), x0, c, 6, eps, sched).loss(), 0.0);
    EXPECT_DOUBLE_EQ(diffusion_loss(constant_model(Vector{0.0, 0.0}), x0, c, 6, eps, sched).loss(),
                     squared_norm(eps) * sched.loss_weight(6));
    EXPECT_THROW(diffusion_loss(constant_model(eps), x0, c, 0, eps, sched), InvalidRangeError);
}

TEST(DpoScore, IdentityAndConstructedImprovement) {
    const auto sched = tiny_schedule();
    const Vector x0{0.4, -0.2}, c{1.0, 1.0}, eps{0.7, -1.1};
    const auto m = random_model(tiny_arch(), 1);
    EXPECT_EQ(dpo_score(m, m, x0, c, 5, eps, sched), 0.0);
    // theta predicts eps exactly, ref is off by (0.3, 0.3)
    const double s = dpo_score(constant_model(eps), constant_model(eps + Vector{0.3, 0.3}), x0, c, 5, eps, sched);
    EXPECT_LT(s, 0.0);
    EXPECT_NEAR(s, -0.18, 1e-12);
    EXPECT_EQ(dpo_score(m, constant_model(eps), x0, c, 5, eps, sched), dpo_score(m, constant_model(eps), x0, c, 5, eps, sched));
    DenoiserArch other = tiny_arch();
    other.hidden_dim = 4;
    EXPECT_THROW(dpo_score(m, DenoiserModel::zeros(other), x0, c, 5, eps, sched), ArchitectureMismatchError);
}

TEST(DpoLoss, IdentityGivesLogTwoAndSwapNegatesMargin) {
    const auto sched = tiny_schedule();
    SeededRng rng(2);
    const auto ref = random_model(tiny_arch(), 2);
    const auto m = perturbed(ref, 3);
    auto pair = random_pair(rng);
    const Vector ew = gaussian(rng, 2), el = gaussian(rng, 2);
    EXPECT_NEAR(dpo_loss(ref, ref, pair, 7, ew, el, 2000.0, sched).breakdown.loss, kLog2, 1e-15);

    const auto fwd = dpo_loss(m, ref, pair, 7, ew, el, 5.0, sched).breakdown;
    std::swap(pair.x_w, pair.x_l);
    const auto bwd = dpo_loss(m, ref, pair, 7, el, ew, 5.0, sched).breakdown;
    EXPECT_NEAR(bwd.margin, -fwd.margin, 1e-12);
    EXPECT_NEAR(bwd.loss, neg_log_sigmoid(-fwd.margin), 1e-12);
    EXPECT_EQ(fwd.coefficient, 1.0);
    EXPECT_NEAR(fwd.loss, -std::log(sigmoid(fwd.margin)), 1e-12);
    EXPECT_GT(fwd.loss, 0.0);
    EXPECT_THROW(dpo_loss(m, ref, pair, 7, ew, el, 0.0, sched), InvalidRangeError);
}

TEST(SmpoScore, IdentityAndForwardNoisedLatentMatchesDpoScore) {
    const auto sched = tiny_schedule();
    SeededRng rng(4);
    const auto ref = random_model(tiny_arch(), 4);
    const auto m = perturbed(ref, 5);
    for (int i = 0; i < 50; ++i) {
        const int t = static_cast<int>(rng.uniform_int(1, sched.T));
        const Vector x0 = gaussian(rng, 2), c = gaussian(rng, 2), eps = gaussian(rng, 2);
        const auto inv = renoise_invert(m, x0, t, 9, c, 1.0, sched);
        EXPECT_EQ(smpo_score(ref, ref, x0, c, t, inv, sched), 0.0);
        const double a = smpo_score(m, ref, x0, c, t, forward_noised_latent(x0, t, eps, sched), sched);
        const double b = dpo_score(m, ref, x0, c, t, eps, sched);
        EXPECT_NEAR(a, b, 1e-9 * (1.0 + std::abs(b)));
    }
    const Vector x0{0.0, 0.0};
    const auto inv = renoise_invert(m, x0, 5, 3, x0, 1.0, sched);
    EXPECT_THROW(smpo_score(m, ref, x0, x0, 6, inv, sched), InvalidRangeError);
}

TEST(SmpoLoss, ZeroCoefficientGivesLogTwoAndExactlyZeroGradient) {
    const auto sched = tiny_schedule();
    SeededRng rng(6);
    const auto ref = random_model(tiny_arch(), 6);
    const auto m = perturbed(ref, 7, 0.3);
    for (int i = 0; i < 20; ++i) {
        auto pair = random_pair(rng, 2, 0.5, rng.uniform(0.1, 20.0));
        const int t = static_cast<int>(rng.uniform_int(1, sched.T));
        const auto iw = renoise_invert(m, pair.x_w, t, 9, pair.condition, 1.0, sched);
        const auto il = renoise_invert(m, pair.x_l, t, 9, pair.condition, 1.0, sched);
        auto pl = smpo_loss(m, ref, pair, t, iw, il, 2000.0, sched);
        EXPECT_NEAR(pl.breakdown.loss, kLog2, 1e-12);
        const auto g = pl.graph.backward(m);
        EXPECT_EQ(g.norm(), 0.0);
    }
}

TEST(SmpoLoss, BinaryLabelOnForwardNoisedLatentsEqualsDpoLoss) {
    const auto sched = tiny_schedule();
    SeededRng rng(8);
    const auto ref = random_model(tiny_arch(), 8);
    const auto m = perturbed(ref, 9);
    for (int i = 0; i < 100; ++i) {
        auto pair = random_pair(rng);
        pair.label = SmoothedLabel::binary();
        const int t = static_cast<int>(rng.uniform_int(1, sched.T));
        const Vector ew = gaussian(rng, 2), el = gaussian(rng, 2);
        const double beta = rng.uniform(0.1, 10.0);
        auto a = smpo_loss(m, ref, pair, t, forward_noised_latent(pair.x_w, t, ew, sched),
                           forward_noised_latent(pair.x_l, t, el, sched), beta, sched);
        auto b = dpo_loss(m, ref, pair, t, ew, el, beta, sched);
        EXPECT_NEAR(a.breakdown.loss, b.breakdown.loss, 1e-12);
        const auto ga = a.graph.backward(m), gb = b.graph.backward(m);
        for (std::size_t k = 0; k < ga.grads.size(); ++k) EXPECT_NEAR(ga.grads[k], gb.grads[k], 1e-9);
    }
}

TEST(SmpoLoss, ErrorsAndBreakdown) {
    const auto sched = tiny_schedule();
    SeededRng rng(10);
    const auto ref = random_model(tiny_arch(), 10);
    const auto m = perturbed(ref, 11);
    auto pair = random_pair(rng, 2, 0.8, 10.0);
    const auto iw = renoise_invert(m, pair.x_w, 8, 9, pair.condition, 1.0, sched);
    const auto il = renoise_invert(m, pair.x_l, 8, 9, pair.condition, 1.0, sched);
    const auto b = smpo_loss(m, ref, pair, 8, iw, il, 3.0, sched).breakdown;
    EXPECT_NEAR(b.coefficient, 6.0, 1e-12);
    EXPECT_NEAR(b.margin, -6.0 * 3.0 * (b.s_w - b.s_l), 1e-12);
    EXPECT_NEAR(b.loss, softplus(-b.margin), 1e-15);
    EXPECT_EQ(b.t, 8);
    EXPECT_NEAR(b.s_w, smpo_score(m, ref, pair.x_w, pair.condition, 8, iw, sched), 1e-15);
    EXPECT_THROW(smpo_loss(m, ref, pair, 9, iw, il, 3.0, sched), InvalidRangeError);
    EXPECT_THROW(smpo_loss(m, ref, pair, 8, iw, il, -1.0, sched), InvalidRangeError);
    pair.label.reset();
    EXPECT_THROW(smpo_loss(m, ref, pair, 8, iw, il, 3.0, sched), MissingLabelError);
    EXPECT_THROW(smpo_loss_through_inversion(m, ref, pair, 8, 9, 1.0, 3.0, sched), MissingLabelError);
}

TEST(Gradients, PreferenceLossesMatchFiniteDifferences) {
    const auto sched = tiny_schedule();
    SeededRng rng(12);
    for (int i = 0; i < 5; ++i) {
        const auto ref = random_model(tiny_arch(), 20 + i);
        const auto m = perturbed(ref, 30 + i);
        const auto pair = random_pair(rng);
        const int t = static_cast<int>(rng.uniform_int(3, sched.T));
        const double beta = rng.uniform(0.5, 5.0);
        const Vector ew = gaussian(rng, 2), el = gaussian(rng, 2);
        const auto iw = renoise_invert(m, pair.x_w, t, 9, pair.condition, 1.0, sched);
        const auto il = renoise_invert(m, pair.x_l, t, 9, pair.condition, 1.0, sched);

        auto dg = dpo_loss(m, ref, pair, t, ew, el, beta, sched).graph.backward(m);
        EXPECT_LT(max_rel_error(dg.grads, numeric_gradient(m, [&](const DenoiserModel& p) {
                                    return dpo_loss(p, ref, pair, t, ew, el, beta, sched).graph.loss();
                                })),
                  1e-4);
        auto sg = smpo_loss(m, ref, pair, t, iw, il, beta, sched).graph.backward(m);
        EXPECT_LT(max_rel_error(sg.grads, numeric_gradient(m, [&](const DenoiserModel& p) {
                                    return smpo_loss(p, ref, pair, t, iw, il, beta, sched).graph.loss();
                                })),
                  1e-4);
        auto tg = smpo_loss_through_inversion(m, ref, pair, t, 4, 1.5, beta, sched).graph.backward(m);
        EXPECT_LT(max_rel_error(tg.grads, numeric_gradient(m, [&](const DenoiserModel& p) {
                                    return smpo_loss_through_inversion(p, ref, pair, t, 4, 1.5, beta, sched).graph.loss();
                                })),
                  1e-4);
    }
}

TEST(Gradients, DetachedAndAttachedInversionAgreeOnLossValue) {
    const auto sched = tiny_schedule();
    SeededRng rng(13);
    const auto ref = random_model(tiny_arch(), 13);
    const auto m = perturbed(ref, 14);
    const auto pair = random_pair(rng);
    const auto iw = renoise_invert(m, pair.x_w, 10, 5, pair.condition, 1.0, sched);
    const auto il = renoise_invert(m, pair.x_l, 10, 5, pair.condition, 1.0, sched);
    const double detached = smpo_loss(m, ref, pair, 10, iw, il, 2.0, sched).breakdown.loss;
    const double attached = smpo_loss_through_inversion(m, ref, pair, 10, 5, 1.0, 2.0, sched).breakdown.loss;
    EXPECT_NEAR(detached, attached, 1e-12);
}

TEST(SmoothedScalar, ReducesToDpoAndGatesAtZeroCoefficient) {
    SeededRng rng(15);
    for (int i = 0; i < 1000; ++i) {
        const double a = rng.uniform(-3, 3), b = rng.uniform(-3, 3), c = rng.uniform(-3, 3), d = rng.uniform(-3, 3);
        const double beta = rng.uniform(0.01, 5.0);
        const auto v = smoothed_dpo_scalar(a, b, c, d, 1.0, 1.0, beta);
        const double plain = -std::log(sigmoid(beta * ((a - c) - (b - d))));
        EXPECT_NEAR(v.direct, plain, 1e-12);
        EXPECT_NEAR(v.reduced, plain, 1e-12);
        const double gamma = rng.uniform(0.1, 10.0);
        const auto z = smoothed_dpo_scalar(a, b, c, d, gamma / 2.0, gamma, beta);
        EXPECT_NEAR(z.direct, kLog2, 1e-12);
        EXPECT_NEAR(z.reduced, kLog2, 1e-15);
    }
}

TEST(SmoothedScalar, DirectEqualsReducedOnRandomSweep) {
    SeededRng rng(16);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double a = rng.uniform(-3, 3), b = rng.uniform(-3, 3), c = rng.uniform(-3, 3), d = rng.uniform(-3, 3);
        const double gamma = rng.uniform(0.1, 10.0);
        const double alpha = rng.uniform(0.0, gamma);
        const auto v = smoothed_dpo_scalar(a, b, c, d, alpha, gamma, rng.uniform(0.01, 5.0));
        worst = std::max(worst, std::abs(v.direct - v.reduced));
    }
    EXPECT_LT(worst, 1e-10);
}

TEST(NegLogSigmoid, StrictlyDecreasingAndStableForHugeMargins) {
    double prev = neg_log_sigmoid(-1e6);
    EXPECT_EQ(prev, 1e6);
    for (double m = -1e6; m <= 30.0; m = m < -1.0 ? m / 2.0 : m + 0.5) {
        const double v = neg_log_sigmoid(m + 0.25);
        EXPECT_LT(v, prev);
        EXPECT_TRUE(std::isfinite(v));
        prev = v;
    }
    EXPECT_EQ(neg_log_sigmoid(0.0), kLog2);
    EXPECT_GT(neg_log_sigmoid(1e6), -1.0);
    EXPECT_GE(neg_log_sigmoid(1e6), 0.0);
}
