#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "smpo/checkpoint.hpp"
#include "smpo/toy_data.hpp"
#include "smpo/training.hpp"

using namespace smpo;

namespace {

TrainConfig small_config(Method method) {
    TrainConfig c;
    c.method = method;
    c.T = 20;
    c.hidden_dim = 8;
    c.depth = 2;
    c.t_embed_dim = 4;
    c.batch_pairs = 8;
    c.total_steps = 6;
    c.warmup_steps = 4;
    c.lr = 1e-3;
    c.beta = 50.0;
    c.inv_steps = 4;
    return c;
}

const Dataset& labeled_data() {
    static const Dataset d =
        label_dataset(gen_toy_data(ToyKind::gmm2d, 200, 1), RewardFunction::target_distance(), 10.0);
    return d;
}

const DenoiserModel& small_reference() {
    static const DenoiserModel m = [] {
        auto c = small_config(Method::sft);
        c.total_steps = 30;
        c.batch_pairs = 16;
        return pretrain_reference(labeled_data(), c).model;
    }();
    return m;
}

bool same_params(const DenoiserModel& a, const DenoiserModel& b) {
    return std::equal(a.params().begin(), a.params().end(), b.params().begin(), b.params().end());
}

}  // namespace

TEST(TrainConfigTest, ValidationRejectsBadValues) {
    auto expect_bad = [](auto mutate) {
        TrainConfig c;
        mutate(c);
        EXPECT_THROW(c.validate(), ConfigError);
    };
    expect_bad([](TrainConfig& c) { c.beta = 0.0; });
    expect_bad([](TrainConfig& c) { c.gamma = -1.0; });
    expect_bad([](TrainConfig& c) { c.inv_steps = 0; });
    expect_bad([](TrainConfig& c) { c.inv_steps = 51; });
    expect_bad([](TrainConfig& c) { c.lr = 0.0; });
    expect_bad([](TrainConfig& c) { c.batch_pairs = 0; });
    expect_bad([](TrainConfig& c) { c.grad_accum = 0; });
    expect_bad([](TrainConfig& c) { c.total_steps = -1; });
    expect_bad([](TrainConfig& c) { c.cond_dropout = 1.0; });
    expect_bad([](TrainConfig& c) { c.t_embed_dim = 5; });
    expect_bad([](TrainConfig& c) { c.workers = 0; });
    expect_bad([](TrainConfig& c) { c.adam_beta1 = 1.0; });
    TrainConfig ok;
    EXPECT_NO_THROW(ok.validate());
    EXPECT_EQ(ok.beta, 2000.0);
    EXPECT_EQ(ok.gamma, 10.0);
    EXPECT_EQ(ok.inv_steps, 9);
    EXPECT_EQ(ok.inv_guidance, 1.0);
    EXPECT_TRUE(ok.detach_inversion);
    EXPECT_EQ(method_from_string("dpo"), Method::dpo);
    EXPECT_THROW(method_from_string("ipo"), ConfigError);
}

TEST(TrainConfigTest, ScheduleRescalingReachesNoise) {
    TrainConfig c;
    c.T = 50;
    const auto s = c.make_noise_schedule();
    EXPECT_GE(s.alpha_bar.front(), 0.99);
    EXPECT_LT(s.alpha_bar.back(), 1e-3);
    c.T = 1000;
    const auto full = c.make_noise_schedule();
    EXPECT_EQ(full.beta_min, 1e-4);
    EXPECT_EQ(full.beta_max, 0.02);
    c.scale_betas = false;
    c.T = 50;
    EXPECT_EQ(c.make_noise_schedule().beta_max, 0.02);
}

TEST(Metrics, CsvHeaderOrderIsFixed) {
    EXPECT_EQ(metrics_csv_header(), "step,loss,mean_margin,mean_coefficient,grad_norm,lr,wall_ms");
    MetricsRow r{3, 0.5, -1.25, 4.0, 0.1, 1e-4, 0.0};
    EXPECT_EQ(metrics_csv_row(r), "3,0.5,-1.25,4,0.10000000000000001,0.0001,0");
}

TEST(Pretrain, DeterministicLossDecreasesAndRecordsEveryStep) {
    auto c = small_config(Method::sft);
    c.total_steps = 60;
    c.batch_pairs = 16;
    const auto a = pretrain_reference(labeled_data(), c);
    const auto b = pretrain_reference(labeled_data(), c);
    EXPECT_TRUE(same_params(a.model, b.model));
    EXPECT_EQ(metrics_csv(a.metrics), metrics_csv(b.metrics));
    ASSERT_EQ(a.metrics.size(), 60u);
    const auto sched = c.make_noise_schedule();
    const Checkpoint ca{a.model, sched, a.optimizer, 60}, cb{b.model, sched, b.optimizer, 60};
    EXPECT_EQ(checkpoint_to_string(ca), checkpoint_to_string(cb));
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 6; ++i) {
        first += a.metrics[static_cast<std::size_t>(i)].loss;
        last += a.metrics[static_cast<std::size_t>(54 + i)].loss;
    }
    EXPECT_LT(last, first);
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
        EXPECT_EQ(a.metrics[i].step, static_cast<std::int64_t>(i + 1));
        EXPECT_EQ(a.metrics[i].wall_ms, 0.0);
    }
}

TEST(Pretrain, NonFiniteDataDiverges) {
    auto d = labeled_data();
    for (auto& p : d.pairs) p.x_w[0] = std::numeric_limits<double>::infinity();
    auto c = small_config(Method::sft);
    EXPECT_THROW(pretrain_reference(d, c), DivergenceError);
    EXPECT_THROW(pretrain_reference(Dataset{}, c), InvalidRangeError);
}

TEST(Finetune, ZeroStepsReturnsReference) {
    auto c = small_config(Method::smpo);
    c.total_steps = 0;
    const auto r = finetune(small_reference(), labeled_data(), c);
    EXPECT_TRUE(same_params(r.model, small_reference()));
    EXPECT_TRUE(r.metrics.empty());
}

TEST(Finetune, ReferenceIsNeverModified) {
    const auto before = small_reference().checksum();
    for (auto m : {Method::sft, Method::dpo, Method::smpo}) {
        const auto r = finetune(small_reference(), labeled_data(), small_config(m));
        EXPECT_FALSE(same_params(r.model, small_reference()));
    }
    EXPECT_EQ(small_reference().checksum(), before);
}

TEST(Finetune, SmpoNeedsLabels) {
    const auto unlabeled = gen_toy_data(ToyKind::gmm2d, 20, 1);
    EXPECT_THROW(finetune(small_reference(), unlabeled, small_config(Method::smpo)), MissingLabelError);
    EXPECT_NO_THROW(finetune(small_reference(), unlabeled, small_config(Method::dpo)));
}

TEST(Finetune, WarmupVisibleInMetricsLog) {
    auto c = small_config(Method::smpo);
    c.total_steps = 8;
    c.warmup_steps = 5;
    const auto r = finetune(small_reference(), labeled_data(), c);
    for (const auto& row : r.metrics) {
        EXPECT_DOUBLE_EQ(row.lr, c.lr * std::min(1.0, static_cast<double>(row.step) / 5.0));
    }
    c.lr_cosine_decay = true;
    const auto decayed = finetune(small_reference(), labeled_data(), c);
    EXPECT_DOUBLE_EQ(decayed.metrics[4].lr, c.lr);
    EXPECT_NEAR(decayed.metrics.back().lr, 0.0, 1e-18);
    c.lr_cosine_decay = false;
    c.lr_beta_scaling = true;
    const auto scaled = finetune(small_reference(), labeled_data(), c);
    EXPECT_DOUBLE_EQ(scaled.metrics.back().lr, c.lr * 2000.0 / c.beta);
}

TEST(Finetune, MetricsReflectLabelsAndGamma) {
    auto c = small_config(Method::smpo);
    c.gamma = 4.0;
    const auto r = finetune(small_reference(), labeled_data(), c);
    for (const auto& row : r.metrics) {
        EXPECT_GT(row.mean_coefficient, 0.0);
        EXPECT_LT(row.mean_coefficient, 4.0);
        EXPECT_TRUE(std::isfinite(row.loss));
        EXPECT_GT(row.grad_norm, 0.0);
    }
    const auto d = finetune(small_reference(), labeled_data(), small_config(Method::dpo));
    for (const auto& row : d.metrics) EXPECT_EQ(row.mean_coefficient, 1.0);
}

TEST(Finetune, GradientAccumulationMatchesLargeBatch) {
    for (auto m : {Method::dpo, Method::smpo}) {
        auto big = small_config(m);
        big.batch_pairs = 12;
        big.grad_accum = 1;
        big.total_steps = 3;
        auto acc = big;
        acc.batch_pairs = 3;
        acc.grad_accum = 4;
        const auto a = finetune(small_reference(), labeled_data(), big);
        const auto b = finetune(small_reference(), labeled_data(), acc);
        for (std::size_t i = 0; i < a.model.num_params(); ++i) {
            ASSERT_NEAR(a.model.params()[i], b.model.params()[i], 1e-10);
        }
        for (std::size_t s = 0; s < a.metrics.size(); ++s) {
            EXPECT_NEAR(a.metrics[s].loss, b.metrics[s].loss, 1e-10);
            EXPECT_NEAR(a.metrics[s].grad_norm, b.metrics[s].grad_norm, 1e-10 * (1 + a.metrics[s].grad_norm));
        }
    }
}

TEST(Finetune, WorkerCountDoesNotChangeResults) {
    auto strict = small_config(Method::smpo);
    strict.batch_pairs = 20;
    auto parallel = strict;
    parallel.strict = false;
    parallel.workers = 4;
    const auto a = finetune(small_reference(), labeled_data(), strict);
    const auto b = finetune(small_reference(), labeled_data(), parallel);
    EXPECT_TRUE(same_params(a.model, b.model));
    for (std::size_t s = 0; s < a.metrics.size(); ++s) EXPECT_EQ(a.metrics[s].loss, b.metrics[s].loss);
}

TEST(Finetune, AttachedInversionTrains) {
    auto c = small_config(Method::smpo);
    c.detach_inversion = false;
    c.total_steps = 3;
    const auto r = finetune(small_reference(), labeled_data(), c);
    EXPECT_EQ(r.metrics.size(), 3u);
    EXPECT_FALSE(same_params(r.model, small_reference()));
}

TEST(Finetune, CheckpointHookFiresEveryNAndAtEnd) {
    auto c = small_config(Method::dpo);
    c.total_steps = 7;
    c.checkpoint_every = 3;
    std::vector<std::int64_t> steps;
    finetune(small_reference(), labeled_data(), c,
             [&](std::int64_t s, const DenoiserModel&, const AdamState& st) {
                 steps.push_back(s);
                 EXPECT_EQ(st.step, s);
             });
    EXPECT_EQ(steps, (std::vector<std::int64_t>{3, 6, 7}));
}

TEST(Finetune, ReferenceArchitectureMustMatchHorizon) {
    auto c = small_config(Method::dpo);
    c.T = 30;
    EXPECT_THROW(finetune(small_reference(), labeled_data(), c), ArchitectureMismatchError);
}
