#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mtkd/data/dataset.hpp"
#include "mtkd/losses/losses.hpp"
#include "mtkd/nn/optim.hpp"

using namespace mtkd;
using mtkd::testing::random_tensor;

namespace {

Tensor<float> random_input(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor<float> t({n, 3, h, w});
    for (auto& v : t.values()) v = u(rng);
    return t;
}

bool all_finite(const Tensor<float>& t) {
    for (float v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

ModelConfig teacher_cfg(int base) {
    ModelConfig c = ModelConfig::defaults(ModelRole::teacher_mt_unet);
    c.base_channels = base;
    return c;
}

} // namespace

TEST(Models, ParameterCountsOrderedAndNearTableValues) {
    const std::size_t s1 = count_parameters(*build_model<float>(ModelConfig::defaults(ModelRole::student_s1), 0));
    const std::size_t s2 = count_parameters(*build_model<float>(ModelConfig::defaults(ModelRole::student_s2), 0));
    const std::size_t t1 = count_parameters(*build_model<float>(ModelConfig::defaults(ModelRole::teacher_mt_unet), 0));
    EXPECT_LT(s1, s2);
    EXPECT_LT(s2, t1);
    EXPECT_NEAR(static_cast<double>(s1), 57000.0, 0.2 * 57000.0);
    EXPECT_NEAR(static_cast<double>(t1), 43.23e6, 0.2 * 43.23e6);
    EXPECT_EQ(s1, 63217u);
    EXPECT_EQ(t1, 43236036u);
}

TEST(Models, LinearCountAndFreezeInvariance) {
    Rng rng(1);
    nn::Linear<float> lin(10, 5, rng);
    EXPECT_EQ(nn::count_parameters(lin), 55u);

    auto m = build_model<float>(ModelConfig::defaults(ModelRole::student_s2), 0);
    const std::size_t before = count_parameters(*m);
    m->freeze();
    EXPECT_EQ(count_parameters(*m), before);
}

TEST(Models, S1ShapesAtFullResolution) {
    auto s1 = build_model<float>(ModelConfig::defaults(ModelRole::student_s1), 0);
    s1->set_training(false);
    NoGradGuard guard;
    const auto out = s1->forward(Var<float>(random_input(1, 256, 256, 1)));
    EXPECT_EQ(out.seg_logits.shape(), (Shape{1, 1, 256, 256}));
    EXPECT_EQ(out.taps.bottleneck.shape(), (Shape{1, 64, 64, 64}));
    EXPECT_EQ(out.taps.encoder.shape(), (Shape{1, 32, 128, 128}));
    EXPECT_EQ(out.taps.decoder.shape(), (Shape{1, 16, 256, 256}));
    EXPECT_FALSE(out.recon.has_value());
}

TEST(Models, TeacherHasBothHeadsAndTheDocumentedLadder) {
    auto full = build_model<float>(ModelConfig::defaults(ModelRole::teacher_mt_unet), 0);
    EXPECT_EQ(full->tap_channels(Scale::bottleneck), 1024u);
    EXPECT_EQ(full->tap_stride(Scale::bottleneck), 16u);

    auto t = build_model<float>(teacher_cfg(4), 0);
    t->set_training(false);
    NoGradGuard guard;
    const auto out = t->forward(Var<float>(random_input(2, 32, 48, 2)));
    EXPECT_EQ(out.seg_logits.shape(), (Shape{2, 1, 32, 48}));
    ASSERT_TRUE(out.recon.has_value());
    EXPECT_EQ(out.recon->shape(), (Shape{2, 3, 32, 48}));
    for (Scale s : all_scales) {
        const auto& tap = out.taps.at(s);
        EXPECT_EQ(tap.shape()[0], 2u);
        EXPECT_EQ(tap.shape()[1], t->tap_channels(s));
        EXPECT_EQ(tap.shape()[2], 32 / t->tap_stride(s));
        EXPECT_EQ(tap.shape()[3], 48 / t->tap_stride(s));
    }
    const auto zeros = t->forward(Var<float>(Tensor<float>({1, 3, 16, 16})));
    EXPECT_TRUE(all_finite(zeros.seg_logits.value()));
    EXPECT_TRUE(all_finite(zeros.recon->value()));

    ModelConfig no_recon = teacher_cfg(4);
    no_recon.with_recon_head = false;
    EXPECT_THROW(build_model<float>(no_recon, 0), Error);
}

TEST(Models, S2TapsAndEvalDeterminism) {
    auto s2 = build_model<float>(ModelConfig::defaults(ModelRole::student_s2), 5);
    s2->set_training(false);
    NoGradGuard guard;
    const Tensor<float> x = random_input(2, 32, 32, 3);
    const auto a = s2->forward(Var<float>(x)), b = s2->forward(Var<float>(x));
    EXPECT_EQ(a.seg_logits.value().values(), b.seg_logits.value().values());
    EXPECT_EQ(a.taps.bottleneck.value().values(), b.taps.bottleneck.value().values());
    EXPECT_EQ(a.taps.bottleneck.shape()[2], 32 / s2->tap_stride(Scale::bottleneck));
}

TEST(Models, IndivisibleSizesAreRejected) {
    auto s1 = build_model<float>(ModelConfig::defaults(ModelRole::student_s1), 0);
    EXPECT_THROW(s1->forward(Var<float>(random_input(1, 250, 256, 0))), ShapeError);
    EXPECT_THROW(build_model<float>(ModelConfig::defaults(ModelRole::student_s1), 0, std::array<std::size_t, 2>{250, 256}), ShapeError);
    EXPECT_THROW(build_model<float>(teacher_cfg(2), 0, std::array<std::size_t, 2>{40, 40}), ShapeError);
    EXPECT_THROW(s1->forward(Var<float>(Tensor<float>({1, 1, 16, 16}))), ShapeError);
}

TEST(Models, SameSeedSameWeights) {
    auto a = build_model<float>(ModelConfig::defaults(ModelRole::student_s2), 9);
    auto b = build_model<float>(ModelConfig::defaults(ModelRole::student_s2), 9);
    auto c = build_model<float>(ModelConfig::defaults(ModelRole::student_s2), 10);
    EXPECT_EQ(nn::state_checksum(*a), nn::state_checksum(*b));
    EXPECT_NE(nn::state_checksum(*a), nn::state_checksum(*c));
}

TEST(Projector, UnitNormDeterministicAndZeroSafe) {
    Rng rng(4);
    Projector<float> p(Scale::encoder, 8, 16, rng);
    std::mt19937_64 gen(1);
    Tensor<float> tap({3, 8, 4, 4});
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (auto& v : tap.values()) v = n(gen);
    const Var<float> e = p(Var<float>(tap));
    EXPECT_EQ(e.shape(), (Shape{3, 16}));
    for (std::size_t i = 0; i < 3; ++i) {
        double sq = 0;
        for (std::size_t j = 0; j < 16; ++j) sq += static_cast<double>(e.value()[i * 16 + j]) * e.value()[i * 16 + j];
        EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
    }
    EXPECT_EQ(p(Var<float>(tap)).value().values(), e.value().values());

    // zero tap: zero-initialised biases make the pre-normalisation row exactly zero
    const Var<float> z = p(Var<float>(Tensor<float>({1, 8, 4, 4})));
    EXPECT_TRUE(all_finite(z.value()));
    EXPECT_THROW(p(Var<float>(Tensor<float>({1, 4, 4, 4}))), ShapeError);
}

TEST(Freeze, FrozenModelKeepsItsChecksumUnfrozenControlChanges) {
    const Dataset ds = make_synthetic_dataset(4, {16, 16}, 1);
    const Batch<float> batch = make_batch<float>(ds, {0, 1, 2, 3});
    auto train = [&](SegmentationModel<float>& m) {
        nn::Optimizer<float> opt(m.parameters(), nn::OptimizerConfig::rmsprop(1e-3));
        for (int step = 0; step < 10; ++step) {
            opt.zero_grad();
            const auto out = m.forward(Var<float>(batch.images));
            const Var<float> loss = dice_loss(sigmoid(out.seg_logits), batch.masks);
            if (loss.requires_grad()) backward(loss);
            opt.step();
        }
    };
    auto frozen = build_model<float>(ModelConfig::defaults(ModelRole::student_s1), 2);
    frozen->freeze();
    frozen->freeze();  // idempotent
    EXPECT_TRUE(frozen->frozen());
    const auto before = nn::state_checksum(*frozen);
    train(*frozen);
    EXPECT_EQ(nn::state_checksum(*frozen), before);

    auto control = build_model<float>(ModelConfig::defaults(ModelRole::student_s1), 2);
    EXPECT_EQ(nn::state_checksum(*control), before);
    train(*control);
    EXPECT_NE(nn::state_checksum(*control), before);
}

// First optimizer steps against hand-derived closed forms of the reference update rules.
TEST(Optim, FirstStepsFollowTheReferenceRules) {
    const double w0 = 0.5, g = 0.2;
    auto one_step = [&](const nn::OptimizerConfig& cfg, int steps) {
        Var<double> w(Tensor<double>({1}, w0), true);
        nn::Optimizer<double> opt({w}, cfg);
        for (int i = 0; i < steps; ++i) {
            opt.zero_grad();
            backward(weighted_sum<double>({w}, {g}));
            opt.step();
        }
        return w.value()[0];
    };
    // AdamW step 1: decoupled decay, then m_hat/sqrt(v_hat) = g/|g|
    const double lr = 1e-3, wd = 0.01;
    EXPECT_NEAR(one_step(nn::OptimizerConfig::adamw(lr, wd), 1), w0 * (1 - lr * wd) - lr * g / (std::abs(g) + 1e-8), 1e-12);
    // RMSProp step 1: v = (1-alpha) g^2
    const double v = 0.01 * g * g;
    EXPECT_NEAR(one_step(nn::OptimizerConfig::rmsprop(lr), 1), w0 - lr * g / (std::sqrt(v) + 1e-8), 1e-12);
    // RMSProp step 2 with a constant gradient
    const double w1 = w0 - lr * g / (std::sqrt(v) + 1e-8);
    const double v2 = 0.99 * v + 0.01 * g * g;
    EXPECT_NEAR(one_step(nn::OptimizerConfig::rmsprop(lr), 2), w1 - lr * g / (std::sqrt(v2) + 1e-8), 1e-12);
}
