#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "mtkd/losses/losses.hpp"

using namespace mtkd;
using mtkd::testing::max_relative_error;
using mtkd::testing::numeric_gradient;
using mtkd::testing::random_mask;
using mtkd::testing::random_tensor;

namespace {

Tensor<double> filled(Shape s, std::initializer_list<double> v) {
    Tensor<double> t(std::move(s));
    std::copy(v.begin(), v.end(), t.values().begin());
    return t;
}

Tensor<double> unit_rows(std::size_t b, std::size_t d, std::mt19937_64& rng) {
    Tensor<double> t = random_tensor({b, d}, rng);
    for (std::size_t i = 0; i < b; ++i) {
        double n = 0;
        for (std::size_t j = 0; j < d; ++j) n += t[i * d + j] * t[i * d + j];
        n = std::sqrt(n);
        for (std::size_t j = 0; j < d; ++j) t[i * d + j] /= n;
    }
    return t;
}

double sigmoid_d(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Straight two-class KL(q || p) with softmax over the pair (z, 0): independent of the
// softplus formulation used by the library.
double pair_kl(double student, double teacher, double temp) {
    const double ps[2] = {std::exp(student / temp), 1.0};
    const double qs[2] = {std::exp(teacher / temp), 1.0};
    const double zp = ps[0] + ps[1], zq = qs[0] + qs[1];
    double kl = 0;
    for (int k = 0; k < 2; ++k) kl += qs[k] / zq * std::log((qs[k] / zq) / (ps[k] / zp));
    return kl;
}

template <typename F>
void expect_gradient(const Tensor<double>& x0, F loss_of, double tol = 1e-3) {
    Var<double> x(x0, true);
    Var<double> y = loss_of(x);
    backward(y);
    auto f = [&](const Tensor<double>& xv) { return loss_of(Var<double>(xv)).item(); };
    EXPECT_LT(max_relative_error(x.grad(), numeric_gradient(f, x0, 1e-4)), tol);
}

} // namespace

// --- dice ---

TEST(DiceLoss, IdenticalDisjointAndHalfOverlap) {
    const Tensor<double> t = filled({1, 1, 2, 4}, {1, 1, 1, 1, 0, 0, 0, 0});
    EXPECT_NEAR(dice_loss(Var<double>(t), t).item(), 0.0, 1e-5);

    const Tensor<double> disjoint = filled({1, 1, 2, 4}, {0, 0, 0, 0, 1, 1, 1, 1});
    EXPECT_NEAR(dice_loss(Var<double>(disjoint), t).item(), 1.0, 1e-6);

    // pred {0,1,4,5}, target {0,1,2,3}: overlap 2 of 4 + 4
    const Tensor<double> pred = filled({1, 1, 2, 4}, {1, 1, 0, 0, 1, 1, 0, 0});
    EXPECT_NEAR(dice_loss(Var<double>(pred), t).item(), 0.5, 1e-6);
}

TEST(DiceLoss, RejectsOutOfRangeInputs) {
    const Tensor<double> t = filled({1, 1, 1, 2}, {1, 0});
    EXPECT_THROW(dice_loss(Var<double>(filled({1, 1, 1, 2}, {1.5, 0})), t), Error);
    EXPECT_THROW(dice_loss(Var<double>(t), filled({1, 1, 1, 2}, {0.5, 0})), Error);
    EXPECT_THROW(dice_loss(Var<double>(Tensor<double>({1, 1, 2, 2})), t), ShapeError);
}

TEST(DiceBceLoss, ClosedForms) {
    Tensor<double> ones({1, 1, 4, 4}, 1.0);
    const double v = dice_bce_loss(Var<double>(Tensor<double>({1, 1, 4, 4}, 0.0)), ones).item();
    // BCE = ln 2; dice = 1 - 2*0.5/(0.5+1) = 1/3 (per pixel, sums scale equally)
    EXPECT_NEAR(v, std::log(2.0) + 1.0 / 3.0, 1e-6);
    EXPECT_NEAR(v, 1.0265, 1e-4);

    std::mt19937_64 rng(3);
    const Tensor<double> m = random_mask({2, 1, 4, 4}, rng);
    Tensor<double> saturated(m.shape());
    for (std::size_t i = 0; i < m.numel(); ++i) saturated[i] = m[i] > 0 ? 20.0 : -20.0;
    EXPECT_NEAR(dice_bce_loss(Var<double>(saturated), m).item(), 0.0, 1e-6);
}

TEST(DiceBceLoss, EqualsIndependentComponentSum) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor<double> z = random_tensor({2, 1, 4, 4}, rng, -4, 4);
        const Tensor<double> t = random_mask({2, 1, 4, 4}, rng);
        double inter = 0, sp = 0, st = 0, bce = 0;
        for (std::size_t i = 0; i < z.numel(); ++i) {
            const double p = sigmoid_d(z[i]);
            inter += p * t[i];
            sp += p;
            st += t[i];
            bce += -(t[i] * std::log(p) + (1 - t[i]) * std::log(1 - p));
        }
        const double expected = 1.0 - (2 * inter + 1e-6) / (sp + st + 1e-6) + bce / static_cast<double>(z.numel());
        EXPECT_NEAR(dice_bce_loss(Var<double>(z), t).item(), expected, 1e-6);
    }
}

// --- reconstruction / teacher total ---

TEST(ReconMse, ZeroOffsetAndNaiveOracle) {
    std::mt19937_64 rng(5);
    const Tensor<double> img = random_tensor({1, 3, 4, 4}, rng, 0, 1);
    EXPECT_EQ(recon_mse_loss(Var<double>(img), img).item(), 0.0);
    Tensor<double> shifted = img;
    for (auto& v : shifted.values()) v += 0.1;
    EXPECT_NEAR(recon_mse_loss(Var<double>(shifted), img).item(), 0.01, 1e-12);

    for (int trial = 0; trial < 20; ++trial) {
        const Tensor<double> a = random_tensor({2, 3, 5, 5}, rng), b = random_tensor({2, 3, 5, 5}, rng);
        std::vector<double> sq(a.numel());
        for (std::size_t i = 0; i < a.numel(); ++i) sq[i] = (a[i] - b[i]) * (a[i] - b[i]);
        const double mean = std::accumulate(sq.begin(), sq.end(), 0.0) / static_cast<double>(sq.size());
        EXPECT_NEAR(recon_mse_loss(Var<double>(a), b).item(), mean, 1e-7);
    }
}

TEST(TeacherTotal, Arithmetic) {
    EXPECT_NEAR(teacher_total_loss(0.3, 0.2, 0.5), 0.4, 1e-15);
    EXPECT_EQ(teacher_total_loss(0.3, 0.2, 0.0), 0.3);
    EXPECT_NEAR(teacher_total_loss(0.3, 0.2, 1.0), 0.5, 1e-15);
}

// --- InfoNCE ---

TEST(InfoNce, IdenticalEmbeddingsGiveLogB) {
    std::mt19937_64 rng(9);
    for (std::size_t b : {1u, 2u, 4u, 8u}) {
        const Tensor<double> row = unit_rows(1, 16, rng);
        Tensor<double> e({b, 16});
        for (std::size_t i = 0; i < b; ++i) std::copy(row.values().begin(), row.values().end(), e.values().begin() + i * 16);
        EXPECT_NEAR(info_nce_loss(Var<double>(e), Var<double>(e), 0.07).item(), std::log(static_cast<double>(b)), 1e-6) << b;
    }
}

TEST(InfoNce, OrthogonalThreeSampleCase) {
    Tensor<double> eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    EXPECT_NEAR(info_nce_loss(Var<double>(eye), Var<double>(eye), 1.0).item(), std::log(1.0 + 2.0 / std::exp(1.0)), 1e-9);
    EXPECT_NEAR(info_nce_loss(Var<double>(eye), Var<double>(eye), 1.0).item(), 0.5514, 1e-4);
}

TEST(InfoNce, PermutationEquivariantAndNonNegative) {
    std::mt19937_64 rng(21);
    const Tensor<double> a = unit_rows(6, 8, rng), p = unit_rows(6, 8, rng);
    const double base = info_nce_loss(Var<double>(a), Var<double>(p), 0.5).item();
    EXPECT_GE(base, 0.0);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Tensor<double> ap({6, 8}), pp({6, 8});
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            ap[i * 8 + j] = a[perm[i] * 8 + j];
            pp[i * 8 + j] = p[perm[i] * 8 + j];
        }
    EXPECT_NEAR(info_nce_loss(Var<double>(ap), Var<double>(pp), 0.5).item(), base, 1e-6);
}

TEST(InfoNce, RejectsUnnormalisedRowsAndBadTemperature) {
    Tensor<double> x({2, 2}, 1.0);
    EXPECT_THROW(info_nce_loss(Var<double>(x), Var<double>(x), 1.0), Error);
    std::mt19937_64 rng(1);
    const Tensor<double> u = unit_rows(2, 2, rng);
    EXPECT_THROW(info_nce_loss(Var<double>(u), Var<double>(u), 0.0), Error);
}

// --- PMD ---

TEST(Pmd, ClosedForms) {
    std::mt19937_64 rng(4);
    const Tensor<double> z = random_tensor({2, 1, 4, 4}, rng, -3, 3);
    for (double t : {0.5, 1.0, 4.0}) EXPECT_NEAR(pmd_loss(Var<double>(z), Var<double>(z), t).item(), 0.0, 1e-12);

    // student pair (1,0) is logit 1; teacher pair (0,1) is the pair (-1,0) up to a shift, logit -1
    const double v = pmd_loss(Var<double>(Tensor<double>({1}, 1.0)), Var<double>(Tensor<double>({1}, -1.0)), 1.0).item();
    EXPECT_NEAR(v, 0.4621, 1e-4);
    EXPECT_NEAR(v, pair_kl(1.0, -1.0, 1.0), 1e-12);
}

TEST(Pmd, ScalesAsTemperatureSquared) {
    std::mt19937_64 rng(6);
    const Tensor<double> s = random_tensor({2, 1, 4, 4}, rng, -2, 2), t = random_tensor({2, 1, 4, 4}, rng, -2, 2);
    Tensor<double> s2 = s, t2 = t;
    for (auto& v : s2.values()) v *= 2.0;
    for (auto& v : t2.values()) v *= 2.0;
    const double at_t = pmd_loss(Var<double>(s), Var<double>(t), 1.5).item();
    const double at_2t = pmd_loss(Var<double>(s2), Var<double>(t2), 3.0).item();
    EXPECT_NEAR(at_2t / at_t, 4.0, 1e-4);
}

TEST(Pmd, MatchesDirectPairKl) {
    std::mt19937_64 rng(8);
    const Tensor<double> s = random_tensor({2, 1, 3, 3}, rng, -5, 5), t = random_tensor({2, 1, 3, 3}, rng, -5, 5);
    double expected = 0;
    for (std::size_t i = 0; i < s.numel(); ++i) expected += pair_kl(s[i], t[i], 2.0);
    expected *= 4.0 / static_cast<double>(s.numel());
    EXPECT_NEAR(pmd_loss(Var<double>(s), Var<double>(t), 2.0).item(), expected, 1e-10);
}

// --- feature MSE ---

TEST(FeatureMse, ZeroConstantAndNaiveOracle) {
    Rng rng(2);
    ChannelAdapter<double> adapter(2, 3, 2, rng);
    // zero the 1x1 weights so the adapter output is its bias, and set that bias to the teacher
    for (auto& p : adapter.named_parameters()) {
        auto& v = p.var.mutable_value();
        std::fill(v.values().begin(), v.values().end(), p.name == "conv.bias" ? 0.25 : 0.0);
    }
    FeatureTaps<double> student, teacher;
    student.bottleneck = Var<double>(Tensor<double>({1, 2, 4, 4}, 1.0));
    teacher.bottleneck = Var<double>(Tensor<double>({1, 3, 2, 2}, 0.25));
    EXPECT_NEAR(feature_mse_loss(teacher, student, Scale::bottleneck, adapter).item(), 0.0, 1e-15);
    teacher.bottleneck = Var<double>(Tensor<double>({1, 3, 2, 2}, 0.25 + 0.3));
    EXPECT_NEAR(feature_mse_loss(teacher, student, Scale::bottleneck, adapter).item(), 0.09, 1e-12);

    std::mt19937_64 gen(12);
    ChannelAdapter<double> identity(3, 3, 1, rng);
    for (auto& p : identity.named_parameters()) {
        auto& v = p.var.mutable_value();
        std::fill(v.values().begin(), v.values().end(), 0.0);
        if (p.name == "conv.weight")
            for (std::size_t c = 0; c < 3; ++c) v[c * 3 + c] = 1.0;
    }
    const Tensor<double> a = random_tensor({2, 3, 3, 3}, gen), b = random_tensor({2, 3, 3, 3}, gen);
    student.bottleneck = Var<double>(a);
    teacher.bottleneck = Var<double>(b);
    double naive = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) naive += (a[i] - b[i]) * (a[i] - b[i]);
    EXPECT_NEAR(feature_mse_loss(teacher, student, Scale::bottleneck, identity).item(), naive / static_cast<double>(a.numel()), 1e-6);
}

TEST(FeatureMse, ShapeMismatchNamesTheScale) {
    Rng rng(2);
    ChannelAdapter<double> adapter(2, 4, 1, rng);
    FeatureTaps<double> student, teacher;
    student.encoder = Var<double>(Tensor<double>({1, 2, 4, 4}));
    teacher.encoder = Var<double>(Tensor<double>({1, 4, 2, 2}));
    try {
        feature_mse_loss(teacher, student, Scale::encoder, adapter);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("encoder"), std::string::npos);
    }
}

// --- total ---

TEST(StudentTotal, WeightedCombination) {
    LossWeights w;
    w.w_enc = w.w_dec = 0.0;
    w.w_bn = 0.1;
    w.pmd_enabled = true;
    LossBreakdown b;
    b.seg = 0.5;
    b.con_bn = 0.2;
    b.pmd = 0.1;
    EXPECT_NEAR(student_total_loss(b, w).total, 0.62, 1e-12);

    LossBreakdown zeros;
    zeros.con_bn = 0.0;
    zeros.pmd = 0.0;
    EXPECT_EQ(student_total_loss(zeros, w).total, 0.0);

    LossWeights none{0, 0, 0, 0, 0, false, 4.0, 0.07};
    LossBreakdown any{0.7, std::nullopt, 0.3, 0.2, 0.1, 0.9, 0.0};
    EXPECT_EQ(student_total_loss(any, none).total, 0.0);

    LossBreakdown missing;
    missing.seg = 0.5;
    EXPECT_THROW(student_total_loss(missing, w), Error);
}

TEST(StudentTotal, GraphFormMatchesNumericForm) {
    LossTerms<double> terms{Var<double>(Tensor<double>({1}, 0.5), true)};
    terms.con_bn = Var<double>(Tensor<double>({1}, 0.2), true);
    terms.pmd = Var<double>(Tensor<double>({1}, 0.1), true);
    LossWeights w;
    w.w_enc = w.w_dec = 0.0;
    w.pmd_enabled = true;
    auto [total, b] = student_total_loss(terms, w);
    EXPECT_NEAR(total.item(), 0.62, 1e-12);
    EXPECT_NEAR(b.total, 0.62, 1e-12);
    backward(total);
    EXPECT_NEAR(terms.con_bn->grad()[0], 0.1, 1e-15);
    EXPECT_NEAR(terms.pmd->grad()[0], 1.0, 1e-15);
}

// --- gradient checks on 2x1x8x8 inputs, h = 1e-4 ---

TEST(LossGradients, AllLossesMatchFiniteDifferences) {
    std::mt19937_64 rng(2024);
    const Shape s{2, 1, 8, 8};
    const Tensor<double> target = random_mask(s, rng);

    expect_gradient(random_tensor(s, rng, 0.05, 0.95), [&](const Var<double>& p) { return dice_loss(p, target); });
    expect_gradient(random_tensor(s, rng, -3, 3), [&](const Var<double>& z) { return dice_bce_loss(z, target); });
    const Tensor<double> image = random_tensor(s, rng, 0, 1);
    expect_gradient(random_tensor(s, rng, 0, 1), [&](const Var<double>& r) { return recon_mse_loss(r, image); });

    const Tensor<double> teacher_logits = random_tensor(s, rng, -3, 3);
    for (double t : {1.0, 4.0}) {
        expect_gradient(random_tensor(s, rng, -3, 3), [&](const Var<double>& z) { return pmd_loss(z, Var<double>(teacher_logits), t); });
    }

    // InfoNCE through a differentiable normalisation of the 2x64 flattened input
    const Tensor<double> positives = unit_rows(2, 64, rng);
    expect_gradient(random_tensor(s, rng), [&](const Var<double>& x) {
        return info_nce_loss(l2_normalize_rows(reshape(x, {2, 64})), Var<double>(positives), 0.5);
    });

    Rng init(3);
    ChannelAdapter<double> adapter(1, 2, 2, init);
    FeatureTaps<double> teacher;
    teacher.decoder = Var<double>(random_tensor({2, 2, 4, 4}, rng));
    expect_gradient(random_tensor(s, rng), [&](const Var<double>& x) {
        FeatureTaps<double> student;
        student.decoder = x;
        return feature_mse_loss(teacher, student, Scale::decoder, adapter);
    });
}

TEST(LossGradients, ContrastiveLossLeavesTeacherUntouched) {
    Rng init(5);
    Projector<double> ps(Scale::bottleneck, 2, 8, init), pt(Scale::bottleneck, 3, 8, init);
    std::mt19937_64 rng(6);
    FeatureTaps<double> student, teacher;
    student.bottleneck = Var<double>(random_tensor({4, 2, 2, 2}, rng), true);
    teacher.bottleneck = Var<double>(random_tensor({4, 3, 2, 2}, rng), true);
    backward(scale_contrastive_loss(teacher, student, pt, ps, Scale::bottleneck, 0.07));
    const auto& tg = teacher.bottleneck.grad();
    EXPECT_TRUE(tg.empty() || std::all_of(tg.values().begin(), tg.values().end(), [](double v) { return v == 0.0; }));
    const auto& sg = student.bottleneck.grad();
    ASSERT_FALSE(sg.empty());
    EXPECT_TRUE(std::any_of(sg.values().begin(), sg.values().end(), [](double v) { return v != 0.0; }));
    for (const auto& p : pt.named_parameters()) EXPECT_FALSE(p.var.grad().empty()) << p.name;

    // shared projector on identical taps: every similarity is 1, so the loss is ln B
    FeatureTaps<double> same;
    same.bottleneck = student.bottleneck;
    Tensor<double> rep({4, 2, 2, 2});
    for (std::size_t i = 0; i < 4; ++i)
        std::copy(student.bottleneck.value().values().begin(), student.bottleneck.value().values().begin() + 8, rep.values().begin() + i * 8);
    same.bottleneck = Var<double>(rep);
    EXPECT_NEAR(scale_contrastive_loss(same, same, ps, ps, Scale::bottleneck, 0.07).item(), std::log(4.0), 1e-6);

    FeatureTaps<double> single;
    single.bottleneck = Var<double>(random_tensor({1, 2, 2, 2}, rng));
    EXPECT_NEAR(scale_contrastive_loss(single, single, ps, ps, Scale::bottleneck, 0.07).item(), 0.0, 1e-12);
}
