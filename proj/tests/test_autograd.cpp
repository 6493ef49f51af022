#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "mtkd/nn/module.hpp"

using namespace mtkd;
using mtkd::testing::max_relative_error;
using mtkd::testing::numeric_gradient;
using mtkd::testing::random_tensor;

namespace {

// Scalar probe: sum(output * fixed random weights), so every output element matters.
double probe(const Tensor<double>& out, const Tensor<double>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * w[i];
    return s;
}

template <typename F>
void check_unary(const Tensor<double>& x0, F op, double tol = 1e-6) {
    std::mt19937_64 rng(7);
    const Tensor<double> probe_w = random_tensor(op(Var<double>(x0)).shape(), rng);
    Var<double> x(x0, true);
    Var<double> y = op(x);
    backward(y, &probe_w);
    auto f = [&](const Tensor<double>& xv) { return probe(op(Var<double>(xv)).value(), probe_w); };
    EXPECT_LT(max_relative_error(x.grad(), numeric_gradient(f, x0, 1e-5)), tol);
}

} // namespace

TEST(Autograd, Conv2dGradients) {
    std::mt19937_64 rng(1);
    const auto w0 = random_tensor({4, 3, 3, 3}, rng);
    const auto b0 = random_tensor({4}, rng);
    const auto x0 = random_tensor({2, 3, 5, 6}, rng);
    check_unary(x0, [&](const Var<double>& x) { return conv2d(x, Var<double>(w0), Var<double>(b0), 1); });
    check_unary(w0, [&](const Var<double>& w) { return conv2d(Var<double>(x0), w, Var<double>(b0), 1); });
    check_unary(b0, [&](const Var<double>& b) { return conv2d(Var<double>(x0), Var<double>(w0), b, 1); });
}

TEST(Autograd, PointwiseConvGradients) {
    std::mt19937_64 rng(2);
    const auto w0 = random_tensor({2, 3, 1, 1}, rng);
    const auto b0 = random_tensor({2}, rng);
    const auto x0 = random_tensor({2, 3, 4, 4}, rng);
    check_unary(x0, [&](const Var<double>& x) { return conv2d(x, Var<double>(w0), Var<double>(b0), 0); });
    check_unary(w0, [&](const Var<double>& w) { return conv2d(Var<double>(x0), w, Var<double>(b0), 0); });
}

TEST(Autograd, TransposedConvGradients) {
    std::mt19937_64 rng(3);
    const auto w0 = random_tensor({3, 2, 2, 2}, rng);
    const auto b0 = random_tensor({2}, rng);
    const auto x0 = random_tensor({2, 3, 3, 4}, rng);
    check_unary(x0, [&](const Var<double>& x) { return conv_transpose2x2(x, Var<double>(w0), Var<double>(b0)); });
    check_unary(w0, [&](const Var<double>& w) { return conv_transpose2x2(Var<double>(x0), w, Var<double>(b0)); });
    check_unary(b0, [&](const Var<double>& b) { return conv_transpose2x2(Var<double>(x0), Var<double>(w0), b); });
}

TEST(Autograd, BatchNormTrainingAndEvalGradients) {
    std::mt19937_64 rng(4);
    const auto x0 = random_tensor({3, 2, 3, 3}, rng);
    const auto g0 = random_tensor({2}, rng, 0.5, 1.5);
    const auto b0 = random_tensor({2}, rng);
    for (bool training : {true, false}) {
        auto op = [&](const Var<double>& x) {
            Tensor<double> rm({2}, 0.1), rv({2}, 2.0);
            return batch_norm(x, Var<double>(g0), Var<double>(b0), rm, rv, training);
        };
        check_unary(x0, op);
        check_unary(g0, [&](const Var<double>& g) {
            Tensor<double> rm({2}), rv({2}, 1.0);
            return batch_norm(Var<double>(x0), g, Var<double>(b0), rm, rv, training);
        });
    }
}

TEST(Autograd, PoolingActivationsAndDenseOps) {
    std::mt19937_64 rng(5);
    const auto x0 = random_tensor({2, 3, 4, 4}, rng);
    check_unary(x0, [](const Var<double>& x) { return max_pool2(x); });
    check_unary(x0, [](const Var<double>& x) { return avg_pool(x, 2); });
    check_unary(x0, [](const Var<double>& x) { return relu(x); });
    check_unary(x0, [](const Var<double>& x) { return sigmoid(x); });
    check_unary(x0, [](const Var<double>& x) { return global_avg_pool(x); });
    check_unary(x0, [&](const Var<double>& x) { return concat_channels(x, Var<double>(x0)); });
    const auto m0 = random_tensor({3, 5}, rng);
    check_unary(m0, [](const Var<double>& x) { return l2_normalize_rows(x); });
    const auto w0 = random_tensor({4, 5}, rng);
    const auto b0 = random_tensor({4}, rng);
    check_unary(m0, [&](const Var<double>& x) { return linear(x, Var<double>(w0), Var<double>(b0)); });
    check_unary(w0, [&](const Var<double>& w) { return linear(Var<double>(m0), w, Var<double>(b0)); });
}

TEST(Autograd, SharedSubexpressionAccumulates) {
    Var<double> x(Tensor<double>({1}, 3.0), true);
    Var<double> y = add(x, x);
    Var<double> z = weighted_sum<double>({y, x}, {2.0, 1.0});
    backward(z);
    EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
    Var<double> x(Tensor<double>({2}, 1.0), true);
    {
        NoGradGuard guard;
        Var<double> y = relu(x);
        EXPECT_FALSE(y.requires_grad());
    }
    EXPECT_TRUE(relu(x).requires_grad());
}

TEST(Autograd, ZeroNormRowStaysFinite) {
    Var<double> x(Tensor<double>({2, 3}, 0.0), true);
    Var<double> y = l2_normalize_rows(x);
    for (double v : y.value().values()) EXPECT_TRUE(std::isfinite(v));
}
