#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mtkd/core/autograd.hpp"

namespace mtkd::testing {

/// Central finite differences of a scalar function with respect to one input tensor.
inline Tensor<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                                       double h = 1e-4) {
    Tensor<double> grad(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double plus = f(x);
        x[i] = saved - h;
        const double minus = f(x);
        x[i] = saved;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    return grad;
}

/// max_i |a_i - b_i| / max(|a|_inf, |b|_inf, floor)
inline double max_relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric, double floor = 1e-8) {
    double diff = 0.0, scale = floor;
    for (std::size_t i = 0; i < analytic.numel(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    return diff / scale;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

inline Tensor<double> random_mask(Shape shape, std::mt19937_64& rng) {
    Tensor<double> t(std::move(shape));
    std::bernoulli_distribution dist(0.5);
    for (auto& v : t.values()) v = dist(rng) ? 1.0 : 0.0;
    return t;
}

} // namespace mtkd::testing
