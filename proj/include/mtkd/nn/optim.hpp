#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mtkd/core/autograd.hpp"

namespace mtkd::nn {

enum class OptimizerKind { adamw, rmsprop };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "rmsprop"; }

/// Optimiser hyper-parameters. `alpha` is the RMSProp smoothing constant; beta1/beta2 are Adam's.
struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::rmsprop;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double alpha = 0.99;
    double momentum = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static OptimizerConfig adamw(double lr = 1e-4, double weight_decay = 0.01) {
        OptimizerConfig c;
        c.kind = OptimizerKind::adamw;
        c.lr = lr;
        c.weight_decay = weight_decay;
        return c;
    }
    static OptimizerConfig rmsprop(double lr = 1e-3) {
        OptimizerConfig c;
        c.kind = OptimizerKind::rmsprop;
        c.lr = lr;
        return c;
    }
    bool operator==(const OptimizerConfig&) const = default;
};

/// Update rules follow torch.optim.AdamW / torch.optim.RMSprop. Parameters whose
/// requires_grad flag is off (frozen) are skipped.
template <typename T>
class Optimizer {
public:
    Optimizer(std::vector<Var<T>> params, OptimizerConfig config)
        : params_(std::move(params)), config_(config), first_(params_.size()), second_(params_.size()) {}

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++step_;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Var<T>& p = params_[i];
            if (!p.requires_grad() || p.grad().empty()) continue;
            Tensor<T>& w = p.mutable_value();
            const Tensor<T>& g = p.grad();
            if (second_[i].empty()) {
                second_[i] = Tensor<T>(w.shape());
                first_[i] = Tensor<T>(w.shape());
            }
            if (config_.kind == OptimizerKind::adamw) {
                adamw_update(w, g, first_[i], second_[i]);
            } else {
                rmsprop_update(w, g, first_[i], second_[i]);
            }
        }
    }

    const OptimizerConfig& config() const noexcept { return config_; }
    std::size_t steps() const noexcept { return step_; }

private:
    void adamw_update(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v) const {
        const double lr = config_.lr;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
        const T decay = static_cast<T>(1.0 - lr * config_.weight_decay);
        const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
        const T step_size = static_cast<T>(lr / bc1);
        const T sqrt_bc2 = static_cast<T>(std::sqrt(bc2));
        const T eps = static_cast<T>(config_.eps);
        for (std::size_t j = 0; j < w.numel(); ++j) {
            w[j] *= decay;
            m[j] = b1 * m[j] + (T{1} - b1) * g[j];
            v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
            w[j] -= step_size * m[j] / (std::sqrt(v[j]) / sqrt_bc2 + eps);
        }
    }

    void rmsprop_update(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& buf, Tensor<T>& sq) const {
        const T lr = static_cast<T>(config_.lr), alpha = static_cast<T>(config_.alpha);
        const T eps = static_cast<T>(config_.eps), wd = static_cast<T>(config_.weight_decay);
        const T mom = static_cast<T>(config_.momentum);
        for (std::size_t j = 0; j < w.numel(); ++j) {
            const T grad = g[j] + wd * w[j];
            sq[j] = alpha * sq[j] + (T{1} - alpha) * grad * grad;
            const T update = grad / (std::sqrt(sq[j]) + eps);
            if (mom > T{0}) {
                buf[j] = mom * buf[j] + update;
                w[j] -= lr * buf[j];
            } else {
                w[j] -= lr * update;
            }
        }
    }

    std::vector<Var<T>> params_;
    OptimizerConfig config_;
    std::vector<Tensor<T>> first_, second_;
    std::size_t step_ = 0;
};

} // namespace mtkd::nn
