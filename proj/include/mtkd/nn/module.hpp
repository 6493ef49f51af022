#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mtkd/core/conv.hpp"
#include "mtkd/core/random.hpp"

namespace mtkd::nn {

template <typename T>
struct NamedVar {
    std::string name;
    Var<T> var;
};

/// Owner of named parameters, buffers and child modules. Modules are neither copyable nor
/// movable; hold them through unique_ptr.
template <typename T>
class Module {
public:
    Module() = default;
    virtual ~Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    /// Trainable tensors in registration order, names joined with '.'.
    std::vector<NamedVar<T>> named_parameters() const {
        std::vector<NamedVar<T>> out;
        collect(out, "", /*buffers=*/false);
        return out;
    }

    /// Non-trainable state (batch-norm running statistics).
    std::vector<NamedVar<T>> named_buffers() const {
        std::vector<NamedVar<T>> out;
        collect(out, "", /*buffers=*/true);
        return out;
    }

    /// Parameters followed by buffers: everything a checkpoint stores.
    std::vector<NamedVar<T>> state() const {
        auto out = named_parameters();
        auto bufs = named_buffers();
        out.insert(out.end(), bufs.begin(), bufs.end());
        return out;
    }

    std::vector<Var<T>> parameters() const {
        std::vector<Var<T>> out;
        for (auto& p : named_parameters()) out.push_back(p.var);
        return out;
    }

    void set_training(bool training) {
        training_ = training;
        for (auto& [name, child] : children_) child->set_training(training);
    }
    bool training() const noexcept { return training_; }

    void zero_grad() {
        for (auto& p : named_parameters()) p.var.zero_grad();
    }

protected:
    Var<T> register_parameter(std::string name, Tensor<T> value) {
        params_.push_back({std::move(name), Var<T>(std::move(value), true)});
        return params_.back().var;
    }

    Var<T> register_buffer(std::string name, Tensor<T> value) {
        buffers_.push_back({std::move(name), Var<T>(std::move(value), false)});
        return buffers_.back().var;
    }

    template <typename M>
    M& register_module(std::string name, std::unique_ptr<M> module) {
        M& ref = *module;
        children_.emplace_back(std::move(name), std::move(module));
        return ref;
    }

private:
    void collect(std::vector<NamedVar<T>>& out, const std::string& prefix, bool buffers) const {
        for (const auto& nv : buffers ? buffers_ : params_) out.push_back({prefix + nv.name, nv.var});
        for (const auto& [name, child] : children_) child->collect(out, prefix + name + ".", buffers);
    }

    std::vector<NamedVar<T>> params_;
    std::vector<NamedVar<T>> buffers_;
    std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
    bool training_ = true;
};

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

/// k x k convolution, He-normal weights, zero bias.
template <typename T>
class Conv2d : public Module<T> {
public:
    Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng)
        : pad_(kernel / 2) {
        const double fan_in = static_cast<double>(in * kernel * kernel);
        weight_ = this->register_parameter("weight", normal_tensor<T>({out, in, kernel, kernel}, std::sqrt(2.0 / fan_in), rng));
        bias_ = this->register_parameter("bias", Tensor<T>({out}));
    }
    Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight_, bias_, pad_); }
    std::size_t in_channels() const { return weight_.shape()[1]; }
    std::size_t out_channels() const { return weight_.shape()[0]; }

private:
    std::size_t pad_;
    Var<T> weight_, bias_;
};

/// 2x2 stride-2 up-convolution.
template <typename T>
class UpConv2x2 : public Module<T> {
public:
    UpConv2x2(std::size_t in, std::size_t out, Rng& rng) {
        weight_ = this->register_parameter("weight", normal_tensor<T>({in, out, 2, 2}, std::sqrt(1.0 / static_cast<double>(in)), rng));
        bias_ = this->register_parameter("bias", Tensor<T>({out}));
    }
    Var<T> operator()(const Var<T>& x) const { return conv_transpose2x2(x, weight_, bias_); }

private:
    Var<T> weight_, bias_;
};

template <typename T>
class BatchNorm2d : public Module<T> {
public:
    explicit BatchNorm2d(std::size_t channels) {
        gamma_ = this->register_parameter("weight", Tensor<T>({channels}, T{1}));
        beta_ = this->register_parameter("bias", Tensor<T>({channels}));
        mean_ = this->register_buffer("running_mean", Tensor<T>({channels}));
        var_ = this->register_buffer("running_var", Tensor<T>({channels}, T{1}));
    }
    Var<T> operator()(const Var<T>& x) {
        return batch_norm(x, gamma_, beta_, mean_.mutable_value(), var_.mutable_value(), this->training());
    }

private:
    Var<T> gamma_, beta_, mean_, var_;
};

/// Fully connected layer with PyTorch-style uniform(+-1/sqrt(in)) initialisation.
template <typename T>
class Linear : public Module<T> {
public:
    Linear(std::size_t in, std::size_t out, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight_ = this->register_parameter("weight", uniform_tensor<T>({out, in}, bound, rng));
        bias_ = this->register_parameter("bias", uniform_tensor<T>({out}, bound, rng));
    }
    Var<T> operator()(const Var<T>& x) const { return linear(x, weight_, bias_); }

private:
    Var<T> weight_, bias_;
};

/// conv3x3 -> batch norm -> ReLU, repeated `convs` times.
template <typename T>
class ConvBlock : public Module<T> {
public:
    ConvBlock(std::size_t in, std::size_t out, std::size_t convs, Rng& rng) {
        for (std::size_t i = 0; i < convs; ++i) {
            const std::string id = std::to_string(i + 1);
            convs_.push_back(&this->register_module("conv" + id, std::make_unique<Conv2d<T>>(i == 0 ? in : out, out, 3, rng)));
            norms_.push_back(&this->register_module("bn" + id, std::make_unique<BatchNorm2d<T>>(out)));
        }
    }
    Var<T> operator()(Var<T> x) {
        for (std::size_t i = 0; i < convs_.size(); ++i) x = relu((*norms_[i])((*convs_[i])(x)));
        return x;
    }

private:
    std::vector<Conv2d<T>*> convs_;
    std::vector<BatchNorm2d<T>*> norms_;
};

template <typename T>
std::size_t count_parameters(const Module<T>& module) {
    std::size_t total = 0;
    for (const auto& p : module.named_parameters()) total += p.var.value().numel();
    return total;
}

/// Checksum over parameters and buffers.
template <typename T>
std::uint64_t state_checksum(const Module<T>& module) {
    Checksum<T> sum;
    for (const auto& nv : module.state()) sum.add(nv.var.value());
    return sum.value();
}

} // namespace mtkd::nn
