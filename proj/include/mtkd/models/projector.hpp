#pragma once

#include <memory>

#include "mtkd/models/config.hpp"
#include "mtkd/nn/module.hpp"

namespace mtkd {

/// Maps a feature map to a unit-norm embedding:
/// global average pool -> linear(2*embed) -> ReLU -> linear(embed) -> L2 normalise.
template <typename T>
class Projector : public nn::Module<T> {
public:
    Projector(Scale scale, std::size_t in_channels, std::size_t embed_dim, Rng& rng)
        : scale_(scale), in_channels_(in_channels), embed_dim_(embed_dim) {
        fc1_ = &this->register_module("fc1", std::make_unique<nn::Linear<T>>(in_channels, 2 * embed_dim, rng));
        fc2_ = &this->register_module("fc2", std::make_unique<nn::Linear<T>>(2 * embed_dim, embed_dim, rng));
    }

    Scale scale() const noexcept { return scale_; }
    std::size_t in_channels() const noexcept { return in_channels_; }
    std::size_t embed_dim() const noexcept { return embed_dim_; }

    /// N x C x H x W tap -> N x embed_dim rows of unit length.
    Var<T> operator()(const Var<T>& tap) const {
        require_rank(tap.shape(), 4, "projector input");
        if (tap.shape()[1] != in_channels_) {
            throw ShapeError(to_string(scale_) + " projector expects " + std::to_string(in_channels_) +
                             " channels, tap has " + std::to_string(tap.shape()[1]));
        }
        return l2_normalize_rows((*fc2_)(relu((*fc1_)(global_avg_pool(tap)))), T(1e-12));
    }

private:
    Scale scale_;
    std::size_t in_channels_, embed_dim_;
    nn::Linear<T>* fc1_;
    nn::Linear<T>* fc2_;
};

/// Brings a student tap to the teacher tap's geometry for feature-MSE distillation:
/// integer-factor average pooling to the teacher resolution, then a learnable 1x1 convolution
/// to the teacher channel count.
template <typename T>
class ChannelAdapter : public nn::Module<T> {
public:
    ChannelAdapter(std::size_t student_channels, std::size_t teacher_channels, std::size_t pool_factor, Rng& rng)
        : pool_factor_(pool_factor) {
        conv_ = &this->register_module("conv", std::make_unique<nn::Conv2d<T>>(student_channels, teacher_channels, 1, rng));
    }

    Var<T> operator()(const Var<T>& student_tap) const { return (*conv_)(avg_pool(student_tap, pool_factor_)); }

    std::size_t pool_factor() const noexcept { return pool_factor_; }

private:
    std::size_t pool_factor_;
    nn::Conv2d<T>* conv_;
};

} // namespace mtkd
