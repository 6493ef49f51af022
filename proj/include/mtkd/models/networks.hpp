#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mtkd/models/config.hpp"
#include "mtkd/nn/module.hpp"

namespace mtkd {

/// Activations tapped from one forward pass at the three comparison scales.
template <typename T>
struct FeatureTaps {
    Var<T> encoder;
    Var<T> bottleneck;
    Var<T> decoder;

    const Var<T>& at(Scale scale) const {
        const Var<T>& v = scale == Scale::encoder ? encoder : scale == Scale::bottleneck ? bottleneck : decoder;
        if (!v.defined()) throw Error("no feature tap recorded for scale " + to_string(scale));
        return v;
    }
};

template <typename T>
struct ForwardOutput {
    Var<T> seg_logits;            // N x 1 x H x W, pre-sigmoid
    std::optional<Var<T>> recon;  // N x 3 x H x W, teacher only
    FeatureTaps<T> taps;
};

/// Common surface of the teacher and student networks.
template <typename T>
class SegmentationModel : public nn::Module<T> {
public:
    explicit SegmentationModel(ModelConfig config) : config_(config) {}

    const ModelConfig& config() const noexcept { return config_; }

    /// Spatial reduction between the input and the bottleneck.
    virtual std::size_t downsampling() const = 0;
    virtual std::size_t tap_channels(Scale scale) const = 0;
    /// Input-size divisor of the tap at `scale` (1 = full resolution).
    virtual std::size_t tap_stride(Scale scale) const = 0;

    /// Forward pass on an N x 3 x H x W batch. Frozen models always run in
    /// evaluation mode without recording a graph.
    ForwardOutput<T> forward(const Var<T>& x) {
        check_input(x.shape());
        if (frozen_) {
            NoGradGuard guard;
            return forward_impl(x);
        }
        return forward_impl(x);
    }

    void check_input(const Shape& s) const {
        if (s.size() != 4) throw ShapeError("model input must be N x C x H x W, got " + to_string(s));
        if (s[1] != static_cast<std::size_t>(config_.in_channels)) {
            throw ShapeError("model input dimension 1 (channels) is " + std::to_string(s[1]) + ", expected " +
                             std::to_string(config_.in_channels));
        }
        check_image_size(s[2], s[3]);
    }

    void check_image_size(std::size_t h, std::size_t w) const {
        const std::size_t f = downsampling();
        if (h == 0 || h % f) {
            throw ShapeError("image dimension H=" + std::to_string(h) + " is not divisible by " + std::to_string(f) +
                             " required by " + to_string(config_.role));
        }
        if (w == 0 || w % f) {
            throw ShapeError("image dimension W=" + std::to_string(w) + " is not divisible by " + std::to_string(f) +
                             " required by " + to_string(config_.role));
        }
    }

    /// Stops all parameter updates and switches to evaluation mode. Idempotent.
    void freeze() {
        for (auto& p : this->named_parameters()) p.var.set_requires_grad(false);
        this->set_training(false);
        frozen_ = true;
    }
    bool frozen() const noexcept { return frozen_; }

protected:
    virtual ForwardOutput<T> forward_impl(const Var<T>& x) = 0;

private:
    ModelConfig config_;
    bool frozen_ = false;
};

/// One U-Net decoder path: (up-conv, concat skip, conv block) per level, then a 1x1 head.
template <typename T>
class UNetDecoder : public nn::Module<T> {
public:
    UNetDecoder(std::size_t levels, std::size_t base, std::size_t out_channels, Rng& rng) {
        for (std::size_t k = 0; k < levels; ++k) {
            const std::size_t i = levels - 1 - k;
            const std::size_t ch = base << i;
            ups_.push_back(&this->register_module("up" + std::to_string(i), std::make_unique<nn::UpConv2x2<T>>(2 * ch, ch, rng)));
            blocks_.push_back(&this->register_module("dec" + std::to_string(i), std::make_unique<nn::ConvBlock<T>>(2 * ch, ch, 2, rng)));
        }
        head_ = &this->register_module("head", std::make_unique<nn::Conv2d<T>>(base, out_channels, 1, rng));
    }

    /// Returns (last decoder activation, head output). `skips` is ordered shallow to deep.
    std::pair<Var<T>, Var<T>> operator()(Var<T> x, const std::vector<Var<T>>& skips) {
        for (std::size_t k = 0; k < ups_.size(); ++k) {
            x = (*ups_[k])(x);
            x = (*blocks_[k])(concat_channels(skips[skips.size() - 1 - k], x));
        }
        return {x, (*head_)(x)};
    }

private:
    std::vector<nn::UpConv2x2<T>*> ups_;
    std::vector<nn::ConvBlock<T>*> blocks_;
    nn::Conv2d<T>* head_;
};

/// Skip-connected U-Net with two 3x3 convolutions per block. With a reconstruction head it is
/// the multi-task teacher (shared encoder, segmentation and reconstruction decoders).
template <typename T>
class UNet : public SegmentationModel<T> {
public:
    UNet(ModelConfig config, std::size_t levels, Rng& rng) : SegmentationModel<T>(config), levels_(levels) {
        const std::size_t base = static_cast<std::size_t>(config.base_channels);
        std::size_t in = static_cast<std::size_t>(config.in_channels);
        for (std::size_t i = 0; i < levels; ++i) {
            encoders_.push_back(&this->register_module("enc" + std::to_string(i), std::make_unique<nn::ConvBlock<T>>(in, base << i, 2, rng)));
            in = base << i;
        }
        bottleneck_ = &this->register_module("bottleneck", std::make_unique<nn::ConvBlock<T>>(in, base << levels, 2, rng));
        seg_ = &this->register_module("seg", std::make_unique<UNetDecoder<T>>(levels, base, config.out_channels, rng));
        if (config.with_recon_head) {
            recon_ = &this->register_module("recon", std::make_unique<UNetDecoder<T>>(levels, base, config.in_channels, rng));
        }
    }

    std::size_t downsampling() const override { return std::size_t{1} << levels_; }
    std::size_t tap_channels(Scale s) const override {
        const std::size_t base = static_cast<std::size_t>(this->config().base_channels);
        return s == Scale::encoder ? base << (levels_ - 1) : s == Scale::bottleneck ? base << levels_ : base;
    }
    std::size_t tap_stride(Scale s) const override {
        return s == Scale::encoder ? std::size_t{1} << (levels_ - 1) : s == Scale::bottleneck ? downsampling() : 1;
    }

protected:
    ForwardOutput<T> forward_impl(const Var<T>& input) override {
        std::vector<Var<T>> skips;
        Var<T> x = input;
        for (auto* enc : encoders_) {
            x = (*enc)(x);
            skips.push_back(x);
            x = max_pool2(x);
        }
        ForwardOutput<T> out;
        out.taps.encoder = skips.back();
        x = (*bottleneck_)(x);
        out.taps.bottleneck = x;
        auto [dec, logits] = (*seg_)(x, skips);
        out.taps.decoder = dec;
        out.seg_logits = logits;
        if (recon_) out.recon = (*recon_)(x, skips).second;
        return out;
    }

private:
    std::size_t levels_;
    std::vector<nn::ConvBlock<T>*> encoders_;
    nn::ConvBlock<T>* bottleneck_ = nullptr;
    UNetDecoder<T>* seg_ = nullptr;
    UNetDecoder<T>* recon_ = nullptr;
};

/// Compact student without skip connections. With base b: E1 3->b (H), E2 b->2b (H/2),
/// bottleneck 2b->4b (H/4), up 4b->4b, D1 4b->2b (H/2), up 2b->b, D2 b->b (H), 1x1 classifier.
/// Each block is one 3x3 convolution, batch norm and ReLU.
template <typename T>
class CompactUNet : public SegmentationModel<T> {
public:
    CompactUNet(ModelConfig config, Rng& rng) : SegmentationModel<T>(config) {
        const std::size_t b = static_cast<std::size_t>(config.base_channels);
        const std::size_t in = static_cast<std::size_t>(config.in_channels);
        e1_ = &this->register_module("enc1", std::make_unique<nn::ConvBlock<T>>(in, b, 1, rng));
        e2_ = &this->register_module("enc2", std::make_unique<nn::ConvBlock<T>>(b, 2 * b, 1, rng));
        bn_ = &this->register_module("bottleneck", std::make_unique<nn::ConvBlock<T>>(2 * b, 4 * b, 1, rng));
        up1_ = &this->register_module("up1", std::make_unique<nn::UpConv2x2<T>>(4 * b, 4 * b, rng));
        d1_ = &this->register_module("dec1", std::make_unique<nn::ConvBlock<T>>(4 * b, 2 * b, 1, rng));
        up2_ = &this->register_module("up2", std::make_unique<nn::UpConv2x2<T>>(2 * b, b, rng));
        d2_ = &this->register_module("dec2", std::make_unique<nn::ConvBlock<T>>(b, b, 1, rng));
        head_ = &this->register_module("head", std::make_unique<nn::Conv2d<T>>(b, static_cast<std::size_t>(config.out_channels), 1, rng));
    }

    std::size_t downsampling() const override { return 4; }
    std::size_t tap_channels(Scale s) const override {
        const std::size_t b = static_cast<std::size_t>(this->config().base_channels);
        return s == Scale::encoder ? 2 * b : s == Scale::bottleneck ? 4 * b : b;
    }
    std::size_t tap_stride(Scale s) const override { return s == Scale::encoder ? 2 : s == Scale::bottleneck ? 4 : 1; }

protected:
    ForwardOutput<T> forward_impl(const Var<T>& x) override {
        ForwardOutput<T> out;
        Var<T> h = max_pool2((*e1_)(x));
        h = (*e2_)(h);
        out.taps.encoder = h;
        h = (*bn_)(max_pool2(h));
        out.taps.bottleneck = h;
        h = (*d1_)((*up1_)(h));
        h = (*d2_)((*up2_)(h));
        out.taps.decoder = h;
        out.seg_logits = (*head_)(h);
        return out;
    }

private:
    nn::ConvBlock<T>*e1_, *e2_, *bn_, *d1_, *d2_;
    nn::UpConv2x2<T>*up1_, *up2_;
    nn::Conv2d<T>* head_;
};

/// Builds the network for `config` with weights drawn from `seed`. When `image_size` is given,
/// it is checked against the network's downsampling ladder.
template <typename T>
std::unique_ptr<SegmentationModel<T>> build_model(const ModelConfig& config, std::uint64_t seed,
                                                   std::optional<std::array<std::size_t, 2>> image_size = std::nullopt) {
    config.validate();
    if (config.is_teacher() && !config.with_recon_head) {
        throw Error("teacher_mt_unet requires the reconstruction head");
    }
    Rng rng(derive_seed(seed, stream::model_init));
    std::unique_ptr<SegmentationModel<T>> model;
    switch (config.role) {
    case ModelRole::teacher_mt_unet: model = std::make_unique<UNet<T>>(config, 4, rng); break;
    case ModelRole::student_s2: model = std::make_unique<UNet<T>>(config, 2, rng); break;
    case ModelRole::student_s1: model = std::make_unique<CompactUNet<T>>(config, rng); break;
    }
    if (image_size) model->check_image_size((*image_size)[0], (*image_size)[1]);
    return model;
}

template <typename T>
std::size_t count_parameters(const SegmentationModel<T>& model) {
    return nn::count_parameters<T>(model);
}

} // namespace mtkd
