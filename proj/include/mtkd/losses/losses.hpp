#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mtkd/core/ops.hpp"
#include "mtkd/models/networks.hpp"
#include "mtkd/models/projector.hpp"

namespace mtkd {

/// Weights of the composite objectives. Teacher training uses w_seg and lambda_rec; distillation
/// uses w_seg, the per-scale weights and PMD (which enters unweighted when enabled).
struct LossWeights {
    double w_seg = 1.0;
    double w_enc = 0.1;
    double w_bn = 0.1;
    double w_dec = 0.1;
    double lambda_rec = 0.0;
    bool pmd_enabled = false;
    double pmd_temperature = 4.0;
    double contrastive_temperature = 0.07;

    double scale_weight(Scale s) const { return s == Scale::encoder ? w_enc : s == Scale::bottleneck ? w_bn : w_dec; }

    void validate() const {
        for (double w : {w_seg, w_enc, w_bn, w_dec, lambda_rec}) {
            if (!std::isfinite(w) || w < 0.0) throw Error("loss weights must be finite and non-negative");
        }
        if (!(pmd_temperature > 0.0) || !std::isfinite(pmd_temperature)) throw Error("PMD temperature must be > 0");
        if (!(contrastive_temperature > 0.0) || !std::isfinite(contrastive_temperature)) {
            throw Error("contrastive temperature must be > 0");
        }
    }
    bool operator==(const LossWeights&) const = default;
};

/// Per-component loss values of one step (or their means over an epoch).
struct LossBreakdown {
    double seg = 0.0;
    std::optional<double> recon;
    std::optional<double> con_enc;
    std::optional<double> con_bn;
    std::optional<double> con_dec;
    std::optional<double> pmd;
    double total = 0.0;

    std::optional<double>& scale(Scale s) { return s == Scale::encoder ? con_enc : s == Scale::bottleneck ? con_bn : con_dec; }
    const std::optional<double>& scale(Scale s) const {
        return s == Scale::encoder ? con_enc : s == Scale::bottleneck ? con_bn : con_dec;
    }
};

/// Weighted recombination of the present components; absent components contribute 0.
inline double weighted_total(const LossBreakdown& b, const LossWeights& w) {
    double total = w.w_seg * b.seg;
    if (b.recon) total += w.lambda_rec * *b.recon;
    if (b.con_enc) total += w.w_enc * *b.con_enc;
    if (b.con_bn) total += w.w_bn * *b.con_bn;
    if (b.con_dec) total += w.w_dec * *b.con_dec;
    if (b.pmd && w.pmd_enabled) total += *b.pmd;
    return total;
}

namespace detail {

template <typename T>
inline T softplus(T x) {
    return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
void require_unit_interval(const Tensor<T>& t, const char* what) {
    for (const T& v : t.values()) {
        if (!(v >= T{0} && v <= T{1})) throw Error(std::string(what) + ": values must lie in [0, 1]");
    }
}

template <typename T>
void require_binary(const Tensor<T>& t, const char* what) {
    for (const T& v : t.values()) {
        if (v != T{0} && v != T{1}) throw Error(std::string(what) + ": target must be binary");
    }
}

template <typename T>
struct DiceTerms {
    T numerator;
    T denominator;
};

template <typename T>
DiceTerms<T> dice_terms(const Tensor<T>& probs, const Tensor<T>& target, T eps) {
    T inter{0}, sp{0}, st{0};
    for (std::size_t i = 0; i < probs.numel(); ++i) {
        inter += probs[i] * target[i];
        sp += probs[i];
        st += target[i];
    }
    return {T{2} * inter + eps, sp + st + eps};
}

} // namespace detail

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), summed over the whole batch.
template <typename T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& target, T eps = T(1e-6)) {
    require_same_shape(probs.shape(), target.shape(), "dice_loss");
    detail::require_unit_interval(probs.value(), "dice_loss probabilities");
    detail::require_binary(target, "dice_loss");
    const auto [num, den] = detail::dice_terms(probs.value(), target, eps);
    Tensor<T> out({1}, T{1} - num / den);
    return record<T>(std::move(out), {probs}, [target, num, den](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            const T scale = self.grad[0] / (den * den);
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= scale * (T{2} * target[i] * den - num);
        }
    });
}

/// dice_loss(sigmoid(logits)) + mean binary cross-entropy, both with weight 1.
template <typename T>
Var<T> dice_bce_loss(const Var<T>& logits, const Tensor<T>& target, T eps = T(1e-6)) {
    require_same_shape(logits.shape(), target.shape(), "dice_bce_loss");
    detail::require_binary(target, "dice_bce_loss");
    Tensor<T> probs(logits.shape());
    T bce{0};
    for (std::size_t i = 0; i < probs.numel(); ++i) {
        const T z = logits.value()[i];
        probs[i] = sigmoid_scalar(z);
        bce += std::max(z, T{0}) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
    }
    const T m = static_cast<T>(probs.numel());
    const auto [num, den] = detail::dice_terms(probs, target, eps);
    Tensor<T> out({1}, T{1} - num / den + bce / m);
    return record<T>(std::move(out), {logits}, [target, probs, num, den, m](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            const T up = self.grad[0];
            for (std::size_t i = 0; i < g->numel(); ++i) {
                const T p = probs[i];
                const T d_dice = -(T{2} * target[i] * den - num) / (den * den);
                (*g)[i] += up * (d_dice * p * (T{1} - p) + (p - target[i]) / m);
            }
        }
    });
}

/// Mean of squared differences; gradients flow to whichever side tracks them.
template <typename T>
Var<T> mse_loss(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mse_loss");
    T acc{0};
    for (std::size_t i = 0; i < a.value().numel(); ++i) {
        const T d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    const T m = static_cast<T>(a.value().numel());
    return record<T>(Tensor<T>({1}, acc / m), {a, b}, [m](Node<T>& self) {
        const Tensor<T>& av = self.parents[0]->value;
        const Tensor<T>& bv = self.parents[1]->value;
        const T k = T{2} * self.grad[0] / m;
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += k * (av[i] - bv[i]);
        if (auto* g = parent_grad(self, 1))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= k * (av[i] - bv[i]);
    });
}

/// Reconstruction MSE against the input image (both in [0, 1]).
template <typename T>
Var<T> recon_mse_loss(const Var<T>& recon, const Tensor<T>& image) {
    require_same_shape(recon.shape(), image.shape(), "recon_mse_loss");
    return mse_loss(recon, Var<T>(image));
}

inline double teacher_total_loss(double seg_loss, double recon_loss, double lambda_rec) {
    return seg_loss + lambda_rec * recon_loss;
}

/// InfoNCE with in-batch negatives: mean_i -log softmax_j(a_i . p_j / tau)[i].
/// Rows of both inputs must be unit length (tolerance 1e-3).
template <typename T>
Var<T> info_nce_loss(const Var<T>& anchors, const Var<T>& positives, T tau) {
    require_rank(anchors.shape(), 2, "info_nce_loss anchors");
    require_same_shape(anchors.shape(), positives.shape(), "info_nce_loss");
    if (!(tau > T{0})) throw Error("info_nce_loss: temperature must be > 0");
    const std::size_t b = anchors.shape()[0], d = anchors.shape()[1];
    if (b == 0) throw Error("info_nce_loss: empty batch");
    for (const Var<T>* v : {&anchors, &positives}) {
        for (std::size_t i = 0; i < b; ++i) {
            T sq{0};
            for (std::size_t j = 0; j < d; ++j) sq += v->value()[i * d + j] * v->value()[i * d + j];
            if (std::abs(std::sqrt(sq) - T{1}) > T(1e-3)) {
                throw Error("info_nce_loss: row " + std::to_string(i) + " is not unit-normalised (norm " +
                            std::to_string(static_cast<double>(std::sqrt(sq))) + ")");
            }
        }
    }
    RowMatrix<T> logits = ConstMatMap<T>(anchors.value().data(), b, d) *
                          ConstMatMap<T>(positives.value().data(), b, d).transpose() / tau;
    RowMatrix<T> softmax(b, b);
    T loss{0};
    for (std::size_t i = 0; i < b; ++i) {
        const T mx = logits.row(i).maxCoeff();
        T z{0};
        for (std::size_t j = 0; j < b; ++j) z += std::exp(logits(i, j) - mx);
        const T lse = mx + std::log(z);
        loss += lse - logits(i, i);
        for (std::size_t j = 0; j < b; ++j) softmax(i, j) = std::exp(logits(i, j) - lse);
    }
    loss /= static_cast<T>(b);
    return record<T>(Tensor<T>({1}, loss), {anchors, positives}, [b, d, tau, softmax](Node<T>& self) {
        RowMatrix<T> dl = softmax;
        for (std::size_t i = 0; i < b; ++i) dl(i, i) -= T{1};
        dl *= self.grad[0] / (static_cast<T>(b) * tau);
        if (auto* g = parent_grad(self, 0)) {
            MatMap<T>(g->data(), b, d).noalias() += dl * ConstMatMap<T>(self.parents[1]->value.data(), b, d);
        }
        if (auto* g = parent_grad(self, 1)) {
            MatMap<T>(g->data(), b, d).noalias() += dl.transpose() * ConstMatMap<T>(self.parents[0]->value.data(), b, d);
        }
    });
}

/// Contrastive loss between teacher and student at one scale. The teacher tap is detached, so
/// only the student and the two projectors receive gradients.
template <typename T>
Var<T> scale_contrastive_loss(const FeatureTaps<T>& teacher, const FeatureTaps<T>& student,
                              const Projector<T>& teacher_projector, const Projector<T>& student_projector,
                              Scale scale, T tau) {
    const Var<T> anchors = student_projector(student.at(scale));
    const Var<T> positives = teacher_projector(teacher.at(scale).detach());
    return info_nce_loss(anchors, positives, tau);
}

/// MSE between the teacher tap and the adapted student tap (ablation alternative to InfoNCE).
template <typename T>
Var<T> feature_mse_loss(const FeatureTaps<T>& teacher, const FeatureTaps<T>& student, Scale scale,
                        const ChannelAdapter<T>& adapter) {
    const Var<T> target = teacher.at(scale).detach();
    const Var<T> adapted = adapter(student.at(scale));
    if (adapted.shape() != target.shape()) {
        throw ShapeError("feature_mse_loss: adapted student tap " + to_string(adapted.shape()) +
                         " does not match teacher tap " + to_string(target.shape()) + " at scale " + to_string(scale));
    }
    return mse_loss(adapted, target);
}

/// Prediction-map distillation: T^2 * mean over pixels of KL(teacher || student), where each
/// pixel's sigmoid logit z is expanded to the two-class logit pair (z, 0) and softened by T.
template <typename T>
Var<T> pmd_loss(const Var<T>& student_logits, const Var<T>& teacher_logits, T temperature) {
    require_same_shape(student_logits.shape(), teacher_logits.shape(), "pmd_loss");
    if (!(temperature > T{0})) throw Error("pmd_loss: temperature must be > 0");
    const std::size_t m = student_logits.value().numel();
    T kl{0};
    for (std::size_t i = 0; i < m; ++i) {
        const T s = student_logits.value()[i] / temperature;
        const T t = teacher_logits.value()[i] / temperature;
        const T q1 = sigmoid_scalar(t), q0 = T{1} - q1;
        // log q1 = -softplus(-t), log q0 = -softplus(t); same for p with s.
        kl += q1 * (detail::softplus(-s) - detail::softplus(-t)) + q0 * (detail::softplus(s) - detail::softplus(t));
    }
    const T scale = temperature * temperature / static_cast<T>(m);
    return record<T>(Tensor<T>({1}, kl * scale), {student_logits, teacher_logits}, [m, temperature, scale](Node<T>& self) {
        const Tensor<T>& sv = self.parents[0]->value;
        const Tensor<T>& tv = self.parents[1]->value;
        Tensor<T>* gs = parent_grad(self, 0);
        Tensor<T>* gt = parent_grad(self, 1);
        const T k = self.grad[0] * scale / temperature;
        for (std::size_t i = 0; i < m; ++i) {
            const T s = sv[i] / temperature, t = tv[i] / temperature;
            const T p1 = sigmoid_scalar(s), q1 = sigmoid_scalar(t);
            if (gs) (*gs)[i] += k * (p1 - q1);
            if (gt) (*gt)[i] += k * q1 * (T{1} - q1) * (t - s);
        }
    });
}

/// Graph-level terms of one distillation step.
template <typename T>
struct LossTerms {
    Var<T> seg;
    std::optional<Var<T>> recon;
    std::optional<Var<T>> con_enc;
    std::optional<Var<T>> con_bn;
    std::optional<Var<T>> con_dec;
    std::optional<Var<T>> pmd;

    std::optional<Var<T>>& scale(Scale s) { return s == Scale::encoder ? con_enc : s == Scale::bottleneck ? con_bn : con_dec; }
};

/// Numeric form of the distillation objective:
/// total = w_seg*seg + w_enc*con_enc + w_bn*con_bn + w_dec*con_dec + pmd.
/// A component with a non-zero weight (or PMD when enabled) must be present.
inline LossBreakdown student_total_loss(LossBreakdown components, const LossWeights& w) {
    w.validate();
    for (Scale s : all_scales) {
        if (w.scale_weight(s) != 0.0 && !components.scale(s)) {
            throw Error("student_total_loss: " + to_string(s) + " component has weight " +
                        std::to_string(w.scale_weight(s)) + " but is missing");
        }
    }
    if (w.pmd_enabled && !components.pmd) throw Error("student_total_loss: PMD enabled but missing");
    components.recon.reset();
    components.total = weighted_total(components, w);
    return components;
}

/// Graph form: returns the differentiable total and the numeric breakdown.
template <typename T>
std::pair<Var<T>, LossBreakdown> student_total_loss(const LossTerms<T>& terms, const LossWeights& w) {
    LossBreakdown b;
    b.seg = terms.seg.item();
    std::vector<Var<T>> vars{terms.seg};
    std::vector<T> weights{static_cast<T>(w.w_seg)};
    const std::optional<Var<T>>* scales[] = {&terms.con_enc, &terms.con_bn, &terms.con_dec};
    for (std::size_t k = 0; k < 3; ++k) {
        if (*scales[k]) {
            b.scale(all_scales[k]) = (*scales[k])->item();
            vars.push_back(**scales[k]);
            weights.push_back(static_cast<T>(w.scale_weight(all_scales[k])));
        }
    }
    if (terms.pmd) {
        b.pmd = terms.pmd->item();
        if (w.pmd_enabled) {
            vars.push_back(*terms.pmd);
            weights.push_back(T{1});
        }
    }
    b = student_total_loss(b, w);
    return {weighted_sum(vars, weights), b};
}

} // namespace mtkd
