#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "mtkd/core/autograd.hpp"

namespace mtkd {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return record<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (auto* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v = v > T{0} ? v : T{0};
    return record<T>(std::move(out), {x}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->numel(); ++i) {
                if (self.value[i] > T{0}) (*g)[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
inline T sigmoid_scalar(T z) {
    return z >= T{0} ? T{1} / (T{1} + std::exp(-z)) : std::exp(z) / (T{1} + std::exp(z));
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v = sigmoid_scalar(v);
    return record<T>(std::move(out), {x}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->numel(); ++i) {
                const T s = self.value[i];
                (*g)[i] += self.grad[i] * s * (T{1} - s);
            }
        }
    });
}

/// Concatenates two NCHW tensors along channels.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    require_rank(a.shape(), 4, "concat_channels");
    require_rank(b.shape(), 4, "concat_channels");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
        throw ShapeError("concat_channels: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
    }
    const std::size_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
    Tensor<T> out({n, ca + cb, sa[2], sa[3]});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.value().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy_n(b.value().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
    }
    return record<T>(std::move(out), {a, b}, [n, ca, cb, hw](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < ca * hw; ++j) (*g)[i * ca * hw + j] += self.grad[i * (ca + cb) * hw + j];
        }
        if (auto* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < cb * hw; ++j)
                    (*g)[i * cb * hw + j] += self.grad[(i * (ca + cb) + ca) * hw + j];
        }
    });
}

/// NCHW -> N x C mean over the spatial plane.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    require_rank(x.shape(), 4, "global_avg_pool");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    Tensor<T> out({n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
        T acc{0};
        const T* src = x.value().data() + i * hw;
        for (std::size_t j = 0; j < hw; ++j) acc += src[j];
        out[i] = acc / static_cast<T>(hw);
    }
    return record<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n * c; ++i) {
                const T v = self.grad[i] / static_cast<T>(hw);
                for (std::size_t j = 0; j < hw; ++j) (*g)[i * hw + j] += v;
            }
        }
    });
}

/// Non-overlapping average pooling by an integer factor; factor 1 is the identity.
template <typename T>
Var<T> avg_pool(const Var<T>& x, std::size_t factor) {
    require_rank(x.shape(), 4, "avg_pool");
    if (factor == 1) return x;
    const auto& s = x.shape();
    if (factor == 0 || s[2] % factor || s[3] % factor) {
        throw ShapeError("avg_pool: spatial " + to_string(s) + " not divisible by " + std::to_string(factor));
    }
    const std::size_t oh = s[2] / factor, ow = s[3] / factor, planes = s[0] * s[1];
    const T inv = T{1} / static_cast<T>(factor * factor);
    Tensor<T> out({s[0], s[1], oh, ow});
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t h = 0; h < s[2]; ++h)
            for (std::size_t w = 0; w < s[3]; ++w)
                out[(p * oh + h / factor) * ow + w / factor] += x.value()[(p * s[2] + h) * s[3] + w] * inv;
    return record<T>(std::move(out), {x}, [s, factor, oh, ow, planes, inv](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t h = 0; h < s[2]; ++h)
                    for (std::size_t w = 0; w < s[3]; ++w)
                        (*g)[(p * s[2] + h) * s[3] + w] += self.grad[(p * oh + h / factor) * ow + w / factor] * inv;
        }
    });
}

/// Reshape without copying semantics beyond the value; gradient is reshaped back.
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return record<T>(std::move(out), {x}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        }
    });
}

/// Flattens everything but the leading batch dimension.
template <typename T>
Var<T> flatten_rows(const Var<T>& x) {
    const std::size_t n = x.shape().at(0);
    return reshape(x, Shape{n, x.value().numel() / n});
}

/// y = x W^T + b with x: N x in, W: out x in, b: out.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require_rank(x.shape(), 2, "linear input");
    const std::size_t n = x.shape()[0], in = x.shape()[1], outf = weight.shape()[0];
    if (weight.shape()[1] != in) {
        throw ShapeError("linear: input has " + std::to_string(in) + " features, weight expects " +
                         std::to_string(weight.shape()[1]));
    }
    Tensor<T> out({n, outf});
    MatMap<T> y(out.data(), n, outf);
    y.noalias() = ConstMatMap<T>(x.value().data(), n, in) *
                  ConstMatMap<T>(weight.value().data(), outf, in).transpose();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < outf; ++j) y(i, j) += bias.value()[j];
    return record<T>(std::move(out), {x, weight, bias}, [n, in, outf](Node<T>& self) {
        ConstMatMap<T> gy(self.grad.data(), n, outf);
        if (auto* g = parent_grad(self, 0)) {
            MatMap<T>(g->data(), n, in).noalias() +=
                gy * ConstMatMap<T>(self.parents[1]->value.data(), outf, in);
        }
        if (auto* g = parent_grad(self, 1)) {
            MatMap<T>(g->data(), outf, in).noalias() +=
                gy.transpose() * ConstMatMap<T>(self.parents[0]->value.data(), n, in);
        }
        if (auto* g = parent_grad(self, 2)) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < outf; ++j) (*g)[j] += gy(i, j);
        }
    });
}

/// Row-wise L2 normalisation of an N x d matrix; norms are clamped below at `eps`.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
    require_rank(x.shape(), 2, "l2_normalize_rows");
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    Tensor<T> out = x.value();
    std::vector<T> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        T sq{0};
        for (std::size_t j = 0; j < d; ++j) sq += out[i * d + j] * out[i * d + j];
        norms[i] = std::max(std::sqrt(sq), eps);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= norms[i];
    }
    return record<T>(std::move(out), {x}, [n, d, eps, norms](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) {
                const T* y = self.value.data() + i * d;
                const T* gy = self.grad.data() + i * d;
                if (norms[i] > eps) {
                    T dot{0};
                    for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
                    for (std::size_t j = 0; j < d; ++j) (*g)[i * d + j] += (gy[j] - y[j] * dot) / norms[i];
                } else {
                    for (std::size_t j = 0; j < d; ++j) (*g)[i * d + j] += gy[j] / eps;
                }
            }
        }
    });
}

/// Sum of weighted scalar terms.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
    if (terms.size() != weights.size()) throw ShapeError("weighted_sum: terms and weights differ in length");
    Tensor<T> out({1});
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].value().numel() != 1) throw ShapeError("weighted_sum: non-scalar term " + to_string(terms[i].shape()));
        out[0] += weights[i] * terms[i].value()[0];
    }
    return record<T>(std::move(out), terms, [weights](Node<T>& self) {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (auto* g = parent_grad(self, i)) (*g)[0] += weights[i] * self.grad[0];
        }
    });
}

} // namespace mtkd
