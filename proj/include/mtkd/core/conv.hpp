#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mtkd/core/ops.hpp"

namespace mtkd {

namespace detail {

// col[(c*k + ki)*k + kj][oh*ow_n + ow] = x[c][oh + ki - pad][ow + kj - pad]
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
            std::size_t oh_n, std::size_t ow_n, T* col) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* row = col + ((c * k + ki) * k + kj) * oh_n * ow_n;
                for (std::size_t oh = 0; oh < oh_n; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + ki) - static_cast<std::ptrdiff_t>(pad);
                    T* dst = row + oh * ow_n;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
                        std::fill_n(dst, ow_n, T{0});
                        continue;
                    }
                    const T* src = x + (c * h + static_cast<std::size_t>(ih)) * w;
                    for (std::size_t ow = 0; ow < ow_n; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + kj) - static_cast<std::ptrdiff_t>(pad);
                        dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) ? T{0} : src[iw];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
                std::size_t oh_n, std::size_t ow_n, T* x) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const T* row = col + ((c * k + ki) * k + kj) * oh_n * ow_n;
                for (std::size_t oh = 0; oh < oh_n; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + ki) - static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                    T* dst = x + (c * h + static_cast<std::size_t>(ih)) * w;
                    const T* src = row + oh * ow_n;
                    for (std::size_t ow = 0; ow < ow_n; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + kj) - static_cast<std::ptrdiff_t>(pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(w)) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

} // namespace detail

/// Stride-1 2D convolution. x: N x Cin x H x W, weight: Cout x Cin x k x k, bias: Cout.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t pad) {
    require_rank(x.shape(), 4, "conv2d input");
    require_rank(weight.shape(), 4, "conv2d weight");
    const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::size_t cout = weight.shape()[0], k = weight.shape()[2];
    if (weight.shape()[1] != cin) {
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                         std::to_string(weight.shape()[1]));
    }
    if (h + 2 * pad < k || w + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
    const std::size_t rows = cin * k * k, cols = oh * ow;
    const bool direct = (k == 1 && pad == 0);

    Tensor<T> out({n, cout, oh, ow});
    std::vector<T> col(direct ? 0 : rows * cols);
    ConstMatMap<T> wm(weight.value().data(), cout, rows);
    for (std::size_t i = 0; i < n; ++i) {
        const T* xi = x.value().data() + i * cin * h * w;
        if (!direct) detail::im2col(xi, cin, h, w, k, pad, oh, ow, col.data());
        MatMap<T> y(out.data() + i * cout * cols, cout, cols);
        y.noalias() = wm * ConstMatMap<T>(direct ? xi : col.data(), rows, cols);
        for (std::size_t c = 0; c < cout; ++c) y.row(c).array() += bias.value()[c];
    }

    return record<T>(std::move(out), {x, weight, bias}, [=](Node<T>& self) {
        const Tensor<T>& xv = self.parents[0]->value;
        ConstMatMap<T> wmat(self.parents[1]->value.data(), cout, rows);
        Tensor<T>* gx = parent_grad(self, 0);
        Tensor<T>* gw = parent_grad(self, 1);
        Tensor<T>* gb = parent_grad(self, 2);
        std::vector<T> col_buf(direct ? 0 : rows * cols);
        std::vector<T> dcol(direct ? 0 : rows * cols);
        for (std::size_t i = 0; i < n; ++i) {
            ConstMatMap<T> gy(self.grad.data() + i * cout * cols, cout, cols);
            const T* xi = xv.data() + i * cin * h * w;
            if (gw) {
                if (!direct) detail::im2col(xi, cin, h, w, k, pad, oh, ow, col_buf.data());
                MatMap<T>(gw->data(), cout, rows).noalias() +=
                    gy * ConstMatMap<T>(direct ? xi : col_buf.data(), rows, cols).transpose();
            }
            if (gb) {
                // Plain loop: Eigen's vectorised sum peels by address, which would make the
                // result depend on allocation alignment.
                for (std::size_t c = 0; c < cout; ++c) {
                    T acc{0};
                    for (std::size_t j = 0; j < cols; ++j) acc += gy(c, j);
                    (*gb)[c] += acc;
                }
            }
            if (gx) {
                T* gxi = gx->data() + i * cin * h * w;
                if (direct) {
                    MatMap<T>(gxi, rows, cols).noalias() += wmat.transpose() * gy;
                } else {
                    MatMap<T>(dcol.data(), rows, cols).noalias() = wmat.transpose() * gy;
                    detail::col2im_add(dcol.data(), cin, h, w, k, pad, oh, ow, gxi);
                }
            }
        }
    });
}

/// 2x2 stride-2 transposed convolution. weight: Cin x Cout x 2 x 2, bias: Cout.
template <typename T>
Var<T> conv_transpose2x2(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require_rank(x.shape(), 4, "conv_transpose2x2 input");
    const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (weight.shape()[0] != cin || weight.shape()[2] != 2 || weight.shape()[3] != 2) {
        throw ShapeError("conv_transpose2x2: weight " + to_string(weight.shape()) + " incompatible with input " +
                         to_string(x.shape()));
    }
    const std::size_t cout = weight.shape()[1], hw = h * w, c4 = cout * 4;
    Tensor<T> out({n, cout, 2 * h, 2 * w});
    std::vector<T> y4(c4 * hw);
    ConstMatMap<T> wm(weight.value().data(), cin, c4);
    for (std::size_t i = 0; i < n; ++i) {
        MatMap<T>(y4.data(), c4, hw).noalias() =
            wm.transpose() * ConstMatMap<T>(x.value().data() + i * cin * hw, cin, hw);
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ab = 0; ab < 4; ++ab) {
                const std::size_t a = ab / 2, b = ab % 2;
                const T* src = y4.data() + (co * 4 + ab) * hw;
                for (std::size_t r = 0; r < h; ++r)
                    for (std::size_t c = 0; c < w; ++c)
                        out.at(i, co, 2 * r + a, 2 * c + b) = src[r * w + c] + bias.value()[co];
            }
    }
    return record<T>(std::move(out), {x, weight, bias}, [=](Node<T>& self) {
        std::vector<T> gy4(c4 * hw);
        Tensor<T>* gx = parent_grad(self, 0);
        Tensor<T>* gw = parent_grad(self, 1);
        Tensor<T>* gb = parent_grad(self, 2);
        ConstMatMap<T> wmat(self.parents[1]->value.data(), cin, c4);
        const std::size_t ow = 2 * w, ohw = 4 * hw;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t ab = 0; ab < 4; ++ab) {
                    const std::size_t a = ab / 2, b = ab % 2;
                    T* dst = gy4.data() + (co * 4 + ab) * hw;
                    const T* src = self.grad.data() + (i * cout + co) * ohw;
                    for (std::size_t r = 0; r < h; ++r)
                        for (std::size_t c = 0; c < w; ++c) dst[r * w + c] = src[(2 * r + a) * ow + 2 * c + b];
                }
            ConstMatMap<T> g4(gy4.data(), c4, hw);
            if (gx) MatMap<T>(gx->data() + i * cin * hw, cin, hw).noalias() += wmat * g4;
            if (gw) {
                MatMap<T>(gw->data(), cin, c4).noalias() +=
                    ConstMatMap<T>(self.parents[0]->value.data() + i * cin * hw, cin, hw) * g4.transpose();
            }
            if (gb) {
                for (std::size_t co = 0; co < cout; ++co) {
                    const T* src = self.grad.data() + (i * cout + co) * ohw;
                    T acc{0};
                    for (std::size_t j = 0; j < ohw; ++j) acc += src[j];
                    (*gb)[co] += acc;
                }
            }
        }
    });
}

/// 2x2 stride-2 max pooling; H and W must be even.
template <typename T>
Var<T> max_pool2(const Var<T>& x) {
    require_rank(x.shape(), 4, "max_pool2");
    const auto& s = x.shape();
    if (s[2] % 2 || s[3] % 2) throw ShapeError("max_pool2: odd spatial size " + to_string(s));
    const std::size_t oh = s[2] / 2, ow = s[3] / 2, planes = s[0] * s[1];
    Tensor<T> out({s[0], s[1], oh, ow});
    std::vector<std::uint32_t> argmax(out.numel());
    const T* xv = x.value().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t c = 0; c < ow; ++c) {
                std::size_t best = (p * s[2] + 2 * r) * s[3] + 2 * c;
                for (std::size_t cand : {best + 1, best + s[3], best + s[3] + 1}) {
                    if (xv[cand] > xv[best]) best = cand;
                }
                const std::size_t o = (p * oh + r) * ow + c;
                out[o] = xv[best];
                argmax[o] = static_cast<std::uint32_t>(best);
            }
    return record<T>(std::move(out), {x}, [argmax = std::move(argmax)](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t o = 0; o < argmax.size(); ++o) (*g)[argmax[o]] += self.grad[o];
        }
    });
}

/// Batch normalisation over (N, H, W) per channel. In training mode batch statistics are
/// used and the running estimates are updated; otherwise the running estimates are used.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    require_rank(x.shape(), 4, "batch_norm");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (gamma.value().numel() != c) {
        throw ShapeError("batch_norm: " + std::to_string(c) + " channels but " + std::to_string(gamma.value().numel()) +
                         " affine parameters");
    }
    const std::size_t m = n * hw;
    std::vector<T> mean(c), inv_std(c);
    if (training) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T s{0};
            for (std::size_t i = 0; i < n; ++i) {
                const T* src = x.value().data() + (i * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) s += src[j];
            }
            const T mu = s / static_cast<T>(m);
            T v{0};
            for (std::size_t i = 0; i < n; ++i) {
                const T* src = x.value().data() + (i * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) v += (src[j] - mu) * (src[j] - mu);
            }
            const T var = v / static_cast<T>(m);
            mean[ch] = mu;
            inv_std[ch] = T{1} / std::sqrt(var + eps);
            const T unbiased = m > 1 ? v / static_cast<T>(m - 1) : var;
            running_mean[ch] = (T{1} - momentum) * running_mean[ch] + momentum * mu;
            running_var[ch] = (T{1} - momentum) * running_var[ch] + momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = running_mean[ch];
            inv_std[ch] = T{1} / std::sqrt(running_var[ch] + eps);
        }
    }

    Tensor<T> xhat(x.shape());
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * hw;
            const T g = gamma.value()[ch], b = beta.value()[ch];
            for (std::size_t j = 0; j < hw; ++j) {
                const T xh = (x.value()[base + j] - mean[ch]) * inv_std[ch];
                xhat[base + j] = xh;
                out[base + j] = g * xh + b;
            }
        }

    return record<T>(std::move(out), {x, gamma, beta},
                     [n, c, hw, m, training, inv_std, xhat = std::move(xhat)](Node<T>& self) {
        const Tensor<T>& gv = self.parents[1]->value;
        Tensor<T>* gx = parent_grad(self, 0);
        Tensor<T>* gg = parent_grad(self, 1);
        Tensor<T>* gb = parent_grad(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
            T sum_dy{0}, sum_dy_xhat{0};
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t base = (i * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) {
                    sum_dy += self.grad[base + j];
                    sum_dy_xhat += self.grad[base + j] * xhat[base + j];
                }
            }
            if (gg) (*gg)[ch] += sum_dy_xhat;
            if (gb) (*gb)[ch] += sum_dy;
            if (!gx) continue;
            const T scale = gv[ch] * inv_std[ch];
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t base = (i * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) {
                    if (training) {
                        (*gx)[base + j] += scale * (self.grad[base + j] - sum_dy / static_cast<T>(m) -
                                                    xhat[base + j] * sum_dy_xhat / static_cast<T>(m));
                    } else {
                        (*gx)[base + j] += scale * self.grad[base + j];
                    }
                }
            }
        }
    });
}

} // namespace mtkd
