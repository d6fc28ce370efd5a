// Differentiable operations over Tensor<T>.
//
// Broadcasting is restricted to identical shapes or tensor-vs-scalar;
// reshaping is explicit. Each op validates its inputs, runs the forward
// kernel and tapes a backward closure when gradients are required.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <vector>

#include "vaedet/kernels.hpp"
#include "vaedet/tensor.hpp"

namespace vaedet {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary / scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    auto av = a.values(), bv = b.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto pa = a.impl(), pb = b.impl();
    return detail::make_op_result<T>(
        a.shape(), std::move(out), "add", {pa, pb}, [pa, pb](detail::TensorData<T>& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                detail::accumulate(pa->grad, self.grad);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                detail::accumulate(pb->grad, self.grad);
            }
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    auto av = a.values(), bv = b.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto pa = a.impl(), pb = b.impl();
    return detail::make_op_result<T>(
        a.shape(), std::move(out), "sub", {pa, pb}, [pa, pb](detail::TensorData<T>& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                detail::accumulate(pa->grad, self.grad);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    auto av = a.values(), bv = b.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto pa = a.impl(), pb = b.impl();
    return detail::make_op_result<T>(
        a.shape(), std::move(out), "mul", {pa, pb}, [pa, pb](detail::TensorData<T>& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pa->grad[i] += self.grad[i] * pb->value[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pb->grad[i] += self.grad[i] * pa->value[i];
            }
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto pa = a.impl();
    return detail::make_op_result<T>(a.shape(), std::move(out), "scale", {pa},
                                     [pa, c](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             pa->grad[i] += self.grad[i] * c;
                                     });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    auto pa = a.impl();
    return detail::make_op_result<T>(a.shape(), std::move(out), "add_scalar", {pa},
                                     [pa](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         detail::accumulate(pa->grad, self.grad);
                                     });
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    auto pa = a.impl();
    return detail::make_op_result<T>(a.shape(), std::move(out), "exp", {pa},
                                     [pa](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             pa->grad[i] += self.grad[i] * self.value[i];
                                     });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (av[i] <= T(0)) throw std::domain_error("log: nonpositive input");
        out[i] = std::log(av[i]);
    }
    auto pa = a.impl();
    return detail::make_op_result<T>(a.shape(), std::move(out), "log", {pa},
                                     [pa](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             pa->grad[i] += self.grad[i] / pa->value[i];
                                     });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
    auto pa = a.impl();
    return detail::make_op_result<T>(a.shape(), std::move(out), "tanh", {pa},
                                     [pa](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             pa->grad[i] += self.grad[i] *
                                                            (T(1) - self.value[i] * self.value[i]);
                                     });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
    auto pa = a.impl();
    return detail::make_op_result<T>(a.shape(), std::move(out), "square", {pa},
                                     [pa](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             pa->grad[i] += self.grad[i] * T(2) * pa->value[i];
                                     });
}

// Derivative at exactly 0 is the negative slope.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : slope * av[i];
    auto pa = a.impl();
    return detail::make_op_result<T>(a.shape(), std::move(out), "leaky_relu", {pa},
                                     [pa, slope](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             pa->grad[i] += self.grad[i] *
                                                            (pa->value[i] > T(0) ? T(1) : slope);
                                     });
}

// Hard clamp; gradient is zero outside [lo, hi] and passes through inside
// (boundary counts as inside).
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
    auto av = a.values();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(av[i], lo), hi);
    auto pa = a.impl();
    return detail::make_op_result<T>(a.shape(), std::move(out), "clamp", {pa},
                                     [pa, lo, hi](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             if (pa->value[i] >= lo && pa->value[i] <= hi)
                                                 pa->grad[i] += self.grad[i];
                                     });
}

// ---------------------------------------------------------------------------
// reductions, reshape, log-sum-exp
// ---------------------------------------------------------------------------

namespace detail {

// Maps every input linear index to the linear index of the reduced output.
inline std::vector<int64_t> reduction_index_map(const Shape& in_shape,
                                                const std::vector<int>& axes, Shape& out_shape) {
    std::vector<bool> reduced(in_shape.size(), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= static_cast<int>(in_shape.size()))
            throw std::invalid_argument("reduce: axis out of range");
        if (reduced[static_cast<size_t>(ax)])
            throw std::invalid_argument("reduce: duplicate axis");
        reduced[static_cast<size_t>(ax)] = true;
    }
    out_shape.clear();
    for (size_t i = 0; i < in_shape.size(); ++i)
        if (!reduced[i]) out_shape.push_back(in_shape[i]);

    const int64_t n = shape_numel(in_shape);
    std::vector<int64_t> map(static_cast<size_t>(n));
    std::vector<int64_t> out_stride(in_shape.size(), 0);
    int64_t stride = 1;
    for (int i = static_cast<int>(in_shape.size()) - 1; i >= 0; --i) {
        if (!reduced[static_cast<size_t>(i)]) {
            out_stride[static_cast<size_t>(i)] = stride;
            stride *= in_shape[static_cast<size_t>(i)];
        }
    }
    std::vector<int> idx(in_shape.size(), 0);
    for (int64_t lin = 0; lin < n; ++lin) {
        int64_t out_lin = 0;
        for (size_t i = 0; i < in_shape.size(); ++i) out_lin += idx[i] * out_stride[i];
        map[static_cast<size_t>(lin)] = out_lin;
        for (int i = static_cast<int>(in_shape.size()) - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < in_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return map;
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& a, const std::vector<int>& axes) {
    Shape out_shape;
    auto map = detail::reduction_index_map(a.shape(), axes, out_shape);
    auto av = a.values();
    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)), T(0));
    for (size_t i = 0; i < av.size(); ++i) out[static_cast<size_t>(map[i])] += av[i];
    auto pa = a.impl();
    return detail::make_op_result<T>(std::move(out_shape), std::move(out), "sum", {pa},
                                     [pa, map = std::move(map)](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = 0; i < pa->grad.size(); ++i)
                                             pa->grad[i] +=
                                                 self.grad[static_cast<size_t>(map[i])];
                                     });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, const std::vector<int>& axes) {
    Shape out_shape;
    detail::reduction_index_map(a.shape(), axes, out_shape);
    const int64_t count = shape_numel(a.shape()) / std::max<int64_t>(1, shape_numel(out_shape));
    if (count == 0) throw std::invalid_argument("mean: empty reduction");
    return scale(sum(a, axes), T(1) / static_cast<T>(count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    std::vector<int> axes(a.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    return sum(a, axes);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(new_shape));
    auto av = a.values();
    std::vector<T> out(av.begin(), av.end());
    auto pa = a.impl();
    return detail::make_op_result<T>(std::move(new_shape), std::move(out), "reshape", {pa},
                                     [pa](detail::TensorData<T>& self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         detail::accumulate(pa->grad, self.grad);
                                     });
}

// Shift-stabilized log(sum(exp(v))) over all elements; exact for singletons,
// never overflows for representable inputs. Gradient is softmax(v).
template <typename T>
Tensor<T> log_sum_exp(const Tensor<T>& a) {
    if (a.numel() < 1) throw std::invalid_argument("log_sum_exp: empty input");
    auto av = a.values();
    T m = av[0];
    for (const T v : av) m = std::max(m, v);
    T acc = T(0);
    for (const T v : av) acc += std::exp(v - m);
    const T out = m + std::log(acc);
    auto pa = a.impl();
    return detail::make_op_result<T>(
        Shape{}, std::vector<T>{out}, "log_sum_exp", {pa},
        [pa, m, acc](detail::TensorData<T>& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            for (size_t i = 0; i < pa->grad.size(); ++i)
                pa->grad[i] += self.grad[0] * std::exp(pa->value[i] - m) / acc;
        });
}

// Scalar-path log-sum-exp for score arithmetic (no tape).
inline double log_sum_exp(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("log_sum_exp: empty input");
    double m = v[0];
    for (const double x : v) m = std::max(m, x);
    double acc = 0.0;
    for (const double x : v) acc += std::exp(x - m);
    return m + std::log(acc);
}

// ---------------------------------------------------------------------------
// convolution ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weight, int stride,
                           int pad, bool transposed) {
    if (input.ndim() != 4)
        throw std::invalid_argument("conv: input must be 4-d, got " + shape_str(input.shape()));
    if (weight.ndim() != 4)
        throw std::invalid_argument("conv: weight must be 4-d, got " +
                                    shape_str(weight.shape()));
    ConvGeometry g{};
    g.batch = input.dim(0);
    g.in_ch = input.dim(1);
    g.in_h = input.dim(2);
    g.in_w = input.dim(3);
    g.k_h = weight.dim(2);
    g.k_w = weight.dim(3);
    g.stride = stride;
    g.pad = pad;
    if (transposed) {
        if (weight.dim(0) != g.in_ch)
            throw std::invalid_argument("conv_transpose2d: weight expects " +
                                        std::to_string(weight.dim(0)) + " input channels, got " +
                                        std::to_string(g.in_ch));
        g.out_ch = weight.dim(1);
        g.validate_tconv();
    } else {
        if (weight.dim(1) != g.in_ch)
            throw std::invalid_argument("conv2d: weight expects " +
                                        std::to_string(weight.dim(1)) + " input channels, got " +
                                        std::to_string(g.in_ch));
        g.out_ch = weight.dim(0);
        g.validate_conv();
    }
    return g;
}

template <typename T>
void check_bias(const Tensor<T>* bias, int out_ch, const char* op) {
    if (!bias) return;
    if (bias->ndim() != 1 || bias->dim(0) != out_ch)
        throw std::invalid_argument(std::string(op) + ": bias must be [" +
                                    std::to_string(out_ch) + "], got " +
                                    shape_str(bias->shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                 int stride, int pad) {
    const ConvGeometry g = detail::conv_geometry(input, weight, stride, pad, false);
    detail::check_bias(bias, g.out_ch, "conv2d");
    const int OH = g.conv_out_h(), OW = g.conv_out_w();
    std::vector<T> out(static_cast<size_t>(g.batch) * g.out_ch * OH * OW);
    kernels::conv2d_forward(input.values().data(), weight.values().data(),
                            bias ? bias->values().data() : nullptr, out.data(), g);
    auto pin = input.impl(), pw = weight.impl();
    auto pb = bias ? bias->impl() : nullptr;
    std::vector<std::shared_ptr<detail::TensorData<T>>> parents{pin, pw};
    if (pb) parents.push_back(pb);
    return detail::make_op_result<T>(
        Shape{g.batch, g.out_ch, OH, OW}, std::move(out), "conv2d", std::move(parents),
        [pin, pw, pb, g](detail::TensorData<T>& self) {
            const int oh = g.conv_out_h(), ow = g.conv_out_w();
            if (pin->requires_grad) {
                pin->ensure_grad();
                kernels::conv2d_backward_input(self.grad.data(), pw->value.data(),
                                               pin->grad.data(), g);
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                kernels::conv2d_backward_weight(self.grad.data(), pin->value.data(),
                                                pw->grad.data(), g);
            }
            if (pb && pb->requires_grad) {
                pb->ensure_grad();
                kernels::conv2d_backward_bias(self.grad.data(), pb->grad.data(), g.batch,
                                              g.out_ch, oh, ow);
            }
        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, int stride, int pad) {
    return conv2d<T>(input, weight, nullptr, stride, pad);
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>* bias, int stride, int pad) {
    const ConvGeometry g = detail::conv_geometry(input, weight, stride, pad, true);
    detail::check_bias(bias, g.out_ch, "conv_transpose2d");
    const int OH = g.tconv_out_h(), OW = g.tconv_out_w();
    std::vector<T> out(static_cast<size_t>(g.batch) * g.out_ch * OH * OW);
    kernels::conv_transpose2d_forward(input.values().data(), weight.values().data(),
                                      bias ? bias->values().data() : nullptr, out.data(), g);
    auto pin = input.impl(), pw = weight.impl();
    auto pb = bias ? bias->impl() : nullptr;
    std::vector<std::shared_ptr<detail::TensorData<T>>> parents{pin, pw};
    if (pb) parents.push_back(pb);
    return detail::make_op_result<T>(
        Shape{g.batch, g.out_ch, OH, OW}, std::move(out), "conv_transpose2d",
        std::move(parents), [pin, pw, pb, g](detail::TensorData<T>& self) {
            const int oh = g.tconv_out_h(), ow = g.tconv_out_w();
            if (pin->requires_grad) {
                pin->ensure_grad();
                kernels::conv_transpose2d_backward_input(self.grad.data(), pw->value.data(),
                                                         pin->grad.data(), g);
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                kernels::conv_transpose2d_backward_weight(self.grad.data(), pin->value.data(),
                                                          pw->grad.data(), g);
            }
            if (pb && pb->requires_grad) {
                pb->ensure_grad();
                kernels::conv2d_backward_bias(self.grad.data(), pb->grad.data(), g.batch,
                                              g.out_ch, oh, ow);
            }
        });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, int stride,
                           int pad) {
    return conv_transpose2d<T>(input, weight, nullptr, stride, pad);
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

// Per-channel batch normalization over [B,C,H,W]. In training mode the batch
// statistics normalize and the running statistics are updated in place
// (running_var uses the unbiased estimate); in inference mode the running
// statistics are read and never touched.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.ndim() != 4)
        throw std::invalid_argument("batch_norm: input must be 4-d, got " +
                                    shape_str(x.shape()));
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto check_param = [C](const Tensor<T>& p, const char* name) {
        if (p.ndim() != 1 || p.dim(0) != C)
            throw std::invalid_argument(std::string("batch_norm: ") + name + " must be [" +
                                        std::to_string(C) + "]");
    };
    check_param(gamma, "gamma");
    check_param(beta, "beta");
    check_param(running_mean, "running_mean");
    check_param(running_var, "running_var");

    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t n = static_cast<int64_t>(B) * plane;
    if (n < 1) throw std::invalid_argument("batch_norm: empty batch");
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();

    std::vector<T> out(xv.size());
    std::vector<T> mean_c(static_cast<size_t>(C)), var_c(static_cast<size_t>(C));

    if (training) {
        auto rm = running_mean.mutable_values();
        auto rv = running_var.mutable_values();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int c = 0; c < C; ++c) {
            T m = T(0);
            for (int b = 0; b < B; ++b) {
                const T* p = xv.data() + (static_cast<int64_t>(b) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) m += p[i];
            }
            m /= static_cast<T>(n);
            T v = T(0);
            for (int b = 0; b < B; ++b) {
                const T* p = xv.data() + (static_cast<int64_t>(b) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
            }
            v /= static_cast<T>(n);
            mean_c[static_cast<size_t>(c)] = m;
            var_c[static_cast<size_t>(c)] = v;
            const T inv_std = T(1) / std::sqrt(v + eps);
            for (int b = 0; b < B; ++b) {
                const T* p = xv.data() + (static_cast<int64_t>(b) * C + c) * plane;
                T* q = out.data() + (static_cast<int64_t>(b) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i)
                    q[i] = gv[static_cast<size_t>(c)] * (p[i] - m) * inv_std +
                           bv[static_cast<size_t>(c)];
            }
            const T unbiased =
                n > 1 ? v * static_cast<T>(n) / static_cast<T>(n - 1) : v;
            rm[static_cast<size_t>(c)] = (T(1) - momentum) * rm[static_cast<size_t>(c)] +
                                         momentum * m;
            rv[static_cast<size_t>(c)] = (T(1) - momentum) * rv[static_cast<size_t>(c)] +
                                         momentum * unbiased;
        }
    } else {
        auto rm = running_mean.values();
        auto rv = running_var.values();
        for (int c = 0; c < C; ++c) {
            mean_c[static_cast<size_t>(c)] = rm[static_cast<size_t>(c)];
            var_c[static_cast<size_t>(c)] = rv[static_cast<size_t>(c)];
        }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int c = 0; c < C; ++c) {
            const T inv_std = T(1) / std::sqrt(var_c[static_cast<size_t>(c)] + eps);
            for (int b = 0; b < B; ++b) {
                const T* p = xv.data() + (static_cast<int64_t>(b) * C + c) * plane;
                T* q = out.data() + (static_cast<int64_t>(b) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i)
                    q[i] = gv[static_cast<size_t>(c)] *
                               (p[i] - mean_c[static_cast<size_t>(c)]) * inv_std +
                           bv[static_cast<size_t>(c)];
            }
        }
    }

    auto px = x.impl(), pg = gamma.impl(), pbta = beta.impl();
    return detail::make_op_result<T>(
        x.shape(), std::move(out), "batch_norm", {px, pg, pbta},
        [px, pg, pbta, mean_c = std::move(mean_c), var_c = std::move(var_c), B, C, plane, n,
         eps, training](detail::TensorData<T>& self) {
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pbta->requires_grad) pbta->ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int c = 0; c < C; ++c) {
                const T m = mean_c[static_cast<size_t>(c)];
                const T inv_std = T(1) / std::sqrt(var_c[static_cast<size_t>(c)] + eps);
                const T g = pg->value[static_cast<size_t>(c)];

                // per-channel reductions over the batch
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (int b = 0; b < B; ++b) {
                    const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        const T dy = self.grad[static_cast<size_t>(base + i)];
                        const T xhat =
                            (px->value[static_cast<size_t>(base + i)] - m) * inv_std;
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                }
                if (pg->requires_grad) pg->grad[static_cast<size_t>(c)] += sum_dy_xhat;
                if (pbta->requires_grad) pbta->grad[static_cast<size_t>(c)] += sum_dy;
                if (!px->requires_grad) continue;

                if (training) {
                    const T inv_n = T(1) / static_cast<T>(n);
                    for (int b = 0; b < B; ++b) {
                        const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            const T dy = self.grad[static_cast<size_t>(base + i)];
                            const T xhat =
                                (px->value[static_cast<size_t>(base + i)] - m) * inv_std;
                            px->grad[static_cast<size_t>(base + i)] +=
                                g * inv_std *
                                (dy - inv_n * sum_dy - inv_n * xhat * sum_dy_xhat);
                        }
                    }
                } else {
                    for (int b = 0; b < B; ++b) {
                        const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i)
                            px->grad[static_cast<size_t>(base + i)] +=
                                g * inv_std * self.grad[static_cast<size_t>(base + i)];
                    }
                }
            }
        });
}

}  // namespace vaedet
