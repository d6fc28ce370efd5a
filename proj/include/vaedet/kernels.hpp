// Convolution kernels.
//
// Two implementations live side by side:
//   kernels::   OpenMP-parallel gather kernels, the production path. Every
//               output element is owned by exactly one iteration and its
//               accumulation order is fixed, so results are bitwise
//               identical for any thread count.
//   reference:: plain serial nested-loop kernels in scatter form, kept as
//               the independent oracle for tests and as the baseline for
//               tools/bench_kernels.
//
// conv2d is cross-correlation (no kernel flip). conv2d weights are laid out
// [Cout,Cin,kH,kW]; conv_transpose2d weights [Cin,Cout,kH,kW], so the same
// buffer serves a convolution and its adjoint.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vaedet {

struct ConvGeometry {
    int batch, in_ch, in_h, in_w;
    int out_ch, k_h, k_w;
    int stride, pad;

    int conv_out_h() const { return (in_h + 2 * pad - k_h) / stride + 1; }
    int conv_out_w() const { return (in_w + 2 * pad - k_w) / stride + 1; }
    int tconv_out_h() const { return (in_h - 1) * stride - 2 * pad + k_h; }
    int tconv_out_w() const { return (in_w - 1) * stride - 2 * pad + k_w; }

    void validate_conv() const {
        if (stride <= 0) throw std::invalid_argument("conv2d: stride must be positive");
        if (pad < 0) throw std::invalid_argument("conv2d: padding must be nonnegative");
        if (in_h + 2 * pad < k_h || in_w + 2 * pad < k_w)
            throw std::invalid_argument("conv2d: kernel " + std::to_string(k_h) + "x" +
                                        std::to_string(k_w) + " larger than padded input");
    }
    void validate_tconv() const {
        if (stride <= 0)
            throw std::invalid_argument("conv_transpose2d: stride must be positive");
        if (pad < 0) throw std::invalid_argument("conv_transpose2d: padding must be nonnegative");
        if (tconv_out_h() < 1 || tconv_out_w() < 1)
            throw std::invalid_argument("conv_transpose2d: output size would be empty");
    }
};

namespace kernels {

// out[b,co,oh,ow] = bias[co] + sum_{ci,kh,kw} in[b,ci,oh*s-p+kh,ow*s-p+kw] * w[co,ci,kh,kw]
template <typename T>
void conv2d_forward(const T* in, const T* w, const T* bias, T* out, const ConvGeometry& g) {
    const int OH = g.conv_out_h(), OW = g.conv_out_w();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < g.batch; ++b) {
        for (int co = 0; co < g.out_ch; ++co) {
            T* out_plane = out + (static_cast<int64_t>(b) * g.out_ch + co) * OH * OW;
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                    T acc = bias ? bias[co] : T(0);
                    for (int ci = 0; ci < g.in_ch; ++ci) {
                        const T* in_plane =
                            in + (static_cast<int64_t>(b) * g.in_ch + ci) * g.in_h * g.in_w;
                        const T* w_plane =
                            w + (static_cast<int64_t>(co) * g.in_ch + ci) * g.k_h * g.k_w;
                        for (int kh = 0; kh < g.k_h; ++kh) {
                            const int ih = oh * g.stride - g.pad + kh;
                            if (ih < 0 || ih >= g.in_h) continue;
                            for (int kw = 0; kw < g.k_w; ++kw) {
                                const int iw = ow * g.stride - g.pad + kw;
                                if (iw < 0 || iw >= g.in_w) continue;
                                acc += in_plane[ih * g.in_w + iw] * w_plane[kh * g.k_w + kw];
                            }
                        }
                    }
                    out_plane[oh * OW + ow] = acc;
                }
            }
        }
    }
}

// gin[b,ci,ih,iw] += sum_{co,kh,kw} gout[b,co,oh,ow] * w[co,ci,kh,kw] where
// ih = oh*s - p + kh. Scatter form: each thread owns one (b,ci) input plane
// and stamps weighted kernel windows into it, so writes are disjoint, inner
// loops are contiguous, and the per-element accumulation order (co, oh, ow)
// is fixed for any thread count.
template <typename T>
void conv2d_backward_input(const T* gout, const T* w, T* gin, const ConvGeometry& g) {
    const int OH = g.conv_out_h(), OW = g.conv_out_w();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < g.batch; ++b) {
        for (int ci = 0; ci < g.in_ch; ++ci) {
            T* gin_plane = gin + (static_cast<int64_t>(b) * g.in_ch + ci) * g.in_h * g.in_w;
            for (int co = 0; co < g.out_ch; ++co) {
                const T* gout_plane =
                    gout + (static_cast<int64_t>(b) * g.out_ch + co) * OH * OW;
                const T* w_plane = w + (static_cast<int64_t>(co) * g.in_ch + ci) * g.k_h * g.k_w;
                for (int oh = 0; oh < OH; ++oh) {
                    for (int ow = 0; ow < OW; ++ow) {
                        const T v = gout_plane[oh * OW + ow];
                        const int ih0 = oh * g.stride - g.pad;
                        const int iw0 = ow * g.stride - g.pad;
                        for (int kh = 0; kh < g.k_h; ++kh) {
                            const int ih = ih0 + kh;
                            if (ih < 0 || ih >= g.in_h) continue;
                            for (int kw = 0; kw < g.k_w; ++kw) {
                                const int iw = iw0 + kw;
                                if (iw < 0 || iw >= g.in_w) continue;
                                gin_plane[ih * g.in_w + iw] += v * w_plane[kh * g.k_w + kw];
                            }
                        }
                    }
                }
            }
        }
    }
}

// gw[co,ci,kh,kw] = sum_{b,oh,ow} gout[b,co,oh,ow] * in[b,ci,oh*s-p+kh,ow*s-p+kw]
template <typename T>
void conv2d_backward_weight(const T* gout, const T* in, T* gw, const ConvGeometry& g) {
    const int OH = g.conv_out_h(), OW = g.conv_out_w();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int co = 0; co < g.out_ch; ++co) {
        for (int ci = 0; ci < g.in_ch; ++ci) {
            T* gw_plane = gw + (static_cast<int64_t>(co) * g.in_ch + ci) * g.k_h * g.k_w;
            for (int kh = 0; kh < g.k_h; ++kh) {
                for (int kw = 0; kw < g.k_w; ++kw) {
                    T acc = T(0);
                    for (int b = 0; b < g.batch; ++b) {
                        const T* gout_plane =
                            gout + (static_cast<int64_t>(b) * g.out_ch + co) * OH * OW;
                        const T* in_plane =
                            in + (static_cast<int64_t>(b) * g.in_ch + ci) * g.in_h * g.in_w;
                        for (int oh = 0; oh < OH; ++oh) {
                            const int ih = oh * g.stride - g.pad + kh;
                            if (ih < 0 || ih >= g.in_h) continue;
                            for (int ow = 0; ow < OW; ++ow) {
                                const int iw = ow * g.stride - g.pad + kw;
                                if (iw < 0 || iw >= g.in_w) continue;
                                acc += gout_plane[oh * OW + ow] * in_plane[ih * g.in_w + iw];
                            }
                        }
                    }
                    gw_plane[kh * g.k_w + kw] += acc;
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_bias(const T* gout, T* gbias, int batch, int out_ch, int out_h,
                          int out_w) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int co = 0; co < out_ch; ++co) {
        T acc = T(0);
        for (int b = 0; b < batch; ++b) {
            const T* plane = gout + (static_cast<int64_t>(b) * out_ch + co) * out_h * out_w;
            for (int i = 0; i < out_h * out_w; ++i) acc += plane[i];
        }
        gbias[co] += acc;
    }
}

// out[b,co,oh,ow] = bias[co] + sum_{ci,kh,kw : oh=ih*s-p+kh} in[b,ci,ih,iw] * w[ci,co,kh,kw]
// Scatter form, one (b,co) output plane per thread: every input element
// stamps its weighted kernel window. Disjoint writes, contiguous inner
// loops, fixed (ci, ih, iw) accumulation order per output element.
template <typename T>
void conv_transpose2d_forward(const T* in, const T* w, const T* bias, T* out,
                              const ConvGeometry& g) {
    const int OH = g.tconv_out_h(), OW = g.tconv_out_w();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < g.batch; ++b) {
        for (int co = 0; co < g.out_ch; ++co) {
            T* out_plane = out + (static_cast<int64_t>(b) * g.out_ch + co) * OH * OW;
            for (int i = 0; i < OH * OW; ++i) out_plane[i] = bias ? bias[co] : T(0);
            for (int ci = 0; ci < g.in_ch; ++ci) {
                const T* in_plane =
                    in + (static_cast<int64_t>(b) * g.in_ch + ci) * g.in_h * g.in_w;
                const T* w_plane =
                    w + (static_cast<int64_t>(ci) * g.out_ch + co) * g.k_h * g.k_w;
                for (int ih = 0; ih < g.in_h; ++ih) {
                    for (int iw = 0; iw < g.in_w; ++iw) {
                        const T v = in_plane[ih * g.in_w + iw];
                        const int oh0 = ih * g.stride - g.pad;
                        const int ow0 = iw * g.stride - g.pad;
                        for (int kh = 0; kh < g.k_h; ++kh) {
                            const int oh = oh0 + kh;
                            if (oh < 0 || oh >= OH) continue;
                            for (int kw = 0; kw < g.k_w; ++kw) {
                                const int ow = ow0 + kw;
                                if (ow < 0 || ow >= OW) continue;
                                out_plane[oh * OW + ow] += v * w_plane[kh * g.k_w + kw];
                            }
                        }
                    }
                }
            }
        }
    }
}

// gin[b,ci,ih,iw] = sum_{co,kh,kw} gout[b,co,ih*s-p+kh,iw*s-p+kw] * w[ci,co,kh,kw]
template <typename T>
void conv_transpose2d_backward_input(const T* gout, const T* w, T* gin,
                                     const ConvGeometry& g) {
    const int OH = g.tconv_out_h(), OW = g.tconv_out_w();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < g.batch; ++b) {
        for (int ci = 0; ci < g.in_ch; ++ci) {
            T* gin_plane = gin + (static_cast<int64_t>(b) * g.in_ch + ci) * g.in_h * g.in_w;
            for (int ih = 0; ih < g.in_h; ++ih) {
                for (int iw = 0; iw < g.in_w; ++iw) {
                    T acc = T(0);
                    for (int co = 0; co < g.out_ch; ++co) {
                        const T* gout_plane =
                            gout + (static_cast<int64_t>(b) * g.out_ch + co) * OH * OW;
                        const T* w_plane =
                            w + (static_cast<int64_t>(ci) * g.out_ch + co) * g.k_h * g.k_w;
                        for (int kh = 0; kh < g.k_h; ++kh) {
                            const int oh = ih * g.stride - g.pad + kh;
                            if (oh < 0 || oh >= OH) continue;
                            for (int kw = 0; kw < g.k_w; ++kw) {
                                const int ow = iw * g.stride - g.pad + kw;
                                if (ow < 0 || ow >= OW) continue;
                                acc += gout_plane[oh * OW + ow] * w_plane[kh * g.k_w + kw];
                            }
                        }
                    }
                    gin_plane[ih * g.in_w + iw] += acc;
                }
            }
        }
    }
}

// gw[ci,co,kh,kw] = sum_{b,ih,iw} in[b,ci,ih,iw] * gout[b,co,ih*s-p+kh,iw*s-p+kw]
template <typename T>
void conv_transpose2d_backward_weight(const T* gout, const T* in, T* gw,
                                      const ConvGeometry& g) {
    const int OH = g.tconv_out_h(), OW = g.tconv_out_w();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int ci = 0; ci < g.in_ch; ++ci) {
        for (int co = 0; co < g.out_ch; ++co) {
            T* gw_plane = gw + (static_cast<int64_t>(ci) * g.out_ch + co) * g.k_h * g.k_w;
            for (int kh = 0; kh < g.k_h; ++kh) {
                for (int kw = 0; kw < g.k_w; ++kw) {
                    T acc = T(0);
                    for (int b = 0; b < g.batch; ++b) {
                        const T* in_plane =
                            in + (static_cast<int64_t>(b) * g.in_ch + ci) * g.in_h * g.in_w;
                        const T* gout_plane =
                            gout + (static_cast<int64_t>(b) * g.out_ch + co) * OH * OW;
                        for (int ih = 0; ih < g.in_h; ++ih) {
                            const int oh = ih * g.stride - g.pad + kh;
                            if (oh < 0 || oh >= OH) continue;
                            for (int iw = 0; iw < g.in_w; ++iw) {
                                const int ow = iw * g.stride - g.pad + kw;
                                if (ow < 0 || ow >= OW) continue;
                                acc += in_plane[ih * g.in_w + iw] * gout_plane[oh * OW + ow];
                            }
                        }
                    }
                    gw_plane[kh * g.k_w + kw] += acc;
                }
            }
        }
    }
}

}  // namespace kernels

namespace reference {

// Serial six-nested-loop convolution, scatter over kernel taps. Structurally
// independent of the gather kernels above.
template <typename T>
void conv2d_forward(const T* in, const T* w, const T* bias, T* out, const ConvGeometry& g) {
    const int OH = g.conv_out_h(), OW = g.conv_out_w();
    for (int64_t i = 0; i < static_cast<int64_t>(g.batch) * g.out_ch * OH * OW; ++i)
        out[i] = T(0);
    for (int b = 0; b < g.batch; ++b)
        for (int co = 0; co < g.out_ch; ++co)
            for (int ci = 0; ci < g.in_ch; ++ci)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow)
                        for (int kh = 0; kh < g.k_h; ++kh)
                            for (int kw = 0; kw < g.k_w; ++kw) {
                                const int ih = oh * g.stride - g.pad + kh;
                                const int iw = ow * g.stride - g.pad + kw;
                                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                                out[((static_cast<int64_t>(b) * g.out_ch + co) * OH + oh) * OW +
                                    ow] +=
                                    in[((static_cast<int64_t>(b) * g.in_ch + ci) * g.in_h + ih) *
                                           g.in_w +
                                       iw] *
                                    w[((static_cast<int64_t>(co) * g.in_ch + ci) * g.k_h + kh) *
                                          g.k_w +
                                      kw];
                            }
    if (bias)
        for (int b = 0; b < g.batch; ++b)
            for (int co = 0; co < g.out_ch; ++co)
                for (int i = 0; i < OH * OW; ++i)
                    out[(static_cast<int64_t>(b) * g.out_ch + co) * OH * OW + i] += bias[co];
}

// Serial transposed convolution in scatter form: every input element stamps
// the kernel into the output.
template <typename T>
void conv_transpose2d_forward(const T* in, const T* w, const T* bias, T* out,
                              const ConvGeometry& g) {
    const int OH = g.tconv_out_h(), OW = g.tconv_out_w();
    for (int64_t i = 0; i < static_cast<int64_t>(g.batch) * g.out_ch * OH * OW; ++i)
        out[i] = T(0);
    for (int b = 0; b < g.batch; ++b)
        for (int ci = 0; ci < g.in_ch; ++ci)
            for (int co = 0; co < g.out_ch; ++co)
                for (int ih = 0; ih < g.in_h; ++ih)
                    for (int iw = 0; iw < g.in_w; ++iw)
                        for (int kh = 0; kh < g.k_h; ++kh)
                            for (int kw = 0; kw < g.k_w; ++kw) {
                                const int oh = ih * g.stride - g.pad + kh;
                                const int ow = iw * g.stride - g.pad + kw;
                                if (oh < 0 || oh >= OH || ow < 0 || ow >= OW) continue;
                                out[((static_cast<int64_t>(b) * g.out_ch + co) * OH + oh) * OW +
                                    ow] +=
                                    in[((static_cast<int64_t>(b) * g.in_ch + ci) * g.in_h + ih) *
                                           g.in_w +
                                       iw] *
                                    w[((static_cast<int64_t>(ci) * g.out_ch + co) * g.k_h + kh) *
                                          g.k_w +
                                      kw];
                            }
    if (bias)
        for (int b = 0; b < g.batch; ++b)
            for (int co = 0; co < g.out_ch; ++co)
                for (int i = 0; i < OH * OW; ++i)
                    out[(static_cast<int64_t>(b) * g.out_ch + co) * OH * OW + i] += bias[co];
}

}  // namespace reference

}  // namespace vaedet
