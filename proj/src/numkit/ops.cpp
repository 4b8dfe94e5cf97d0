#include "gridloc/numkit/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <string>

#include "gridloc/numkit/parallel.hpp"

namespace gridloc::numkit {

namespace {

std::atomic<ConvBackend> g_conv_backend{ConvBackend::im2col};

using i64 = std::int64_t;

i64 conv_out_extent(i64 in, i64 k, int stride, int pad, int dilation) {
    return (in + 2 * pad - static_cast<i64>(dilation) * (k - 1) - 1) / stride + 1;
}

// C[M,N] += A[M,K] * B[K,N], row-major. Each output element starts from the
// prior C value and accumulates its k terms in ascending order, so the result
// is bit-identical to a naive per-output loop regardless of tiling or worker
// count (rows are partitioned, never split).
template <typename S>
void gemm_rows(const S* A, const S* B, S* C, i64 m0, i64 m1, i64 K, i64 N) {
    constexpr i64 JT = 64;
    constexpr i64 IT = 4;
    alignas(64) S acc[IT][JT];
    for (i64 j0 = 0; j0 < N; j0 += JT) {
        const i64 jn = std::min(JT, N - j0);
        i64 i = m0;
        for (; i + IT <= m1; i += IT) {
            for (i64 t = 0; t < IT; ++t)
                for (i64 j = 0; j < jn; ++j) acc[t][j] = C[(i + t) * N + j0 + j];
            for (i64 k = 0; k < K; ++k) {
                const S* brow = B + k * N + j0;
                const S a0 = A[(i + 0) * K + k];
                const S a1 = A[(i + 1) * K + k];
                const S a2 = A[(i + 2) * K + k];
                const S a3 = A[(i + 3) * K + k];
                for (i64 j = 0; j < jn; ++j) {
                    const S bv = brow[j];
                    acc[0][j] += a0 * bv;
                    acc[1][j] += a1 * bv;
                    acc[2][j] += a2 * bv;
                    acc[3][j] += a3 * bv;
                }
            }
            for (i64 t = 0; t < IT; ++t)
                for (i64 j = 0; j < jn; ++j) C[(i + t) * N + j0 + j] = acc[t][j];
        }
        for (; i < m1; ++i) {
            for (i64 j = 0; j < jn; ++j) acc[0][j] = C[i * N + j0 + j];
            for (i64 k = 0; k < K; ++k) {
                const S* brow = B + k * N + j0;
                const S a0 = A[i * K + k];
                for (i64 j = 0; j < jn; ++j) acc[0][j] += a0 * brow[j];
            }
            for (i64 j = 0; j < jn; ++j) C[i * N + j0 + j] = acc[0][j];
        }
    }
}

template <typename S>
void gemm_acc(const S* A, const S* B, S* C, i64 M, i64 K, i64 N) {
    if (M * K * N >= (i64(1) << 20) && max_threads() > 1) {
        parallel_for(M, [&](i64 b, i64 e) { gemm_rows(A, B, C, b, e, K, N); });
    } else {
        gemm_rows(A, B, C, 0, M, K, N);
    }
}

// col[(ic*kh + ky)*kw + kx][p] with p = oy*ow + ox; zeros outside the input.
template <typename S>
void im2col(const S* x, i64 C, i64 H, i64 W, i64 kh, i64 kw, const Conv2dCfg& cfg, i64 oh, i64 ow,
            S* col) {
    const i64 P = oh * ow;
    for (i64 ic = 0; ic < C; ++ic) {
        for (i64 ky = 0; ky < kh; ++ky) {
            for (i64 kx = 0; kx < kw; ++kx) {
                S* dst = col + ((ic * kh + ky) * kw + kx) * P;
                for (i64 oy = 0; oy < oh; ++oy) {
                    const i64 iy = oy * cfg.stride - cfg.pad + ky * cfg.dilation;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst + oy * ow, dst + (oy + 1) * ow, S(0));
                        continue;
                    }
                    const S* src = x + (ic * H + iy) * W;
                    for (i64 ox = 0; ox < ow; ++ox) {
                        const i64 ix = ox * cfg.stride - cfg.pad + kx * cfg.dilation;
                        dst[oy * ow + ox] = (ix >= 0 && ix < W) ? src[ix] : S(0);
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_acc(const S* col, i64 C, i64 H, i64 W, i64 kh, i64 kw, const Conv2dCfg& cfg, i64 oh,
                i64 ow, S* x) {
    const i64 P = oh * ow;
    for (i64 ic = 0; ic < C; ++ic) {
        for (i64 ky = 0; ky < kh; ++ky) {
            for (i64 kx = 0; kx < kw; ++kx) {
                const S* src = col + ((ic * kh + ky) * kw + kx) * P;
                for (i64 oy = 0; oy < oh; ++oy) {
                    const i64 iy = oy * cfg.stride - cfg.pad + ky * cfg.dilation;
                    if (iy < 0 || iy >= H) continue;
                    S* dst = x + (ic * H + iy) * W;
                    for (i64 ox = 0; ox < ow; ++ox) {
                        const i64 ix = ox * cfg.stride - cfg.pad + kx * cfg.dilation;
                        if (ix >= 0 && ix < W) dst[ix] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

template <typename S>
std::vector<S>& scratch_a() {
    thread_local std::vector<S> buf;
    return buf;
}

template <typename S>
std::vector<S>& scratch_b() {
    thread_local std::vector<S> buf;
    return buf;
}

struct ConvDims {
    i64 n, c, h, w, o, kh, kw, oh, ow;
};

template <typename S>
ConvDims check_conv(const TensorT<S>& input, const TensorT<S>& weight, const TensorT<S>* bias,
                    const Conv2dCfg& cfg, const char* op) {
    if (input.rank() != 4) throw ValidationError(std::string(op) + ": input must be NCHW rank-4");
    if (weight.rank() != 4) throw ValidationError(std::string(op) + ": weight must be rank-4");
    if (cfg.stride < 1) throw ValidationError(std::string(op) + ": stride must be >= 1");
    if (cfg.pad < 0) throw ValidationError(std::string(op) + ": padding must be >= 0");
    if (cfg.dilation < 1) throw ValidationError(std::string(op) + ": dilation must be >= 1");
    ConvDims d;
    d.n = input.dim(0);
    d.c = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.o = weight.dim(0);
    d.kh = weight.dim(2);
    d.kw = weight.dim(3);
    if (weight.dim(1) != d.c)
        throw ValidationError(std::string(op) + ": weight in-channels " +
                              std::to_string(weight.dim(1)) + " != input channels " +
                              std::to_string(d.c));
    if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != d.o))
        throw ValidationError(std::string(op) + ": bias extent must equal out-channels " +
                              std::to_string(d.o));
    d.oh = conv_out_extent(d.h, d.kh, cfg.stride, cfg.pad, cfg.dilation);
    d.ow = conv_out_extent(d.w, d.kw, cfg.stride, cfg.pad, cfg.dilation);
    if (d.oh < 1 || d.ow < 1)
        throw ValidationError(std::string(op) + ": kernel does not fit input " +
                              std::to_string(d.h) + "x" + std::to_string(d.w));
    return d;
}

} // namespace

ConvBackend conv_backend() { return g_conv_backend.load(); }
void set_conv_backend(ConvBackend b) { g_conv_backend.store(b); }

template <typename S>
TensorT<S> conv2d_forward(const TensorT<S>& input, const TensorT<S>& weight,
                          const TensorT<S>& bias, const Conv2dCfg& cfg) {
    const ConvDims d = check_conv(input, weight, &bias, cfg, "conv2d");
    TensorT<S> out = TensorT<S>::zeros({d.n, d.o, d.oh, d.ow});
    const i64 P = d.oh * d.ow;
    const i64 K = d.c * d.kh * d.kw;

    if (conv_backend() == ConvBackend::im2col) {
        auto& col = scratch_a<S>();
        col.resize(static_cast<std::size_t>(K * P));
        for (i64 n = 0; n < d.n; ++n) {
            im2col(input.data.data() + n * d.c * d.h * d.w, d.c, d.h, d.w, d.kh, d.kw, cfg, d.oh,
                   d.ow, col.data());
            S* outn = out.data.data() + n * d.o * P;
            for (i64 o = 0; o < d.o; ++o) std::fill(outn + o * P, outn + (o + 1) * P, bias[o]);
            gemm_acc(weight.data.data(), col.data(), outn, d.o, K, P);
        }
        return out;
    }

    for (i64 n = 0; n < d.n; ++n) {
        const S* xn = input.data.data() + n * d.c * d.h * d.w;
        S* outn = out.data.data() + n * d.o * P;
        for (i64 o = 0; o < d.o; ++o) {
            const S* wo = weight.data.data() + o * K;
            for (i64 oy = 0; oy < d.oh; ++oy) {
                for (i64 ox = 0; ox < d.ow; ++ox) {
                    S acc = bias[o];
                    for (i64 ic = 0; ic < d.c; ++ic) {
                        for (i64 ky = 0; ky < d.kh; ++ky) {
                            const i64 iy = oy * cfg.stride - cfg.pad + ky * cfg.dilation;
                            if (iy < 0 || iy >= d.h) continue;
                            for (i64 kx = 0; kx < d.kw; ++kx) {
                                const i64 ix = ox * cfg.stride - cfg.pad + kx * cfg.dilation;
                                if (ix < 0 || ix >= d.w) continue;
                                acc += xn[(ic * d.h + iy) * d.w + ix] *
                                       wo[(ic * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                    outn[(o * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    return out;
}

template <typename S>
TensorT<S> conv2d_grad_input(const TensorT<S>& grad_out, const TensorT<S>& weight, i64 in_h,
                             i64 in_w, const Conv2dCfg& cfg) {
    if (grad_out.rank() != 4 || weight.rank() != 4)
        throw ValidationError("conv2d_grad_input: rank-4 tensors expected");
    if (grad_out.dim(1) != weight.dim(0))
        throw ValidationError("conv2d_grad_input: grad channels " +
                              std::to_string(grad_out.dim(1)) + " != weight out-channels " +
                              std::to_string(weight.dim(0)));
    const i64 n = grad_out.dim(0);
    const i64 o = grad_out.dim(1);
    const i64 oh = grad_out.dim(2);
    const i64 ow = grad_out.dim(3);
    const i64 c = weight.dim(1);
    const i64 kh = weight.dim(2);
    const i64 kw = weight.dim(3);
    const i64 K = c * kh * kw;
    const i64 P = oh * ow;
    TensorT<S> gx = TensorT<S>::zeros({n, c, in_h, in_w});

    if (conv_backend() == ConvBackend::im2col) {
        auto& wt = scratch_b<S>();  // weight^T, (K, O)
        wt.resize(static_cast<std::size_t>(K * o));
        for (i64 oo = 0; oo < o; ++oo)
            for (i64 kk = 0; kk < K; ++kk)
                wt[static_cast<std::size_t>(kk * o + oo)] = weight[oo * K + kk];
        auto& col = scratch_a<S>();
        col.resize(static_cast<std::size_t>(K * P));
        for (i64 nn = 0; nn < n; ++nn) {
            std::fill(col.begin(), col.end(), S(0));
            gemm_acc(wt.data(), grad_out.data.data() + nn * o * P, col.data(), K, o, P);
            col2im_acc(col.data(), c, in_h, in_w, kh, kw, cfg, oh, ow,
                       gx.data.data() + nn * c * in_h * in_w);
        }
        return gx;
    }

    for (i64 nn = 0; nn < n; ++nn) {
        const S* gyn = grad_out.data.data() + nn * o * P;
        S* gxn = gx.data.data() + nn * c * in_h * in_w;
        for (i64 ic = 0; ic < c; ++ic) {
            for (i64 iy = 0; iy < in_h; ++iy) {
                for (i64 ix = 0; ix < in_w; ++ix) {
                    S acc = S(0);
                    for (i64 oo = 0; oo < o; ++oo) {
                        for (i64 ky = 0; ky < kh; ++ky) {
                            const i64 ty = iy + cfg.pad - ky * cfg.dilation;
                            if (ty < 0 || ty % cfg.stride != 0) continue;
                            const i64 oy = ty / cfg.stride;
                            if (oy >= oh) continue;
                            for (i64 kx = 0; kx < kw; ++kx) {
                                const i64 tx = ix + cfg.pad - kx * cfg.dilation;
                                if (tx < 0 || tx % cfg.stride != 0) continue;
                                const i64 ox = tx / cfg.stride;
                                if (ox >= ow) continue;
                                acc += gyn[(oo * oh + oy) * ow + ox] *
                                       weight[((oo * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    gxn[(ic * in_h + iy) * in_w + ix] = acc;
                }
            }
        }
    }
    return gx;
}

template <typename S>
TensorT<S> conv2d_grad_weight(const TensorT<S>& input, const TensorT<S>& grad_out,
                              const std::vector<i64>& weight_shape, const Conv2dCfg& cfg) {
    if (input.rank() != 4 || grad_out.rank() != 4 || weight_shape.size() != 4)
        throw ValidationError("conv2d_grad_weight: rank-4 tensors expected");
    const i64 n = input.dim(0);
    const i64 c = input.dim(1);
    const i64 h = input.dim(2);
    const i64 w = input.dim(3);
    const i64 o = grad_out.dim(1);
    const i64 oh = grad_out.dim(2);
    const i64 ow = grad_out.dim(3);
    const i64 kh = weight_shape[2];
    const i64 kw = weight_shape[3];
    if (weight_shape[0] != o || weight_shape[1] != c)
        throw ValidationError("conv2d_grad_weight: weight shape does not match tensors");
    const i64 K = c * kh * kw;
    const i64 P = oh * ow;
    TensorT<S> gw = TensorT<S>::zeros(weight_shape);

    if (conv_backend() == ConvBackend::im2col) {
        auto& col = scratch_a<S>();
        col.resize(static_cast<std::size_t>(K * P));
        auto& colt = scratch_b<S>();  // (P, K)
        colt.resize(static_cast<std::size_t>(P * K));
        for (i64 nn = 0; nn < n; ++nn) {
            im2col(input.data.data() + nn * c * h * w, c, h, w, kh, kw, cfg, oh, ow, col.data());
            for (i64 kk = 0; kk < K; ++kk)
                for (i64 p = 0; p < P; ++p)
                    colt[static_cast<std::size_t>(p * K + kk)] =
                        col[static_cast<std::size_t>(kk * P + p)];
            gemm_acc(grad_out.data.data() + nn * o * P, colt.data(), gw.data.data(), o, P, K);
        }
        return gw;
    }

    for (i64 nn = 0; nn < n; ++nn) {
        const S* xn = input.data.data() + nn * c * h * w;
        const S* gyn = grad_out.data.data() + nn * o * P;
        for (i64 oo = 0; oo < o; ++oo) {
            for (i64 ic = 0; ic < c; ++ic) {
                for (i64 ky = 0; ky < kh; ++ky) {
                    for (i64 kx = 0; kx < kw; ++kx) {
                        S acc = S(0);
                        for (i64 oy = 0; oy < oh; ++oy) {
                            const i64 iy = oy * cfg.stride - cfg.pad + ky * cfg.dilation;
                            if (iy < 0 || iy >= h) continue;
                            for (i64 ox = 0; ox < ow; ++ox) {
                                const i64 ix = ox * cfg.stride - cfg.pad + kx * cfg.dilation;
                                if (ix < 0 || ix >= w) continue;
                                acc += xn[(ic * h + iy) * w + ix] * gyn[(oo * oh + oy) * ow + ox];
                            }
                        }
                        gw[((oo * c + ic) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    return gw;
}

template <typename S>
TensorT<S> conv2d_grad_bias(const TensorT<S>& grad_out) {
    if (grad_out.rank() != 4) throw ValidationError("conv2d_grad_bias: rank-4 tensor expected");
    const i64 n = grad_out.dim(0);
    const i64 o = grad_out.dim(1);
    const i64 P = grad_out.dim(2) * grad_out.dim(3);
    TensorT<S> gb = TensorT<S>::zeros({o});
    for (i64 nn = 0; nn < n; ++nn)
        for (i64 oo = 0; oo < o; ++oo) {
            const S* src = grad_out.data.data() + (nn * o + oo) * P;
            S acc = S(0);
            for (i64 p = 0; p < P; ++p) acc += src[p];
            gb[oo] += acc;
        }
    return gb;
}

template <typename S>
TensorT<S> conv_transpose2d_forward(const TensorT<S>& input, const TensorT<S>& weight,
                                    const TensorT<S>& bias, const ConvT2dCfg& cfg) {
    if (input.rank() != 4) throw ValidationError("conv_transpose2d: input must be NCHW rank-4");
    if (weight.rank() != 4)
        throw ValidationError("conv_transpose2d: weight must be rank-4 (in,out,kh,kw)");
    if (cfg.stride != 1 && cfg.stride != 2)
        throw ValidationError("conv_transpose2d: stride must be 1 or 2");
    if (cfg.pad < 0) throw ValidationError("conv_transpose2d: padding must be >= 0");
    const i64 n = input.dim(0);
    const i64 c = input.dim(1);
    const i64 h = input.dim(2);
    const i64 w = input.dim(3);
    if (weight.dim(0) != c)
        throw ValidationError("conv_transpose2d: weight in-channels " +
                              std::to_string(weight.dim(0)) + " != input channels " +
                              std::to_string(c));
    const i64 o = weight.dim(1);
    const i64 kh = weight.dim(2);
    const i64 kw = weight.dim(3);
    if (bias.rank() != 1 || bias.dim(0) != o)
        throw ValidationError("conv_transpose2d: bias extent must equal out-channels " +
                              std::to_string(o));
    const i64 oh = (h - 1) * cfg.stride - 2 * cfg.pad + kh;
    const i64 ow = (w - 1) * cfg.stride - 2 * cfg.pad + kw;
    if (oh < 1 || ow < 1) throw ValidationError("conv_transpose2d: empty output");
    const Conv2dCfg cc{cfg.stride, cfg.pad, 1};

    if (conv_backend() == ConvBackend::im2col) {
        // The transposed conv is exactly conv2d's input gradient when the
        // weight is read as (out=c, in=o, kh, kw); the bias goes on afterwards.
        TensorT<S> out = conv2d_grad_input(input, weight, oh, ow, cc);
        const i64 P = oh * ow;
        for (i64 nn = 0; nn < n; ++nn)
            for (i64 oo = 0; oo < o; ++oo) {
                S* dst = out.data.data() + (nn * o + oo) * P;
                const S bv = bias[oo];
                for (i64 p = 0; p < P; ++p) dst[p] += bv;
            }
        return out;
    }

    TensorT<S> out = TensorT<S>::zeros({n, o, oh, ow});
    for (i64 nn = 0; nn < n; ++nn) {
        const S* xn = input.data.data() + nn * c * h * w;
        S* outn = out.data.data() + nn * o * oh * ow;
        for (i64 oo = 0; oo < o; ++oo) {
            for (i64 oy = 0; oy < oh; ++oy) {
                for (i64 ox = 0; ox < ow; ++ox) {
                    S acc = bias[oo];
                    for (i64 ic = 0; ic < c; ++ic) {
                        for (i64 ky = 0; ky < kh; ++ky) {
                            const i64 ty = oy + cfg.pad - ky;
                            if (ty < 0 || ty % cfg.stride != 0) continue;
                            const i64 iy = ty / cfg.stride;
                            if (iy >= h) continue;
                            for (i64 kx = 0; kx < kw; ++kx) {
                                const i64 tx = ox + cfg.pad - kx;
                                if (tx < 0 || tx % cfg.stride != 0) continue;
                                const i64 ix = tx / cfg.stride;
                                if (ix >= w) continue;
                                acc += xn[(ic * h + iy) * w + ix] *
                                       weight[((ic * o + oo) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    outn[(oo * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    return out;
}

template <typename S>
TensorT<S> bilinear_sample_forward(const TensorT<S>& feature,
                                   const std::vector<std::pair<double, double>>& points) {
    if (feature.rank() != 3) throw ValidationError("bilinear_sample: feature must be CHW rank-3");
    const i64 c = feature.dim(0);
    const i64 h = feature.dim(1);
    const i64 w = feature.dim(2);
    const i64 np = static_cast<i64>(points.size());
    TensorT<S> out = TensorT<S>::zeros({c, np});
    for (i64 p = 0; p < np; ++p) {
        const double x = points[static_cast<std::size_t>(p)].first;
        const double y = points[static_cast<std::size_t>(p)].second;
        const i64 x0 = static_cast<i64>(std::floor(x));
        const i64 y0 = static_cast<i64>(std::floor(y));
        const double fx = x - static_cast<double>(x0);
        const double fy = y - static_cast<double>(y0);
        const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
        const i64 xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const i64 ys[4] = {y0, y0, y0 + 1, y0 + 1};
        for (i64 ic = 0; ic < c; ++ic) {
            double acc = 0.0;
            for (int t = 0; t < 4; ++t) {
                if (xs[t] < 0 || xs[t] >= w || ys[t] < 0 || ys[t] >= h) continue;
                acc += ws[t] * static_cast<double>(feature[(ic * h + ys[t]) * w + xs[t]]);
            }
            out[ic * np + p] = static_cast<S>(acc);
        }
    }
    return out;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& logits) {
    TensorT<S> out = TensorT<S>::zeros(logits.shape);
    for (i64 i = 0; i < logits.numel(); ++i) {
        const double z = static_cast<double>(logits[i]);
        out[i] = static_cast<S>(1.0 / (1.0 + std::exp(-z)));
    }
    return out;
}

// ---- tape ops ----------------------------------------------------------------

template <typename S>
i64 conv2d(TapeT<S>& tape, i64 input, i64 weight, i64 bias, const Conv2dCfg& cfg) {
    TensorT<S> out = conv2d_forward(tape.value(input), tape.value(weight), tape.value(bias), cfg);
    const i64 in_h = tape.value(input).dim(2);
    const i64 in_w = tape.value(input).dim(3);
    const std::vector<i64> wshape = tape.value(weight).shape;
    return tape.append(
        std::move(out),
        [input, weight, bias, cfg, in_h, in_w, wshape](TapeT<S>& t, i64 self) {
            const TensorT<S> gy = t.grad(self);
            t.accum_grad(input, conv2d_grad_input(gy, t.value(weight), in_h, in_w, cfg));
            t.accum_grad(weight, conv2d_grad_weight(t.value(input), gy, wshape, cfg));
            t.accum_grad(bias, conv2d_grad_bias(gy));
        },
        "conv2d");
}

template <typename S>
i64 conv_transpose2d(TapeT<S>& tape, i64 input, i64 weight, i64 bias, const ConvT2dCfg& cfg) {
    TensorT<S> out =
        conv_transpose2d_forward(tape.value(input), tape.value(weight), tape.value(bias), cfg);
    const std::vector<i64> wshape = tape.value(weight).shape;
    const Conv2dCfg cc{cfg.stride, cfg.pad, 1};
    return tape.append(
        std::move(out),
        [input, weight, bias, cc, wshape](TapeT<S>& t, i64 self) {
            const TensorT<S> gy = t.grad(self);
            // Adjoint of conv2d_grad_input: the input gradient is a plain
            // conv2d of gy with the same (in,out,kh,kw) weight, and the weight
            // gradient swaps the data/grad roles.
            TensorT<S> zb = TensorT<S>::zeros({wshape[0]});
            t.accum_grad(input, conv2d_forward(gy, t.value(weight), zb, cc));
            t.accum_grad(weight, conv2d_grad_weight(gy, t.value(input), wshape, cc));
            t.accum_grad(bias, conv2d_grad_bias(gy));
        },
        "conv_transpose2d");
}

template <typename S>
i64 relu(TapeT<S>& tape, i64 x) {
    const TensorT<S>& xv = tape.value(x);
    TensorT<S> out = TensorT<S>::zeros(xv.shape);
    for (i64 i = 0; i < xv.numel(); ++i) out[i] = xv[i] > S(0) ? xv[i] : S(0);
    return tape.append(std::move(out),
                       [x](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           const TensorT<S>& xv = t.value(x);
                           TensorT<S>& gx = t.grad(x);
                           for (i64 i = 0; i < gy.numel(); ++i)
                               if (xv[i] > S(0)) gx[i] += gy[i];
                       },
                       "relu");
}

template <typename S>
i64 add(TapeT<S>& tape, i64 a, i64 b) {
    const TensorT<S>& av = tape.value(a);
    const TensorT<S>& bv = tape.value(b);
    if (!av.same_shape(bv))
        throw ValidationError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    TensorT<S> out = TensorT<S>::zeros(av.shape);
    for (i64 i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    return tape.append(std::move(out),
                       [a, b](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           t.accum_grad(a, gy);
                           t.accum_grad(b, gy);
                       },
                       "add");
}

template <typename S>
i64 scale(TapeT<S>& tape, i64 x, double factor) {
    const TensorT<S>& xv = tape.value(x);
    const S f = static_cast<S>(factor);
    TensorT<S> out = TensorT<S>::zeros(xv.shape);
    for (i64 i = 0; i < xv.numel(); ++i) out[i] = xv[i] * f;
    return tape.append(std::move(out),
                       [x, f](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           TensorT<S>& gx = t.grad(x);
                           for (i64 i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * f;
                       },
                       "scale");
}

template <typename S>
i64 sum_scalars(TapeT<S>& tape, const std::vector<i64>& xs) {
    if (xs.empty()) throw ValidationError("sum_scalars: at least one input required");
    S acc = S(0);
    for (i64 id : xs) {
        const TensorT<S>& v = tape.value(id);
        if (v.numel() != 1)
            throw ValidationError("sum_scalars: input is not a scalar, shape " + v.shape_str());
        acc += v[0];
    }
    std::vector<i64> ids = xs;
    return tape.append(TensorT<S>::scalar(acc),
                       [ids](TapeT<S>& t, i64 self) {
                           const S g = t.grad(self)[0];
                           for (i64 id : ids) t.grad(id)[0] += g;
                       },
                       "sum_scalars");
}

template <typename S>
i64 linear(TapeT<S>& tape, i64 x, i64 w, i64 b) {
    const TensorT<S>& xv = tape.value(x);
    const TensorT<S>& wv = tape.value(w);
    const TensorT<S>& bv = tape.value(b);
    if (xv.rank() != 1 || wv.rank() != 2 || bv.rank() != 1)
        throw ValidationError("linear: expected x rank-1, w rank-2, b rank-1");
    const i64 in = xv.dim(0);
    const i64 out_n = wv.dim(0);
    if (wv.dim(1) != in)
        throw ValidationError("linear: w columns " + std::to_string(wv.dim(1)) + " != x extent " +
                              std::to_string(in));
    if (bv.dim(0) != out_n) throw ValidationError("linear: bias extent mismatch");
    TensorT<S> out = TensorT<S>::zeros({out_n});
    for (i64 o = 0; o < out_n; ++o) {
        S acc = bv[o];
        for (i64 i = 0; i < in; ++i) acc += wv[o * in + i] * xv[i];
        out[o] = acc;
    }
    return tape.append(std::move(out),
                       [x, w, b, in, out_n](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           const TensorT<S>& xv = t.value(x);
                           const TensorT<S>& wv = t.value(w);
                           TensorT<S>& gx = t.grad(x);
                           TensorT<S>& gw = t.grad(w);
                           TensorT<S>& gb = t.grad(b);
                           for (i64 o = 0; o < out_n; ++o) {
                               const S g = gy[o];
                               gb[o] += g;
                               for (i64 i = 0; i < in; ++i) {
                                   gw[o * in + i] += g * xv[i];
                                   gx[i] += g * wv[o * in + i];
                               }
                           }
                       },
                       "linear");
}

template <typename S>
i64 flatten(TapeT<S>& tape, i64 x) {
    const TensorT<S>& xv = tape.value(x);
    TensorT<S> out = xv;
    out.shape = {xv.numel()};
    return tape.append(std::move(out),
                       [x](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           TensorT<S>& gx = t.grad(x);
                           for (i64 i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
                       },
                       "flatten");
}

template <typename S>
i64 reshape(TapeT<S>& tape, i64 x, const std::vector<i64>& shape) {
    const TensorT<S>& xv = tape.value(x);
    if (TensorT<S>::numel_of(shape) != xv.numel())
        throw ValidationError("reshape: element count mismatch, " + xv.shape_str() + " -> " +
                              std::to_string(TensorT<S>::numel_of(shape)) + " elements");
    TensorT<S> out = xv;
    out.shape = shape;
    return tape.append(std::move(out),
                       [x](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           TensorT<S>& gx = t.grad(x);
                           for (i64 i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
                       },
                       "reshape");
}

template <typename S>
i64 bilinear_sample(TapeT<S>& tape, i64 feature,
                    const std::vector<std::pair<double, double>>& points) {
    TensorT<S> out = bilinear_sample_forward(tape.value(feature), points);
    const std::vector<std::pair<double, double>> pts = points;
    return tape.append(
        std::move(out),
        [feature, pts](TapeT<S>& t, i64 self) {
            const TensorT<S>& gy = t.grad(self);
            const TensorT<S>& fv = t.value(feature);
            TensorT<S>& gf = t.grad(feature);
            const i64 c = fv.dim(0);
            const i64 h = fv.dim(1);
            const i64 w = fv.dim(2);
            const i64 np = static_cast<i64>(pts.size());
            for (i64 p = 0; p < np; ++p) {
                const double x = pts[static_cast<std::size_t>(p)].first;
                const double y = pts[static_cast<std::size_t>(p)].second;
                const i64 x0 = static_cast<i64>(std::floor(x));
                const i64 y0 = static_cast<i64>(std::floor(y));
                const double fx = x - static_cast<double>(x0);
                const double fy = y - static_cast<double>(y0);
                const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
                const i64 xs[4] = {x0, x0 + 1, x0, x0 + 1};
                const i64 ys[4] = {y0, y0, y0 + 1, y0 + 1};
                for (i64 ic = 0; ic < c; ++ic) {
                    const S g = gy[ic * np + p];
                    for (int tap = 0; tap < 4; ++tap) {
                        if (xs[tap] < 0 || xs[tap] >= w || ys[tap] < 0 || ys[tap] >= h) continue;
                        gf[(ic * h + ys[tap]) * w + xs[tap]] += static_cast<S>(ws[tap]) * g;
                    }
                }
            }
        },
        "bilinear_sample");
}

template <typename S>
i64 slice_channels(TapeT<S>& tape, i64 x, i64 c0, i64 c1) {
    const TensorT<S>& xv = tape.value(x);
    if (xv.rank() != 4) throw ValidationError("slice_channels: NCHW rank-4 tensor expected");
    const i64 n = xv.dim(0);
    const i64 c = xv.dim(1);
    const i64 hw = xv.dim(2) * xv.dim(3);
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw ValidationError("slice_channels: bad range [" + std::to_string(c0) + ", " +
                              std::to_string(c1) + ") for " + std::to_string(c) + " channels");
    TensorT<S> out = TensorT<S>::zeros({n, c1 - c0, xv.dim(2), xv.dim(3)});
    for (i64 nn = 0; nn < n; ++nn)
        for (i64 cc = c0; cc < c1; ++cc)
            std::copy(xv.data.begin() + (nn * c + cc) * hw,
                      xv.data.begin() + (nn * c + cc + 1) * hw,
                      out.data.begin() + (nn * (c1 - c0) + (cc - c0)) * hw);
    return tape.append(std::move(out),
                       [x, c0, c1, n, c, hw](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           TensorT<S>& gx = t.grad(x);
                           for (i64 nn = 0; nn < n; ++nn)
                               for (i64 cc = c0; cc < c1; ++cc) {
                                   const S* src =
                                       gy.data.data() + (nn * (c1 - c0) + (cc - c0)) * hw;
                                   S* dst = gx.data.data() + (nn * c + cc) * hw;
                                   for (i64 i = 0; i < hw; ++i) dst[i] += src[i];
                               }
                       },
                       "slice_channels");
}

template <typename S>
i64 concat_channels(TapeT<S>& tape, const std::vector<i64>& xs) {
    if (xs.empty()) throw ValidationError("concat_channels: at least one input required");
    const TensorT<S>& first = tape.value(xs[0]);
    if (first.rank() != 4) throw ValidationError("concat_channels: NCHW rank-4 tensors expected");
    const i64 n = first.dim(0);
    const i64 h = first.dim(2);
    const i64 w = first.dim(3);
    i64 ctot = 0;
    for (i64 id : xs) {
        const TensorT<S>& v = tape.value(id);
        if (v.rank() != 4 || v.dim(0) != n || v.dim(2) != h || v.dim(3) != w)
            throw ValidationError("concat_channels: input shape mismatch " + v.shape_str());
        ctot += v.dim(1);
    }
    TensorT<S> out = TensorT<S>::zeros({n, ctot, h, w});
    const i64 hw = h * w;
    i64 coff = 0;
    for (i64 id : xs) {
        const TensorT<S>& v = tape.value(id);
        const i64 ci = v.dim(1);
        for (i64 nn = 0; nn < n; ++nn)
            std::copy(v.data.begin() + nn * ci * hw, v.data.begin() + (nn + 1) * ci * hw,
                      out.data.begin() + (nn * ctot + coff) * hw);
        coff += ci;
    }
    std::vector<i64> ids = xs;
    return tape.append(std::move(out),
                       [ids, n, ctot, hw](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           i64 coff = 0;
                           for (i64 id : ids) {
                               TensorT<S>& gx = t.grad(id);
                               const i64 ci = t.value(id).dim(1);
                               for (i64 nn = 0; nn < n; ++nn) {
                                   const S* src = gy.data.data() + (nn * ctot + coff) * hw;
                                   S* dst = gx.data.data() + nn * ci * hw;
                                   for (i64 i = 0; i < ci * hw; ++i) dst[i] += src[i];
                               }
                               coff += ci;
                           }
                       },
                       "concat_channels");
}

template <typename S>
i64 stack_rank3(TapeT<S>& tape, const std::vector<i64>& xs) {
    if (xs.empty()) throw ValidationError("stack_rank3: at least one input required");
    const TensorT<S>& first = tape.value(xs[0]);
    if (first.rank() != 3) throw ValidationError("stack_rank3: rank-3 tensors expected");
    const i64 m = first.numel();
    for (i64 id : xs)
        if (tape.value(id).shape != first.shape)
            throw ValidationError("stack_rank3: input shape mismatch " +
                                  tape.value(id).shape_str());
    TensorT<S> out = TensorT<S>::zeros(
        {static_cast<i64>(xs.size()), first.dim(0), first.dim(1), first.dim(2)});
    for (std::size_t r = 0; r < xs.size(); ++r) {
        const TensorT<S>& v = tape.value(xs[r]);
        std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<i64>(r) * m);
    }
    std::vector<i64> ids = xs;
    return tape.append(std::move(out),
                       [ids, m](TapeT<S>& t, i64 self) {
                           const TensorT<S>& gy = t.grad(self);
                           for (std::size_t r = 0; r < ids.size(); ++r) {
                               TensorT<S>& gx = t.grad(ids[r]);
                               const S* src = gy.data.data() + static_cast<i64>(r) * m;
                               for (i64 i = 0; i < m; ++i) gx[i] += src[i];
                           }
                       },
                       "stack_rank3");
}

template <typename S>
i64 sigmoid_bce(TapeT<S>& tape, i64 logits, const TensorT<S>& targets) {
    const TensorT<S>& zv = tape.value(logits);
    if (!zv.same_shape(targets))
        throw ValidationError("sigmoid_bce: logits " + zv.shape_str() + " vs targets " +
                              targets.shape_str());
    const i64 n = zv.numel();
    if (n == 0) throw ValidationError("sigmoid_bce: empty input");
    double acc = 0.0;
    for (i64 i = 0; i < n; ++i) {
        const S t = targets[i];
        if (t != S(0) && t != S(1))
            throw ValidationError("sigmoid_bce: targets must be exactly 0 or 1");
        const double z = static_cast<double>(zv[i]);
        acc += std::max(z, 0.0) - z * static_cast<double>(t) + std::log1p(std::exp(-std::abs(z)));
    }
    TensorT<S> tcopy = targets;
    return tape.append(
        TensorT<S>::scalar(static_cast<S>(acc / static_cast<double>(n))),
        [logits, tcopy, n](TapeT<S>& t, i64 self) {
            const S g = t.grad(self)[0];
            const TensorT<S>& zv = t.value(logits);
            TensorT<S>& gz = t.grad(logits);
            const double inv = 1.0 / static_cast<double>(n);
            for (i64 i = 0; i < n; ++i) {
                const double z = static_cast<double>(zv[i]);
                const double s = 1.0 / (1.0 + std::exp(-z));
                gz[i] += static_cast<S>((s - static_cast<double>(tcopy[i])) * inv) * g;
            }
        },
        "sigmoid_bce");
}

template <typename S>
i64 sigmoid_bce_weighted(TapeT<S>& tape, i64 logits, const TensorT<S>& targets,
                         const TensorT<S>& weights) {
    const TensorT<S>& zv = tape.value(logits);
    if (!zv.same_shape(targets) || !zv.same_shape(weights))
        throw ValidationError("sigmoid_bce_weighted: logits " + zv.shape_str() + " vs targets " +
                              targets.shape_str() + " vs weights " + weights.shape_str());
    const i64 n = zv.numel();
    if (n == 0) throw ValidationError("sigmoid_bce_weighted: empty input");
    double acc = 0.0;
    for (i64 i = 0; i < n; ++i) {
        const double w = static_cast<double>(weights[i]);
        if (!std::isfinite(w) || w < 0.0)
            throw ValidationError("sigmoid_bce_weighted: weights must be finite and >= 0");
        if (w == 0.0) continue;
        const S t = targets[i];
        if (t != S(0) && t != S(1))
            throw ValidationError("sigmoid_bce_weighted: targets must be exactly 0 or 1");
        const double z = static_cast<double>(zv[i]);
        acc += w * (std::max(z, 0.0) - z * static_cast<double>(t) +
                    std::log1p(std::exp(-std::abs(z))));
    }
    TensorT<S> tcopy = targets;
    TensorT<S> wcopy = weights;
    return tape.append(
        TensorT<S>::scalar(static_cast<S>(acc)),
        [logits, tcopy, wcopy, n](TapeT<S>& t, i64 self) {
            const S g = t.grad(self)[0];
            const TensorT<S>& zv = t.value(logits);
            TensorT<S>& gz = t.grad(logits);
            for (i64 i = 0; i < n; ++i) {
                const double w = static_cast<double>(wcopy[i]);
                if (w == 0.0) continue;
                const double z = static_cast<double>(zv[i]);
                const double s = 1.0 / (1.0 + std::exp(-z));
                gz[i] += static_cast<S>(w * (s - static_cast<double>(tcopy[i]))) * g;
            }
        },
        "sigmoid_bce_weighted");
}

template <typename S>
i64 smooth_l1(TapeT<S>& tape, i64 pred, const TensorT<S>& target) {
    const TensorT<S>& pv = tape.value(pred);
    if (!pv.same_shape(target))
        throw ValidationError("smooth_l1: pred " + pv.shape_str() + " vs target " +
                              target.shape_str());
    const i64 n = pv.numel();
    double acc = 0.0;
    for (i64 i = 0; i < n; ++i) {
        const double d = static_cast<double>(pv[i]) - static_cast<double>(target[i]);
        const double a = std::abs(d);
        acc += a < 1.0 ? 0.5 * d * d : a - 0.5;
    }
    TensorT<S> tcopy = target;
    return tape.append(TensorT<S>::scalar(static_cast<S>(acc)),
                       [pred, tcopy, n](TapeT<S>& t, i64 self) {
                           const S g = t.grad(self)[0];
                           const TensorT<S>& pv = t.value(pred);
                           TensorT<S>& gp = t.grad(pred);
                           for (i64 i = 0; i < n; ++i) {
                               const double d = static_cast<double>(pv[i]) -
                                                static_cast<double>(tcopy[i]);
                               const double slope = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
                               gp[i] += static_cast<S>(slope) * g;
                           }
                       },
                       "smooth_l1");
}

// ---- explicit instantiations ---------------------------------------------------

#define GRIDLOC_OPS_INSTANTIATE(S)                                                              \
    template TensorT<S> conv2d_forward<S>(const TensorT<S>&, const TensorT<S>&,                 \
                                          const TensorT<S>&, const Conv2dCfg&);                 \
    template TensorT<S> conv2d_grad_input<S>(const TensorT<S>&, const TensorT<S>&, i64, i64,    \
                                             const Conv2dCfg&);                                 \
    template TensorT<S> conv2d_grad_weight<S>(const TensorT<S>&, const TensorT<S>&,             \
                                              const std::vector<i64>&, const Conv2dCfg&);       \
    template TensorT<S> conv2d_grad_bias<S>(const TensorT<S>&);                                 \
    template TensorT<S> conv_transpose2d_forward<S>(const TensorT<S>&, const TensorT<S>&,       \
                                                    const TensorT<S>&, const ConvT2dCfg&);      \
    template TensorT<S> bilinear_sample_forward<S>(                                             \
        const TensorT<S>&, const std::vector<std::pair<double, double>>&);                      \
    template TensorT<S> sigmoid<S>(const TensorT<S>&);                                          \
    template i64 conv2d<S>(TapeT<S>&, i64, i64, i64, const Conv2dCfg&);                         \
    template i64 conv_transpose2d<S>(TapeT<S>&, i64, i64, i64, const ConvT2dCfg&);              \
    template i64 relu<S>(TapeT<S>&, i64);                                                       \
    template i64 add<S>(TapeT<S>&, i64, i64);                                                   \
    template i64 scale<S>(TapeT<S>&, i64, double);                                              \
    template i64 sum_scalars<S>(TapeT<S>&, const std::vector<i64>&);                            \
    template i64 linear<S>(TapeT<S>&, i64, i64, i64);                                           \
    template i64 flatten<S>(TapeT<S>&, i64);                                                    \
    template i64 reshape<S>(TapeT<S>&, i64, const std::vector<i64>&);                          \
    template i64 bilinear_sample<S>(TapeT<S>&, i64,                                             \
                                    const std::vector<std::pair<double, double>>&);             \
    template i64 slice_channels<S>(TapeT<S>&, i64, i64, i64);                                   \
    template i64 concat_channels<S>(TapeT<S>&, const std::vector<i64>&);                        \
    template i64 stack_rank3<S>(TapeT<S>&, const std::vector<i64>&);                            \
    template i64 sigmoid_bce<S>(TapeT<S>&, i64, const TensorT<S>&);                             \
    template i64 sigmoid_bce_weighted<S>(TapeT<S>&, i64, const TensorT<S>&, const TensorT<S>&); \
    template i64 smooth_l1<S>(TapeT<S>&, i64, const TensorT<S>&);

GRIDLOC_OPS_INSTANTIATE(float)
GRIDLOC_OPS_INSTANTIATE(double)

#undef GRIDLOC_OPS_INSTANTIATE

} // namespace gridloc::numkit
