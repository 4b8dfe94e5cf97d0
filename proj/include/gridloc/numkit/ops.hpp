#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "gridloc/errors.hpp"
#include "gridloc/numkit/tape.hpp"
#include "gridloc/numkit/tensor.hpp"

namespace gridloc::numkit {

struct Conv2dCfg {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
};

// Transposed conv; weight layout is (in_channels, out_channels, kh, kw).
struct ConvT2dCfg {
    int stride = 2;
    int pad = 0;
};

// Two interchangeable convolution engines. 'direct' is the reference loop;
// 'im2col' lowers to a tiled matrix product. conv2d_forward accumulates each
// output in the same order under both (bias first, then taps ascending by
// (channel, ky, kx)), so its results are bit-identical across engines; the
// gradient kernels and the transposed conv group their sums differently and
// agree to rounding only.
enum class ConvBackend { direct, im2col };
ConvBackend conv_backend();
void set_conv_backend(ConvBackend b);

// ---- raw kernels (no tape) -------------------------------------------------

template <typename S>
TensorT<S> conv2d_forward(const TensorT<S>& input, const TensorT<S>& weight,
                          const TensorT<S>& bias, const Conv2dCfg& cfg);

template <typename S>
TensorT<S> conv2d_grad_input(const TensorT<S>& grad_out, const TensorT<S>& weight,
                             std::int64_t in_h, std::int64_t in_w, const Conv2dCfg& cfg);

template <typename S>
TensorT<S> conv2d_grad_weight(const TensorT<S>& input, const TensorT<S>& grad_out,
                              const std::vector<std::int64_t>& weight_shape,
                              const Conv2dCfg& cfg);

template <typename S>
TensorT<S> conv2d_grad_bias(const TensorT<S>& grad_out);

template <typename S>
TensorT<S> conv_transpose2d_forward(const TensorT<S>& input, const TensorT<S>& weight,
                                    const TensorT<S>& bias, const ConvT2dCfg& cfg);

// feature is CHW; points are (x, y) in pixel coordinates of the feature map.
// Out-of-bounds taps contribute zero. Returns (C, P).
template <typename S>
TensorT<S> bilinear_sample_forward(const TensorT<S>& feature,
                                   const std::vector<std::pair<double, double>>& points);

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& logits);

// ---- tape ops ----------------------------------------------------------------

template <typename S>
std::int64_t conv2d(TapeT<S>& tape, std::int64_t input, std::int64_t weight, std::int64_t bias,
                    const Conv2dCfg& cfg);

template <typename S>
std::int64_t conv_transpose2d(TapeT<S>& tape, std::int64_t input, std::int64_t weight,
                              std::int64_t bias, const ConvT2dCfg& cfg);

template <typename S>
std::int64_t relu(TapeT<S>& tape, std::int64_t x);

template <typename S>
std::int64_t add(TapeT<S>& tape, std::int64_t a, std::int64_t b);

template <typename S>
std::int64_t scale(TapeT<S>& tape, std::int64_t x, double factor);

// All inputs must be scalars; result is their sum (ascending argument order).
template <typename S>
std::int64_t sum_scalars(TapeT<S>& tape, const std::vector<std::int64_t>& xs);

// x: rank-1 (in); w: (out, in); b: (out). Returns rank-1 (out).
template <typename S>
std::int64_t linear(TapeT<S>& tape, std::int64_t x, std::int64_t w, std::int64_t b);

template <typename S>
std::int64_t flatten(TapeT<S>& tape, std::int64_t x);

// Same element count, new shape; data order unchanged.
template <typename S>
std::int64_t reshape(TapeT<S>& tape, std::int64_t x, const std::vector<std::int64_t>& shape);

template <typename S>
std::int64_t bilinear_sample(TapeT<S>& tape, std::int64_t feature,
                             const std::vector<std::pair<double, double>>& points);

// x: (N,C,H,W) -> (N, c1-c0, H, W), channels [c0, c1).
template <typename S>
std::int64_t slice_channels(TapeT<S>& tape, std::int64_t x, std::int64_t c0, std::int64_t c1);

// All inputs rank-3 of identical shape (C,H,W) -> (R,C,H,W), R = xs.size().
template <typename S>
std::int64_t stack_rank3(TapeT<S>& tape, const std::vector<std::int64_t>& xs);

// All inputs (N,Ci,H,W) with matching N,H,W -> (N, sum Ci, H, W).
template <typename S>
std::int64_t concat_channels(TapeT<S>& tape, const std::vector<std::int64_t>& xs);

// Mean over elements of max(z,0) - z*t + log(1 + exp(-|z|)). Targets must be
// exactly 0 or 1. Returns a scalar node.
template <typename S>
std::int64_t sigmoid_bce(TapeT<S>& tape, std::int64_t logits, const TensorT<S>& targets);

// Weighted sum of the per-element losses above; weights carry any averaging.
// Elements with weight 0 are ignored entirely (their targets may be anything).
// Weights must be finite and non-negative. Returns a scalar node.
template <typename S>
std::int64_t sigmoid_bce_weighted(TapeT<S>& tape, std::int64_t logits, const TensorT<S>& targets,
                                  const TensorT<S>& weights);

// Sum over elements of 0.5*d^2 (|d| < 1) else |d| - 0.5, d = pred - target.
// Returns a scalar node.
template <typename S>
std::int64_t smooth_l1(TapeT<S>& tape, std::int64_t pred, const TensorT<S>& target);

} // namespace gridloc::numkit
