#pragma once

#include <optional>
#include <vector>

#include "lightseg/tensor.hpp"

namespace lightseg {

struct Conv2dOpts {
  int stride_h = 1, stride_w = 1;
  int dilation_h = 1, dilation_w = 1;
  int pad_h = 0, pad_w = 0;

  static Conv2dOpts same3x3(int stride, int dilation) {
    // "same" interior padding for a 3x3 kernel: pad = dilation
    return {stride, stride, dilation, dilation, dilation, dilation};
  }
};

enum class BnMode { train, infer };

// 2-D convolution over (N,C,H,W) with zero padding.
// weight is (Cout,Cin,kh,kw); bias, when present, is (1,Cout,1,1).
// Differentiable w.r.t. input, weight and bias.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>* bias, const Conv2dOpts& opts);

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Conv2dOpts& opts) {
  return conv2d(tape, input, weight, static_cast<const Tensor<T>*>(nullptr), opts);
}

// Batch normalization. gamma/beta/running stats are (1,C,1,1). Train mode
// normalizes with batch statistics (biased variance) and updates the running
// stats in place via an exponential moving average; infer mode uses the
// running stats. Differentiable w.r.t. input, gamma and beta.
template <typename T>
Tensor<T> batchnorm2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma,
                      const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, BnMode mode, T momentum, T epsilon);

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& input);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> maxpool2d(Tape<T>& tape, const Tensor<T>& input, int kernel, int stride,
                    int pad);

// Bilinear upsampling by an integer factor, half-pixel-center convention:
// output sample i reads input coordinate (i + 0.5)/factor - 0.5, clamped.
template <typename T>
Tensor<T> bilinear_upsample(Tape<T>& tape, const Tensor<T>& input, int factor);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& input, T constant);

// Adds a constant array elementwise (no gradient to the constant).
template <typename T>
Tensor<T> shift(Tape<T>& tape, const Tensor<T>& input, std::vector<T> constant);

// Softmax over the channel axis of a (1,C,1,1) tensor.
template <typename T>
Tensor<T> channel_softmax(Tape<T>& tape, const Tensor<T>& input);

// out = sum_i weights[i] * branches[i]; weights is (1,K,1,1). The reduction
// runs in branch order; exact-zero weights contribute nothing.
template <typename T>
Tensor<T> gate_combine(Tape<T>& tape, const Tensor<T>& weights,
                       const std::vector<Tensor<T>>& branches);

template <typename T>
Tensor<T> reduce_sum(Tape<T>& tape, const Tensor<T>& input);

// Scalar dot product with a constant weight vector (test utility).
template <typename T>
Tensor<T> dot_const(Tape<T>& tape, const Tensor<T>& input, std::vector<T> weights);

// Mean per-pixel negative log-softmax over non-ignored pixels.
// logits (N,C,H,W), targets (N,H,W) with values in [0,C) or == ignore_label.
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                const IntMask& targets,
                                std::optional<int> ignore_label = std::nullopt);

// Throws numeric_error when any element is NaN or infinite.
template <typename T>
void check_finite(const Tensor<T>& t, const char* what);

}  // namespace lightseg
