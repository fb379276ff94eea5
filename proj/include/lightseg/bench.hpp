#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "lightseg/image.hpp"
#include "lightseg/network.hpp"

namespace lightseg {

struct LatencyReport {
  std::string variant;
  std::array<std::int64_t, 4> input_shape{};
  int warmup = 0;
  int iters = 0;
  std::vector<double> times_ms;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  std::int64_t flops = 0;  // analytic multiply-accumulate count
  int threads = 1;

  double fps() const { return 1000.0 / median_ms; }
  std::string to_json() const;
};

// Times individual infer-mode forward passes on a fixed random input after
// warmup. warmup must be >= 5. Rejects non-finite network output.
LatencyReport benchmark(const NetworkSpec& spec, ParamStore<float>& params,
                        Shape4 input, int warmup = 10, int iters = 100,
                        std::uint64_t input_seed = 7);

// Published reports require iters >= 30.
void write_latency_report(const std::filesystem::path& path,
                          const LatencyReport& report);

// Analytic multiply-accumulate count of one forward pass: Cout*Cin*kh*kw*OH*OW
// per convolution plus N*C*H*W per batch-norm layer.
std::int64_t flop_count(const NetworkSpec& spec, Shape4 input);

// MAC count for a single convolution under "same interior" padding
// (pad = dilation*(k-1)/2).
std::int64_t conv_macs(std::int64_t cin, std::int64_t cout, std::int64_t kernel,
                       std::int64_t stride, std::int64_t dilation, std::int64_t h,
                       std::int64_t w);

// Class-colored mask alpha-blended over the image (class 0 stays untouched).
ImageU8 render_overlay(const Tensor<float>& image, const IntMask& pred,
                       float alpha = 0.5f);

struct TableRow {
  std::string model;
  double iou = 0.0;
  double time_ms = 0.0;
};

// Aligned text table: Model | IOU | Time.
std::string format_results_table(const std::vector<TableRow>& rows);

}  // namespace lightseg
