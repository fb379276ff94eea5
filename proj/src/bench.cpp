#include "lightseg/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "lightseg/kernels.hpp"
#include "lightseg/ops.hpp"

namespace lightseg {

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const std::size_t idx = std::min(
      v.size() - 1,
      static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())) - 1));
  return v[idx];
}

}  // namespace

LatencyReport benchmark(const NetworkSpec& spec, ParamStore<float>& params,
                        Shape4 input, int warmup, int iters,
                        std::uint64_t input_seed) {
  if (warmup < 5) {
    throw std::invalid_argument("benchmark: warmup must be >= 5, got " +
                                std::to_string(warmup));
  }
  if (iters < 1) throw std::invalid_argument("benchmark: iters must be >= 1");

  std::mt19937_64 rng(input_seed);
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  std::vector<float> data(static_cast<std::size_t>(input.numel()));
  for (auto& v : data) v = uni(rng);
  const Tensor<float> image(input, std::move(data));

  const auto run_once = [&]() {
    Tape<float> tape(false);
    return forward_segmentation(tape, spec, params, image, BnMode::infer);
  };
  for (int i = 0; i < warmup; ++i) run_once();

  LatencyReport rep;
  rep.variant = to_string(spec.variant) + (spec.converted ? " (dilated)" : "");
  rep.input_shape = {input.n, input.c, input.h, input.w};
  rep.warmup = warmup;
  rep.iters = iters;
  rep.threads = kern::num_threads();
  rep.times_ms.reserve(iters);
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor<float> out = run_once();
    const auto t1 = std::chrono::steady_clock::now();
    if (i == 0) check_finite(out, "benchmark forward output");
    rep.times_ms.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double sum = 0.0;
  for (const auto t : rep.times_ms) sum += t;
  rep.mean_ms = sum / iters;
  rep.median_ms = percentile(rep.times_ms, 0.5);
  rep.p95_ms = percentile(rep.times_ms, 0.95);
  rep.flops = flop_count(spec, input);
  return rep;
}

std::string LatencyReport::to_json() const {
  nlohmann::json j;
  j["variant"] = variant;
  j["input_shape"] = input_shape;
  j["warmup"] = warmup;
  j["iters"] = iters;
  j["mean_ms"] = mean_ms;
  j["median_ms"] = median_ms;
  j["p95_ms"] = p95_ms;
  j["fps"] = fps();
  j["flops"] = flops;
  j["threads"] = threads;
  j["times_ms"] = times_ms;
  j["note"] = "CPU wall time around single forward passes, upsampling head included";
  return j.dump(2);
}

void write_latency_report(const std::filesystem::path& path,
                          const LatencyReport& report) {
  if (report.iters < 30) {
    throw std::invalid_argument("latency report needs iters >= 30, got " +
                                std::to_string(report.iters));
  }
  std::ofstream out(path);
  if (!out) throw data_error("cannot write latency report: " + path.string());
  out << report.to_json() << "\n";
}

// ---------------------------------------------------------------------------

std::int64_t conv_macs(std::int64_t cin, std::int64_t cout, std::int64_t kernel,
                       std::int64_t stride, std::int64_t dilation, std::int64_t h,
                       std::int64_t w) {
  const std::int64_t eff = dilation * (kernel - 1) + 1;
  const std::int64_t pad = dilation * (kernel - 1) / 2;
  const std::int64_t oh = (h + 2 * pad - eff) / stride + 1;
  const std::int64_t ow = (w + 2 * pad - eff) / stride + 1;
  return cout * cin * kernel * kernel * oh * ow;
}

std::int64_t flop_count(const NetworkSpec& spec, Shape4 input) {
  std::int64_t macs = 0;
  const std::int64_t n = input.n;
  std::int64_t h = input.h, w = input.w;

  const auto conv = [&](std::int64_t cin, std::int64_t cout, std::int64_t k,
                        std::int64_t stride, std::int64_t dilation) {
    const std::int64_t eff = dilation * (k - 1) + 1;
    const std::int64_t pad = dilation * (k - 1) / 2;
    const std::int64_t oh = (h + 2 * pad - eff) / stride + 1;
    const std::int64_t ow = (w + 2 * pad - eff) / stride + 1;
    macs += n * cout * cin * k * k * oh * ow;
    h = oh;
    w = ow;
  };
  const auto bn = [&](std::int64_t c) { macs += n * c * h * w; };

  conv(3, spec.stem_channels, 7, 2, 1);
  bn(spec.stem_channels);
  h = (h + 2 - 3) / 2 + 1;  // 3x3/2 max-pool, pad 1
  w = (w + 2 - 3) / 2 + 1;

  for (int s = 0; s < 4; ++s) {
    for (int u = 0; u < 2; ++u) {
      const UnitSpec& unit = spec.stages[s][u];
      const std::int64_t h_in = h, w_in = w;
      conv(unit.in_channels, unit.out_channels, 3, unit.stride, unit.dilation);
      bn(unit.out_channels);
      conv(unit.out_channels, unit.out_channels, 3, 1, unit.dilation);
      bn(unit.out_channels);
      if (unit.has_projection) {
        const std::int64_t h_out = h, w_out = w;
        h = h_in;
        w = w_in;
        conv(unit.in_channels, unit.out_channels, 1, unit.stride, 1);
        bn(unit.out_channels);
        h = h_out;
        w = w_out;
      }
    }
  }
  conv(spec.channel_plan[3], spec.num_classes, 1, 1, 1);
  return macs;
}

// ---------------------------------------------------------------------------

namespace {
// class 0 transparent; classes 1.. use a fixed palette
constexpr std::uint8_t kPalette[][3] = {
    {255, 0, 0}, {0, 255, 0}, {0, 0, 255},  {255, 255, 0},
    {255, 0, 255}, {0, 255, 255}, {255, 128, 0}, {128, 0, 255},
};
}  // namespace

ImageU8 render_overlay(const Tensor<float>& image, const IntMask& pred, float alpha) {
  const auto sh = image.shape();
  if (sh.n != 1 || sh.c != 3) {
    throw std::invalid_argument("render_overlay: image must be (1,3,H,W)");
  }
  if (pred.h != sh.h || pred.w != sh.w || pred.n != 1) {
    throw std::invalid_argument("render_overlay: mask " + std::to_string(pred.h) + "x" +
                                std::to_string(pred.w) + " does not match image " +
                                std::to_string(sh.h) + "x" + std::to_string(sh.w));
  }
  ImageU8 out;
  out.height = static_cast<int>(sh.h);
  out.width = static_cast<int>(sh.w);
  out.channels = 3;
  out.pixels.resize(static_cast<std::size_t>(sh.h) * sh.w * 3);
  const auto data = image.data();
  const std::size_t plane = static_cast<std::size_t>(sh.h) * sh.w;
  constexpr int kPaletteSize = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));
  for (std::int64_t y = 0; y < sh.h; ++y) {
    for (std::int64_t x = 0; x < sh.w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * sh.w + x;
      const int cls = pred.values[p];
      for (int c = 0; c < 3; ++c) {
        const float base = std::clamp(data[c * plane + p], 0.0f, 1.0f) * 255.0f;
        float v = base;
        if (cls > 0) {
          const auto& color = kPalette[(cls - 1) % kPaletteSize];
          v = (1.0f - alpha) * base + alpha * color[c];
        }
        out.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  return out;
}

std::string format_results_table(const std::vector<TableRow>& rows) {
  std::size_t name_width = 5;
  for (const auto& r : rows) name_width = std::max(name_width, r.model.size());
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s | %-6s | %s\n",
                static_cast<int>(name_width), "Model", "IOU", "Time");
  out += line;
  out += std::string(name_width + 22, '-') + "\n";
  for (const auto& r : rows) {
    char iou[32], ms[32];
    if (std::isnan(r.iou)) {
      std::snprintf(iou, sizeof(iou), "-");
    } else {
      std::snprintf(iou, sizeof(iou), "%.4f", r.iou);
    }
    if (std::isnan(r.time_ms)) {
      std::snprintf(ms, sizeof(ms), "-");
    } else {
      std::snprintf(ms, sizeof(ms), "%.2f ms", r.time_ms);
    }
    std::snprintf(line, sizeof(line), "%-*s | %-6s | %s\n",
                  static_cast<int>(name_width), r.model.c_str(), iou, ms);
    out += line;
  }
  return out;
}

}  // namespace lightseg
