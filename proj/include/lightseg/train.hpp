#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lightseg/data.hpp"
#include "lightseg/network.hpp"

namespace lightseg {

namespace detail {
// rng stream salts shared by train() and run_search()
inline constexpr std::uint64_t kSamplerSalt = 0x9E3779B97F4A7C15ULL;
inline constexpr std::uint64_t kCropSalt = 0xD1B54A32D192ED03ULL;
}  // namespace detail

struct TrainConfig {
  float base_lr = 1e-3f;
  float lr_power = 0.9f;
  int batch_size = 32;
  int crop_size = 0;  // 0 trains on full images
  int total_steps = 1;
  int num_classes = 2;
  std::uint64_t seed = 0;
  // crop sizes not divisible by the output stride (e.g. 799) are only
  // accepted with this override; the batch is padded up internally and the
  // padding is excluded from the loss via an ignore label.
  bool allow_unaligned_crop = false;
  bool recompute_bn_after = true;
  int recompute_max_images = 32;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  std::optional<int> ignore_label;
  std::string checkpoint_path;  // empty: no checkpoint written
};

// poly schedule: base_lr * (1 - step/total)^power. step must stay in
// [0, total_steps].
float poly_lr(int step, const TrainConfig& cfg);

// Crops image and mask with one shared uniform offset.
SegSample random_crop(const SegSample& sample, int crop, std::mt19937_64& rng);

struct IouReport {
  std::vector<double> per_class;  // NaN for classes absent from pred and target
  std::vector<std::int64_t> target_pixels;
  double mean = 0.0;
  std::string to_json() const;
};

// Global confusion-matrix accumulator over (target, prediction) pairs.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);
  void add(const IntMask& pred, const IntMask& target);
  IouReport iou() const;
  std::int64_t total() const;

 private:
  int classes_;
  std::vector<std::int64_t> counts_;  // [target * classes + pred]
};

// Mean IoU over classes present in pred or target.
double mean_iou(const IntMask& pred, const IntMask& target, int classes);

struct TrainLogRow {
  int step = 0;
  float lr = 0.0f;
  std::optional<double> tau;
  float loss = 0.0f;
};

struct TrainResult {
  ParamStore<float> params;
  std::vector<TrainLogRow> log;
};

// Runs sample -> crop -> forward -> loss -> backward -> adam for
// cfg.total_steps with the poly schedule, then recomputes BN statistics and
// optionally writes a checkpoint. Deterministic in (spec, dataset, cfg).
TrainResult train(const NetworkSpec& spec, const Dataset& dataset,
                  const TrainConfig& cfg);

// Replaces BN running statistics with the batch statistics of the recompute
// set (the first `max_images` samples, one batch) and clears the stale flag.
void recompute_bn_stats(NetworkSpec& spec, ParamStore<float>& params,
                        const Dataset& dataset, int passes = 1, int max_images = 32);

// Argmax prediction for one sample at full resolution.
IntMask predict_mask(const NetworkSpec& spec, ParamStore<float>& params,
                     const Tensor<float>& image);

struct EvalReport {
  IouReport iou;
  int num_classes = 0;
  std::int64_t images = 0;
  std::string to_json() const;
};

EvalReport evaluate(const NetworkSpec& spec, ParamStore<float>& params,
                    const Dataset& dataset, int batch_size = 4);

void write_loss_csv(const std::filesystem::path& path,
                    const std::vector<TrainLogRow>& rows);

// Shared by the trainer and the dilation search --------------------------------

// Epoch-shuffled index stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, int batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  void reshuffle();
  std::size_t count_;
  int batch_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct Batch {
  Tensor<float> images;  // (B,3,H,W)
  IntMask masks;         // (B,H,W)
  std::optional<int> ignore_label;
};

// Assembles a batch, cropping when crop > 0; pads unaligned crops up to the
// next multiple of `align` with an ignored label.
Batch assemble_batch(const Dataset& dataset, const std::vector<std::size_t>& indices,
                     int crop, bool allow_unaligned, int align,
                     std::optional<int> ignore_label, std::mt19937_64& crop_rng);

void save_params(const std::filesystem::path& path, const ParamStore<float>& params);
void load_params(const std::filesystem::path& path, ParamStore<float>& params);

}  // namespace lightseg
