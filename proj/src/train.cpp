#include "lightseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "lightseg/checkpoint.hpp"
#include "lightseg/convert.hpp"
#include "lightseg/optim.hpp"

namespace lightseg {

namespace {
constexpr int kPadIgnore = 255;
}  // namespace

float poly_lr(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) {
    throw std::invalid_argument("poly_lr: step " + std::to_string(step) +
                                " outside [0," + std::to_string(cfg.total_steps) + "]");
  }
  const double frac = 1.0 - static_cast<double>(step) / cfg.total_steps;
  return static_cast<float>(cfg.base_lr * std::pow(frac, cfg.lr_power));
}

SegSample random_crop(const SegSample& sample, int crop, std::mt19937_64& rng) {
  const auto& sh = sample.image.shape();
  if (crop < 1 || crop > sh.h || crop > sh.w) {
    throw std::invalid_argument("random_crop: crop " + std::to_string(crop) +
                                " does not fit image " + std::to_string(sh.h) + "x" +
                                std::to_string(sh.w));
  }
  std::uniform_int_distribution<std::int64_t> dy(0, sh.h - crop);
  std::uniform_int_distribution<std::int64_t> dx(0, sh.w - crop);
  const std::int64_t oy = dy(rng);
  const std::int64_t ox = dx(rng);

  SegSample out;
  std::vector<float> data(static_cast<std::size_t>(3) * crop * crop);
  const auto src = sample.image.data();
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < crop; ++y) {
      const float* row = src.data() + ((c * sh.h) + oy + y) * sh.w + ox;
      std::copy(row, row + crop,
                data.begin() + (static_cast<std::size_t>(c) * crop + y) * crop);
    }
  }
  out.image = Tensor<float>({1, 3, crop, crop}, std::move(data));
  out.mask.n = 1;
  out.mask.h = crop;
  out.mask.w = crop;
  out.mask.values.resize(static_cast<std::size_t>(crop) * crop);
  for (int y = 0; y < crop; ++y) {
    const std::int32_t* row = sample.mask.values.data() + (oy + y) * sh.w + ox;
    std::copy(row, row + crop, out.mask.values.begin() + static_cast<std::size_t>(y) * crop);
  }
  out.id = sample.id;
  return out;
}

// ---------------------------------------------------------------------------
// IoU

ConfusionMatrix::ConfusionMatrix(int classes)
    : classes_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
  if (classes < 2) throw std::invalid_argument("ConfusionMatrix: need >= 2 classes");
}

void ConfusionMatrix::add(const IntMask& pred, const IntMask& target) {
  if (pred.numel() == 0 || target.numel() == 0) {
    throw std::invalid_argument("ConfusionMatrix: empty masks");
  }
  if (pred.n != target.n || pred.h != target.h || pred.w != target.w) {
    throw std::invalid_argument("ConfusionMatrix: mask shape mismatch");
  }
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const auto p = pred.values[i];
    const auto t = target.values[i];
    if (p < 0 || p >= classes_ || t < 0 || t >= classes_) {
      throw std::invalid_argument("ConfusionMatrix: label outside [0," +
                                  std::to_string(classes_) + ")");
    }
    ++counts_[static_cast<std::size_t>(t) * classes_ + p];
  }
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t s = 0;
  for (const auto v : counts_) s += v;
  return s;
}

IouReport ConfusionMatrix::iou() const {
  IouReport rep;
  rep.per_class.assign(classes_, std::numeric_limits<double>::quiet_NaN());
  rep.target_pixels.assign(classes_, 0);
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes_; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < classes_; ++k) {
      row += counts_[static_cast<std::size_t>(c) * classes_ + k];
      col += counts_[static_cast<std::size_t>(k) * classes_ + c];
    }
    rep.target_pixels[c] = row;
    const std::int64_t inter = counts_[static_cast<std::size_t>(c) * classes_ + c];
    const std::int64_t uni = row + col - inter;
    if (uni > 0) {
      rep.per_class[c] = static_cast<double>(inter) / static_cast<double>(uni);
      sum += rep.per_class[c];
      ++present;
    }
  }
  rep.mean = present > 0 ? sum / present : 0.0;
  return rep;
}

double mean_iou(const IntMask& pred, const IntMask& target, int classes) {
  ConfusionMatrix cm(classes);
  cm.add(pred, target);
  return cm.iou().mean;
}

std::string IouReport::to_json() const {
  nlohmann::json j;
  j["per_class"] = nlohmann::json::array();
  for (const auto v : per_class) {
    if (std::isnan(v)) {
      j["per_class"].push_back(nullptr);
    } else {
      j["per_class"].push_back(v);
    }
  }
  j["target_pixels"] = target_pixels;
  j["mean"] = mean;
  return j.dump(2);
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["mean_iou"] = iou.mean;
  j["num_classes"] = num_classes;
  j["images"] = images;
  j["per_class_iou"] = nlohmann::json::array();
  for (const auto v : iou.per_class) {
    if (std::isnan(v)) {
      j["per_class_iou"].push_back(nullptr);
    } else {
      j["per_class_iou"].push_back(v);
    }
  }
  j["target_pixels"] = iou.target_pixels;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// batching

BatchSampler::BatchSampler(std::size_t count, int batch_size, std::uint64_t seed)
    : count_(count), batch_(batch_size), rng_(seed) {
  if (count == 0) throw std::invalid_argument("BatchSampler: empty dataset");
  if (batch_size < 1) throw std::invalid_argument("BatchSampler: batch_size < 1");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(count_);
  for (std::size_t i = 0; i < count_; ++i) order_[i] = i;
  for (std::size_t i = count_ - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> d(0, i);
    std::swap(order_[i], order_[d(rng_)]);
  }
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  while (out.size() < static_cast<std::size_t>(batch_)) {
    if (cursor_ == count_) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

Batch assemble_batch(const Dataset& dataset, const std::vector<std::size_t>& indices,
                     int crop, bool allow_unaligned, int align,
                     std::optional<int> ignore_label, std::mt19937_64& crop_rng) {
  if (indices.empty()) throw std::invalid_argument("assemble_batch: empty batch");

  std::vector<SegSample> cropped;
  cropped.reserve(indices.size());
  for (const auto idx : indices) {
    const auto& s = dataset.samples.at(idx);
    if (crop > 0) {
      cropped.push_back(random_crop(s, crop, crop_rng));
    } else {
      cropped.push_back(s);
    }
  }
  const auto base = cropped.front().image.shape();
  for (const auto& s : cropped) {
    if (s.image.shape().h != base.h || s.image.shape().w != base.w) {
      throw std::invalid_argument(
          "assemble_batch: mixed image sizes; use a crop to unify them");
    }
  }

  std::int64_t th = base.h, tw = base.w;
  bool padded = false;
  if (th % align != 0 || tw % align != 0) {
    if (!allow_unaligned) {
      throw std::invalid_argument("batch extent " + std::to_string(th) + "x" +
                                  std::to_string(tw) + " is not divisible by the "
                                  "output stride " + std::to_string(align) +
                                  "; enable the unaligned override to pad");
    }
    th = (th + align - 1) / align * align;
    tw = (tw + align - 1) / align * align;
    padded = true;
  }

  Batch batch;
  const std::int64_t b = static_cast<std::int64_t>(cropped.size());
  const int pad_label = ignore_label.value_or(kPadIgnore);
  batch.images = Tensor<float>::zeros({b, 3, th, tw});
  batch.masks.n = b;
  batch.masks.h = th;
  batch.masks.w = tw;
  batch.masks.values.assign(static_cast<std::size_t>(b) * th * tw,
                            padded ? pad_label : 0);
  batch.ignore_label = padded ? std::optional<int>(pad_label) : ignore_label;

  auto dst = batch.images.data();
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& s = cropped[i];
    const auto sh = s.image.shape();
    const auto src = s.image.data();
    for (int c = 0; c < 3; ++c) {
      for (std::int64_t y = 0; y < sh.h; ++y) {
        std::copy(src.data() + (c * sh.h + y) * sh.w,
                  src.data() + (c * sh.h + y) * sh.w + sh.w,
                  dst.data() + ((i * 3 + c) * th + y) * tw);
      }
    }
    for (std::int64_t y = 0; y < sh.h; ++y) {
      std::copy(s.mask.values.begin() + y * sh.w, s.mask.values.begin() + (y + 1) * sh.w,
                batch.masks.values.begin() + (i * th + y) * tw);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// training loop

TrainResult train(const NetworkSpec& spec, const Dataset& dataset,
                  const TrainConfig& cfg) {
  if (cfg.batch_size < 1 || cfg.total_steps < 1) {
    throw std::invalid_argument("train: batch_size and total_steps must be >= 1");
  }
  if (spec.gated_unit_count() > 0) {
    throw std::invalid_argument("train: spec has gated units; decode them first");
  }
  if (dataset.samples.empty()) throw std::invalid_argument("train: empty dataset");
  if (dataset.num_classes != spec.num_classes) {
    throw std::invalid_argument("train: dataset has " +
                                std::to_string(dataset.num_classes) +
                                " classes but the network expects " +
                                std::to_string(spec.num_classes));
  }
  const int align = output_stride(spec);
  if (cfg.crop_size > 0 && cfg.crop_size % align != 0 && !cfg.allow_unaligned_crop) {
    throw std::invalid_argument("train: crop_size " + std::to_string(cfg.crop_size) +
                                " is not divisible by the output stride " +
                                std::to_string(align) +
                                "; set allow_unaligned_crop to pad internally");
  }

  NetworkSpec net = spec;
  ParamStore<float> params = init_params<float>(net, cfg.seed);
  std::vector<AdamState<float>> opt(params.entries.size());
  BatchSampler sampler(dataset.samples.size(), cfg.batch_size, cfg.seed ^ detail::kSamplerSalt);
  std::mt19937_64 crop_rng(cfg.seed ^ detail::kCropSalt);

  TrainResult result;
  result.log.reserve(cfg.total_steps);
  for (int step = 0; step < cfg.total_steps; ++step) {
    const float lr = poly_lr(step, cfg);
    const Batch batch =
        assemble_batch(dataset, sampler.next(), cfg.crop_size,
                       cfg.allow_unaligned_crop, align, cfg.ignore_label, crop_rng);
    Tape<float> tape(true);
    Tensor<float> logits =
        forward_segmentation(tape, net, params, batch.images, BnMode::train);
    Tensor<float> loss =
        softmax_cross_entropy(tape, logits, batch.masks, batch.ignore_label);
    const float loss_value = loss.data()[0];
    if (!std::isfinite(loss_value)) {
      throw numeric_error("train: non-finite loss at step " + std::to_string(step));
    }
    tape.backward(loss);
    for (std::size_t i = 0; i < params.entries.size(); ++i) {
      auto& e = params.entries[i];
      if (!e.trainable || !e.value.has_grad()) continue;
      adam_step<float>(e.value.data(), e.value.grad(), opt[i], lr, cfg.adam_beta1,
                       cfg.adam_beta2, cfg.adam_eps);
    }
    result.log.push_back({step, lr, std::nullopt, loss_value});
  }

  if (cfg.recompute_bn_after) {
    recompute_bn_stats(net, params, dataset, 1, cfg.recompute_max_images);
  }
  if (!cfg.checkpoint_path.empty()) {
    save_params(cfg.checkpoint_path, params);
  }
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// BN recompute / evaluation

void recompute_bn_stats(NetworkSpec& spec, ParamStore<float>& params,
                        const Dataset& dataset, int passes, int max_images) {
  if (dataset.samples.empty()) {
    throw std::invalid_argument("recompute_bn_stats: empty dataset");
  }
  if (passes < 1) throw std::invalid_argument("recompute_bn_stats: passes must be >= 1");
  if (spec.gated_unit_count() > 0) {
    throw std::invalid_argument("recompute_bn_stats: decode gated units first");
  }
  const std::size_t take =
      std::min<std::size_t>(dataset.samples.size(), std::max(1, max_images));
  std::vector<std::size_t> indices(take);
  for (std::size_t i = 0; i < take; ++i) indices[i] = i;
  std::mt19937_64 rng(0);
  const Batch batch = assemble_batch(dataset, indices, 0, false, output_stride(spec),
                                     std::nullopt, rng);
  // momentum 1: running stats become exactly this batch's statistics
  BnSettings bn;
  bn.momentum = 1.0f;
  for (int p = 0; p < passes; ++p) {
    Tape<float> tape(false);
    forward_features<float>(tape, spec, params, batch.images, BnMode::train, 4, nullptr, bn);
  }
  spec.bn_stats_stale = false;
}

IntMask predict_mask(const NetworkSpec& spec, ParamStore<float>& params,
                     const Tensor<float>& image) {
  Tape<float> tape(false);
  Tensor<float> logits = forward_segmentation(tape, spec, params, image, BnMode::infer);
  const auto ls = logits.shape();
  IntMask out;
  out.n = ls.n;
  out.h = ls.h;
  out.w = ls.w;
  out.values.resize(static_cast<std::size_t>(ls.n) * ls.h * ls.w);
  const auto lv = logits.data();
  const std::int64_t plane = ls.h * ls.w;
  for (std::int64_t ni = 0; ni < ls.n; ++ni) {
    for (std::int64_t p = 0; p < plane; ++p) {
      const float* base = lv.data() + ni * ls.c * plane + p;
      int best = 0;
      float bv = base[0];
      for (int c = 1; c < ls.c; ++c) {
        const float v = base[c * plane];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out.values[ni * plane + p] = best;
    }
  }
  return out;
}

EvalReport evaluate(const NetworkSpec& spec, ParamStore<float>& params,
                    const Dataset& dataset, int batch_size) {
  if (dataset.samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  ConfusionMatrix cm(spec.num_classes);
  std::mt19937_64 rng(0);
  std::size_t done = 0;
  while (done < dataset.samples.size()) {
    const std::size_t take =
        std::min<std::size_t>(batch_size, dataset.samples.size() - done);
    std::vector<std::size_t> indices(take);
    for (std::size_t i = 0; i < take; ++i) indices[i] = done + i;
    const Batch batch = assemble_batch(dataset, indices, 0, false,
                                       output_stride(spec), std::nullopt, rng);
    const IntMask pred = predict_mask(spec, params, batch.images);
    cm.add(pred, batch.masks);
    done += take;
  }
  EvalReport rep;
  rep.iou = cm.iou();
  rep.num_classes = spec.num_classes;
  rep.images = static_cast<std::int64_t>(dataset.samples.size());
  return rep;
}

// ---------------------------------------------------------------------------
// persistence / csv

void save_params(const std::filesystem::path& path, const ParamStore<float>& params) {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  tensors.reserve(params.entries.size());
  for (const auto& e : params.entries) tensors.emplace_back(e.name, e.value);
  save_tensors(path, tensors);
}

void load_params(const std::filesystem::path& path, ParamStore<float>& params) {
  const auto tensors = load_tensors(path);
  if (tensors.size() != params.entries.size()) {
    throw data_error("checkpoint has " + std::to_string(tensors.size()) +
                     " tensors, expected " + std::to_string(params.entries.size()));
  }
  for (const auto& [name, value] : tensors) {
    Tensor<float>& dst = params.at(name);
    if (dst.shape() != value.shape()) {
      throw data_error("checkpoint tensor " + name + " has shape " +
                       value.shape().str() + ", expected " + dst.shape().str());
    }
    std::copy(value.data().begin(), value.data().end(), dst.data().begin());
  }
}

void write_loss_csv(const std::filesystem::path& path,
                    const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open loss log for writing: " + path.string());
  out << "step,lr,tau,loss\n";
  for (const auto& r : rows) {
    out << r.step << "," << r.lr << ",";
    if (r.tau) out << *r.tau;
    out << "," << r.loss << "\n";
  }
}

}  // namespace lightseg
