#include "lightseg/network.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

namespace lightseg {

Variant variant_from_string(const std::string& name) {
  if (name == "standard") return Variant::standard;
  if (name == "light_v1") return Variant::light_v1;
  if (name == "light_v2") return Variant::light_v2;
  throw std::invalid_argument("unknown variant '" + name +
                              "' (expected standard, light_v1 or light_v2)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::standard: return "standard";
    case Variant::light_v1: return "light_v1";
    case Variant::light_v2: return "light_v2";
  }
  return "?";
}

std::vector<const UnitSpec*> NetworkSpec::units() const {
  std::vector<const UnitSpec*> out;
  for (const auto& st : stages) {
    for (const auto& u : st) out.push_back(&u);
  }
  return out;
}

std::vector<UnitSpec*> NetworkSpec::units() {
  std::vector<UnitSpec*> out;
  for (auto& st : stages) {
    for (auto& u : st) out.push_back(&u);
  }
  return out;
}

int NetworkSpec::gated_unit_count() const {
  int n = 0;
  for (const auto* u : units()) {
    if (u->kind == UnitKind::gated) ++n;
  }
  return n;
}

NetworkSpec build_network(Variant variant, int num_classes) {
  if (num_classes < 2) {
    throw std::invalid_argument("build_network: num_classes must be >= 2, got " +
                                std::to_string(num_classes));
  }
  NetworkSpec spec;
  spec.variant = variant;
  spec.num_classes = num_classes;
  switch (variant) {
    case Variant::standard: spec.channel_plan = {64, 128, 256, 512}; break;
    case Variant::light_v1: spec.channel_plan = {64, 128, 64, 64}; break;
    case Variant::light_v2: spec.channel_plan = {64, 128, 32, 32}; break;
  }
  const std::array<int, 4> stage_strides{1, 2, 2, 2};
  int in_ch = spec.stem_channels;
  for (int s = 0; s < 4; ++s) {
    const int out_ch = spec.channel_plan[s];
    for (int u = 0; u < 2; ++u) {
      UnitSpec unit;
      unit.in_channels = (u == 0) ? in_ch : out_ch;
      unit.out_channels = out_ch;
      unit.stride = (u == 0) ? stage_strides[s] : 1;
      unit.dilation = 1;
      unit.has_projection = unit.stride != 1 || unit.in_channels != unit.out_channels;
      spec.stages[s][u] = unit;
    }
    in_ch = out_ch;
  }
  spec.head_upsample = 32;
  return spec;
}

// ---------------------------------------------------------------------------
// JSON round-trip

std::string spec_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["variant"] = to_string(spec.variant);
  j["num_classes"] = spec.num_classes;
  j["stem_channels"] = spec.stem_channels;
  j["channel_plan"] = spec.channel_plan;
  j["head_upsample"] = spec.head_upsample;
  j["converted"] = spec.converted;
  j["bn_stats_stale"] = spec.bn_stats_stale;
  j["gate_candidates"] = spec.gate_candidates;
  j["stages"] = nlohmann::json::array();
  for (const auto& st : spec.stages) {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& u : st) {
      js.push_back({{"in", u.in_channels},
                    {"out", u.out_channels},
                    {"stride", u.stride},
                    {"dilation", u.dilation},
                    {"projection", u.has_projection},
                    {"kind", u.kind == UnitKind::gated ? "gated" : "plain"}});
    }
    j["stages"].push_back(js);
  }
  return j.dump(2);
}

NetworkSpec spec_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad network spec json: " + std::string(e.what()));
  }
  NetworkSpec spec;
  spec.variant = variant_from_string(j.at("variant"));
  spec.num_classes = j.at("num_classes");
  spec.stem_channels = j.at("stem_channels");
  spec.channel_plan = j.at("channel_plan");
  spec.head_upsample = j.at("head_upsample");
  spec.converted = j.at("converted");
  spec.bn_stats_stale = j.at("bn_stats_stale");
  spec.gate_candidates = j.at("gate_candidates").get<std::vector<int>>();
  for (int s = 0; s < 4; ++s) {
    for (int u = 0; u < 2; ++u) {
      const auto& ju = j.at("stages").at(s).at(u);
      UnitSpec unit;
      unit.in_channels = ju.at("in");
      unit.out_channels = ju.at("out");
      unit.stride = ju.at("stride");
      unit.dilation = ju.at("dilation");
      unit.has_projection = ju.at("projection");
      unit.kind = ju.at("kind") == "gated" ? UnitKind::gated : UnitKind::plain;
      spec.stages[s][u] = unit;
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// parameter enumeration

namespace {

enum class ParamKind { conv_weight, bias, bn_gamma, bn_beta, bn_mean, bn_var, log_alpha };

template <class Fn>
void for_each_param(const NetworkSpec& spec, Fn&& fn) {
  const auto bn_group = [&](const std::string& prefix, int ch) {
    fn(prefix + ".gamma", Shape4{1, ch, 1, 1}, ParamKind::bn_gamma);
    fn(prefix + ".beta", Shape4{1, ch, 1, 1}, ParamKind::bn_beta);
    fn(prefix + ".running_mean", Shape4{1, ch, 1, 1}, ParamKind::bn_mean);
    fn(prefix + ".running_var", Shape4{1, ch, 1, 1}, ParamKind::bn_var);
  };
  const auto branch_body = [&](const std::string& prefix, int in_ch, int out_ch) {
    fn(prefix + ".conv1.weight", Shape4{out_ch, in_ch, 3, 3}, ParamKind::conv_weight);
    bn_group(prefix + ".bn1", out_ch);
    fn(prefix + ".conv2.weight", Shape4{out_ch, out_ch, 3, 3}, ParamKind::conv_weight);
    bn_group(prefix + ".bn2", out_ch);
  };

  fn("stem.conv.weight", Shape4{spec.stem_channels, 3, 7, 7}, ParamKind::conv_weight);
  bn_group("stem.bn", spec.stem_channels);
  for (int s = 0; s < 4; ++s) {
    for (int u = 0; u < 2; ++u) {
      const UnitSpec& unit = spec.stages[s][u];
      const std::string prefix =
          "stage" + std::to_string(s + 1) + ".unit" + std::to_string(u);
      if (unit.kind == UnitKind::gated) {
        const int n = static_cast<int>(spec.gate_candidates.size());
        for (int b = 0; b < n; ++b) {
          branch_body(prefix + ".branch" + std::to_string(b), unit.in_channels,
                      unit.out_channels);
        }
        fn(prefix + ".gate.log_alpha", Shape4{1, n, 1, 1}, ParamKind::log_alpha);
      } else {
        branch_body(prefix, unit.in_channels, unit.out_channels);
      }
      if (unit.has_projection) {
        fn(prefix + ".proj.weight", Shape4{unit.out_channels, unit.in_channels, 1, 1},
           ParamKind::conv_weight);
        bn_group(prefix + ".proj_bn", unit.out_channels);
      }
    }
  }
  fn("head.weight", Shape4{spec.num_classes, spec.channel_plan[3], 1, 1},
     ParamKind::conv_weight);
  fn("head.bias", Shape4{1, spec.num_classes, 1, 1}, ParamKind::bias);
}

}  // namespace

template <typename T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
  for (auto& e : entries) {
    if (e.name == name) return e.value;
  }
  throw std::invalid_argument("no parameter named '" + name + "'");
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e.value;
  }
  throw std::invalid_argument("no parameter named '" + name + "'");
}

template <typename T>
bool ParamStore<T>::contains(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

template <typename T>
std::int64_t ParamStore<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries) {
    if (e.trainable) n += e.value.numel();
  }
  return n;
}

std::int64_t parameter_count(const NetworkSpec& spec) {
  std::int64_t n = 0;
  for_each_param(spec, [&](const std::string&, Shape4 shape, ParamKind kind) {
    if (kind != ParamKind::bn_mean && kind != ParamKind::bn_var) n += shape.numel();
  });
  return n;
}

template <typename T>
ParamStore<T> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  ParamStore<T> store;
  std::mt19937_64 rng(seed);
  for_each_param(spec, [&](const std::string& name, Shape4 shape, ParamKind kind) {
    std::vector<T> data(static_cast<std::size_t>(shape.numel()));
    bool trainable = true;
    switch (kind) {
      case ParamKind::conv_weight: {
        const double fan_in = static_cast<double>(shape.c * shape.h * shape.w);
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (auto& v : data) v = static_cast<T>(dist(rng));
        break;
      }
      case ParamKind::bn_gamma:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case ParamKind::bn_var:
        std::fill(data.begin(), data.end(), T(1));
        trainable = false;
        break;
      case ParamKind::bn_mean:
        trainable = false;
        break;
      case ParamKind::bn_beta:
      case ParamKind::bias:
      case ParamKind::log_alpha:
        break;  // zeros
    }
    Tensor<T> t(shape, std::move(data), trainable);
    store.entries.push_back({name, std::move(t), trainable});
  });
  return store;
}

// ---------------------------------------------------------------------------
// forward

namespace {

template <typename T>
Tensor<T> bn_by_name(Tape<T>& tape, const Tensor<T>& x, ParamStore<T>& params,
                     const std::string& prefix, BnMode mode, const BnSettings& bn) {
  return batchnorm2d(tape, x, params.at(prefix + ".gamma"), params.at(prefix + ".beta"),
                     params.at(prefix + ".running_mean"),
                     params.at(prefix + ".running_var"), mode, static_cast<T>(bn.momentum),
                     static_cast<T>(bn.epsilon));
}

// The residual function F: conv3x3-BN-ReLU-conv3x3-BN at the given dilation.
template <typename T>
Tensor<T> residual_function(Tape<T>& tape, ParamStore<T>& params,
                            const std::string& prefix, const Tensor<T>& x, int stride,
                            int dilation, BnMode mode, const BnSettings& bn) {
  Tensor<T> out = conv2d<T>(tape, x, params.at(prefix + ".conv1.weight"), nullptr,
                         Conv2dOpts::same3x3(stride, dilation));
  out = bn_by_name(tape, out, params, prefix + ".bn1", mode, bn);
  out = relu(tape, out);
  out = conv2d<T>(tape, out, params.at(prefix + ".conv2.weight"), nullptr,
               Conv2dOpts::same3x3(1, dilation));
  return bn_by_name(tape, out, params, prefix + ".bn2", mode, bn);
}

template <typename T>
Tensor<T> skip_path(Tape<T>& tape, const UnitSpec& unit, ParamStore<T>& params,
                    const std::string& prefix, const Tensor<T>& x, BnMode mode,
                    const BnSettings& bn) {
  if (!unit.has_projection) return x;
  Conv2dOpts o;
  o.stride_h = o.stride_w = unit.stride;
  Tensor<T> s = conv2d<T>(tape, x, params.at(prefix + ".proj.weight"), nullptr, o);
  return bn_by_name(tape, s, params, prefix + ".proj_bn", mode, bn);
}

}  // namespace

template <typename T>
Tensor<T> residual_unit_forward(Tape<T>& tape, const UnitSpec& unit,
                                ParamStore<T>& params, const std::string& prefix,
                                const Tensor<T>& x, BnMode mode, const BnSettings& bn) {
  if (x.shape().c != unit.in_channels) {
    throw std::invalid_argument("residual unit " + prefix + ": input has C=" +
                                std::to_string(x.shape().c) + ", unit expects " +
                                std::to_string(unit.in_channels));
  }
  Tensor<T> f =
      residual_function(tape, params, prefix, x, unit.stride, unit.dilation, mode, bn);
  Tensor<T> skip = skip_path(tape, unit, params, prefix, x, mode, bn);
  return relu(tape, add(tape, skip, f));
}

template <typename T>
Tensor<T> gated_unit_forward(Tape<T>& tape, const UnitSpec& unit,
                             const std::vector<int>& candidates, ParamStore<T>& params,
                             const std::string& prefix, const Tensor<T>& zbar,
                             const Tensor<T>& x, BnMode mode, const BnSettings& bn) {
  if (zbar.shape().c != static_cast<std::int64_t>(candidates.size())) {
    throw std::invalid_argument("gated unit " + prefix + ": gate weight length " +
                                std::to_string(zbar.shape().c) + " does not match " +
                                std::to_string(candidates.size()) + " candidates");
  }
  if (x.shape().c != unit.in_channels) {
    throw std::invalid_argument("gated unit " + prefix + ": input has C=" +
                                std::to_string(x.shape().c) + ", unit expects " +
                                std::to_string(unit.in_channels));
  }
  std::vector<Tensor<T>> branches;
  branches.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    branches.push_back(residual_function(tape, params,
                                         prefix + ".branch" + std::to_string(i), x,
                                         unit.stride, candidates[i], mode, bn));
  }
  Tensor<T> combined = gate_combine(tape, zbar, branches);
  Tensor<T> skip = skip_path(tape, unit, params, prefix, x, mode, bn);
  return relu(tape, add(tape, skip, combined));
}

template <typename T>
Tensor<T> forward_features(Tape<T>& tape, const NetworkSpec& spec,
                           ParamStore<T>& params, const Tensor<T>& image, BnMode mode,
                           int upto_stage, const GateForwardCtx<T>* gates,
                           const BnSettings& bn) {
  int divisor = 4;
  for (int s = 0; s < 4; ++s) divisor *= spec.stages[s][0].stride;
  const std::int64_t mult = divisor;
  if (image.shape().h % mult != 0 || image.shape().w % mult != 0) {
    throw std::invalid_argument(
        "input spatial dims " + std::to_string(image.shape().h) + "x" +
        std::to_string(image.shape().w) + " must be multiples of " +
        std::to_string(mult));
  }

  Conv2dOpts stem_opts;
  stem_opts.stride_h = stem_opts.stride_w = 2;
  stem_opts.pad_h = stem_opts.pad_w = 3;
  Tensor<T> x = conv2d<T>(tape, image, params.at("stem.conv.weight"), nullptr, stem_opts);
  x = bn_by_name(tape, x, params, "stem.bn", mode, bn);
  x = relu(tape, x);
  x = maxpool2d(tape, x, 3, 2, 1);
  int gate_index = 0;
  for (int s = 0; s < 4 && s < upto_stage; ++s) {
    for (int u = 0; u < 2; ++u) {
      const UnitSpec& unit = spec.stages[s][u];
      const std::string prefix =
          "stage" + std::to_string(s + 1) + ".unit" + std::to_string(u);
      if (unit.kind == UnitKind::gated) {
        if (!gates || gate_index >= static_cast<int>(gates->zbar.size())) {
          throw std::invalid_argument("gated unit " + prefix +
                                      " requires gate weights in the forward context");
        }
        x = gated_unit_forward(tape, unit, spec.gate_candidates, params, prefix,
                               gates->zbar[gate_index], x, mode, bn);
        ++gate_index;
      } else {
        x = residual_unit_forward(tape, unit, params, prefix, x, mode, bn);
      }
    }
  }
  return x;
}

template <typename T>
Tensor<T> forward_segmentation(Tape<T>& tape, const NetworkSpec& spec,
                               ParamStore<T>& params, const Tensor<T>& image,
                               BnMode mode, const GateForwardCtx<T>* gates,
                               const BnSettings& bn) {
  Tensor<T> x = forward_features(tape, spec, params, image, mode, 4, gates, bn);
  Tensor<T> head_bias = params.at("head.bias");
  Tensor<T> logits =
      conv2d(tape, x, params.at("head.weight"), &head_bias, Conv2dOpts{});
  return bilinear_upsample(tape, logits, spec.head_upsample);
}

// ---------------------------------------------------------------------------

#define LIGHTSEG_INSTANTIATE_NET(T)                                                  \
  template struct ParamStore<T>;                                                     \
  template ParamStore<T> init_params<T>(const NetworkSpec&, std::uint64_t);          \
  template Tensor<T> residual_unit_forward<T>(Tape<T>&, const UnitSpec&,             \
                                              ParamStore<T>&, const std::string&,    \
                                              const Tensor<T>&, BnMode,              \
                                              const BnSettings&);                    \
  template Tensor<T> gated_unit_forward<T>(Tape<T>&, const UnitSpec&,                \
                                           const std::vector<int>&, ParamStore<T>&,  \
                                           const std::string&, const Tensor<T>&,     \
                                           const Tensor<T>&, BnMode,                 \
                                           const BnSettings&);                       \
  template Tensor<T> forward_features<T>(Tape<T>&, const NetworkSpec&,               \
                                         ParamStore<T>&, const Tensor<T>&, BnMode,   \
                                         int, const GateForwardCtx<T>*,              \
                                         const BnSettings&);                         \
  template Tensor<T> forward_segmentation<T>(Tape<T>&, const NetworkSpec&,           \
                                             ParamStore<T>&, const Tensor<T>&,       \
                                             BnMode, const GateForwardCtx<T>*,       \
                                             const BnSettings&);

LIGHTSEG_INSTANTIATE_NET(float)
LIGHTSEG_INSTANTIATE_NET(double)

#undef LIGHTSEG_INSTANTIATE_NET

}  // namespace lightseg
