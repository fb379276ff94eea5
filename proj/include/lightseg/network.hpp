#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lightseg/ops.hpp"
#include "lightseg/tensor.hpp"

namespace lightseg {

enum class Variant { standard, light_v1, light_v2 };

Variant variant_from_string(const std::string& name);
std::string to_string(Variant v);

enum class UnitKind { plain, gated };

// One basic residual unit: conv3x3-BN-ReLU-conv3x3-BN plus identity or
// projected skip, final ReLU after the add.
struct UnitSpec {
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  int dilation = 1;
  bool has_projection = false;
  UnitKind kind = UnitKind::plain;

  bool operator==(const UnitSpec&) const = default;
};

// ResNet-18 topology: 7x7/2 stem conv + 3x3/2 max-pool, four stages of two
// basic units, 1x1 head conv to `num_classes` plus bilinear upsampling back
// to input resolution.
struct NetworkSpec {
  Variant variant = Variant::standard;
  int num_classes = 2;
  int stem_channels = 64;
  std::array<int, 4> channel_plan{64, 128, 256, 512};
  std::array<std::array<UnitSpec, 2>, 4> stages;
  int head_upsample = 32;
  bool converted = false;
  bool bn_stats_stale = false;
  std::vector<int> gate_candidates;  // non-empty only while units are gated

  std::vector<const UnitSpec*> units() const;
  std::vector<UnitSpec*> units();
  int gated_unit_count() const;

  bool operator==(const NetworkSpec&) const = default;
};

// Channel plans: standard (64,128,256,512); the light variants thin the last
// two stages to 64 (v1) and 32 (v2).
NetworkSpec build_network(Variant variant, int num_classes);

std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& json_text);

// Named parameter container. Entry order is fixed by construction and drives
// both initialization draws and checkpoint layout.
template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };
  std::vector<Entry> entries;

  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::int64_t parameter_count() const;  // trainable elements only
};

// He-normal conv weights, BN gamma=1/beta=0, running stats (0,1), gate
// log-alpha zeros. Deterministic in (spec, seed).
template <typename T>
ParamStore<T> init_params(const NetworkSpec& spec, std::uint64_t seed);

// Trainable parameter element count for a spec without allocating storage.
std::int64_t parameter_count(const NetworkSpec& spec);

// Per-gated-unit soft gate weights, in order of appearance in the network.
template <typename T>
struct GateForwardCtx {
  std::vector<Tensor<T>> zbar;  // each (1,K,1,1)
};

struct BnSettings {
  float momentum = 0.1f;
  float epsilon = 1e-5f;
};

// Forward through one plain residual unit using parameters at `prefix`.
template <typename T>
Tensor<T> residual_unit_forward(Tape<T>& tape, const UnitSpec& unit,
                                ParamStore<T>& params, const std::string& prefix,
                                const Tensor<T>& x, BnMode mode,
                                const BnSettings& bn = {});

// Gated residual unit: relu(x + sum_i zbar_i * F_i(x)), branch i running at
// dilation candidates[i]. Shared (projected) skip path.
template <typename T>
Tensor<T> gated_unit_forward(Tape<T>& tape, const UnitSpec& unit,
                             const std::vector<int>& candidates,
                             ParamStore<T>& params, const std::string& prefix,
                             const Tensor<T>& zbar, const Tensor<T>& x, BnMode mode,
                             const BnSettings& bn = {});

// Feature map after `upto_stage` stages (0 = stem output). Used by the
// converted/unconverted equivalence checks.
template <typename T>
Tensor<T> forward_features(Tape<T>& tape, const NetworkSpec& spec,
                           ParamStore<T>& params, const Tensor<T>& image, BnMode mode,
                           int upto_stage, const GateForwardCtx<T>* gates = nullptr,
                           const BnSettings& bn = {});

// Full-resolution logits (N, num_classes, H, W).
template <typename T>
Tensor<T> forward_segmentation(Tape<T>& tape, const NetworkSpec& spec,
                               ParamStore<T>& params, const Tensor<T>& image,
                               BnMode mode, const GateForwardCtx<T>* gates = nullptr,
                               const BnSettings& bn = {});

}  // namespace lightseg
