#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lightseg/tensor.hpp"

namespace lightseg {

// One segmentation sample: RGB image in [0,1], integer class mask of equal
// spatial extent.
struct SegSample {
  Tensor<float> image;  // (1,3,H,W)
  IntMask mask;         // (1,H,W)
  std::string id;
};

struct Dataset {
  std::vector<SegSample> samples;
  int num_classes = 2;
  std::string task = "blobs";
  std::uint64_t seed = 0;
  int height = 0, width = 0;
};

enum class GenTask { blobs, planted_dilation };

struct GenConfig {
  GenTask task = GenTask::blobs;
  int height = 96;
  int width = 96;
  int num_classes = 2;
  int count = 256;
  std::uint64_t seed = 0;
  // planted task: label source offset measured in multiples of the network's
  // output stride (8). Must be one of the candidate dilation rates.
  int planted_offset = 8;
  // lattice cell of the planted field's value noise, in pixels
  int noise_cell = 8;
  // blob task knobs
  float min_capsule_radius = 8.0f;
  float max_capsule_radius = 14.0f;
  float background_noise = 0.10f;
  float instrument_noise = 0.08f;
};

// Textured background plus an elongated capsule "instrument". C=2 labels the
// capsule; C=4 splits it lengthwise into three parts. Deterministic in
// (config, seed); every class is present in every sample.
Dataset gen_blobs(const GenConfig& cfg);

// Labels compare the smooth channel-0 field sampled `planted_offset * 8`
// pixels away along each axis, so only a receptive field spanning that gap
// can predict them. The reference labeler is exposed for tests.
Dataset gen_planted_dilation(const GenConfig& cfg);

// gap in input pixels for a planted config (offset * output stride).
int planted_gap_px(const GenConfig& cfg);

// Reference labeler for the planted task: label of pixel (i,j) given the
// channel-0 field. Values outside the image count as 0.
int planted_label(const std::vector<float>& field, int height, int width, int gap,
                  int i, int j);

// Directory layout: root/images/NNNN.png, root/masks/NNNN.png, root/dataset.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

// Per-sample RNG stream derivation (splitmix64 over the dataset seed).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace lightseg
