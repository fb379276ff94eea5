#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lightseg/tensor.hpp"

namespace lightseg {

// Checkpoint container: 8-byte magic, little-endian u64 manifest length, JSON
// manifest (tensor names, shapes, dtype, byte offsets), then raw little-endian
// float payloads. Round-trips bit-exactly.
void save_tensors(const std::filesystem::path& path,
                  const std::vector<std::pair<std::string, Tensor<float>>>& tensors);

std::vector<std::pair<std::string, Tensor<float>>> load_tensors(
    const std::filesystem::path& path);

}  // namespace lightseg
