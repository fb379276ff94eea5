#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lightseg/errors.hpp"

namespace lightseg {

template <typename T>
struct AdamState {
  std::vector<T> m, v;
  std::int64_t t = 0;
};

// Bias-corrected Adam update, in place. Rejects non-finite gradients.
template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState<T>& state,
               T lr, T beta1, T beta2, T epsilon);

}  // namespace lightseg
